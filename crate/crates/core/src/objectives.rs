//! Loss terms of the training objective, computed on one minibatch of
//! common-space embeddings.
//!
//! Every term reduces over the batch by the mean. Hardest negatives are
//! mined inside the batch with ties broken by the smallest index.

use serde::{Deserialize, Serialize};

use crate::diffmath::{Tape, Var};
use crate::encoders::DiscriminatorParams;
use crate::error::{Error, Result};
use crate::params::Bound;

pub const KL_FLOOR: f64 = 1e-12;
pub const PROB_CLAMP: f64 = 1e-7;

/// Scalar hyperparameters of the objective and of inference fusion.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of the target-language triplet term.
    pub alpha: f64,
    pub lambda_sim: f64,
    pub lambda_feat: f64,
    pub lambda_cyc: f64,
    pub lambda_adv: f64,
    /// Video–text triplet margin.
    pub margin: f64,
    /// Cycle-consistency triplet margin.
    pub cycle_margin: f64,
    pub temperature: f64,
    /// Inference fusion weight on the target-language similarity.
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.6,
            lambda_sim: 0.4,
            lambda_feat: 0.1,
            lambda_cyc: 0.5,
            lambda_adv: 1e-3,
            margin: 0.2,
            cycle_margin: 0.2,
            temperature: 0.05,
            beta: 0.8,
        }
    }
}

impl LossWeights {
    /// Triplet-only objective: all auxiliary weights zero.
    pub fn basic(self) -> Self {
        LossWeights {
            lambda_sim: 0.0,
            lambda_feat: 0.0,
            lambda_cyc: 0.0,
            lambda_adv: 0.0,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::config("temperature", "must be positive"));
        }
        for (key, v) in [("margin", self.margin), ("cycle_margin", self.cycle_margin)] {
            if !(v >= 0.0) {
                return Err(Error::config(key, "must be non-negative"));
            }
        }
        for (key, v) in [
            ("alpha", self.alpha),
            ("lambda_sim", self.lambda_sim),
            ("lambda_feat", self.lambda_feat),
            ("lambda_cyc", self.lambda_cyc),
            ("lambda_adv", self.lambda_adv),
        ] {
            if !(v >= 0.0) {
                return Err(Error::config(key, "must be non-negative"));
            }
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::config("beta", "must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn needs_teacher(&self) -> bool {
        self.lambda_sim > 0.0 || self.lambda_feat > 0.0
    }

    pub fn needs_back_translation(&self) -> bool {
        self.lambda_cyc > 0.0
    }

    pub fn needs_discriminator(&self) -> bool {
        self.lambda_adv > 0.0
    }
}

/// Per-instance embeddings of one minibatch, all rows aligned by instance.
#[derive(Clone, Copy, Debug)]
pub struct BatchEmbeddings {
    /// `v̂`, B×d.
    pub video: Var,
    /// `ĉ^S`, B×d.
    pub source: Var,
    /// `ĉ^T`, B×d.
    pub target: Var,
    /// `ĉ^B` of the back-translated captions, B×d.
    pub back: Option<Var>,
    /// `ĥ^C` from the cross-attention teacher, B×d.
    pub teacher: Option<Var>,
    /// Pooled token representations `f(m^S)`, B×d_w.
    pub pooled_source: Option<Var>,
    /// Pooled token representations `f(m^T)`, B×d_w.
    pub pooled_target: Option<Var>,
}

impl BatchEmbeddings {
    pub fn size(&self, tape: &Tape) -> usize {
        tape.value(self.video).rows()
    }

    pub fn validate(&self, tape: &Tape) -> Result<usize> {
        let b = self.size(tape);
        if b < 2 {
            return Err(Error::Shape(format!("batch of {b}; hardest-negative mining needs 2")));
        }
        let all = [Some(self.source), Some(self.target), self.back, self.teacher, self.pooled_source, self.pooled_target];
        for v in all.into_iter().flatten() {
            if tape.value(v).rows() != b || tape.value(v).shape().len() != 2 {
                return Err(Error::Shape(format!(
                    "batch member {:?} misaligned with {b} videos",
                    tape.value(v).shape()
                )));
            }
        }
        Ok(b)
    }
}

/// How the adversarial term's gradient reaches the encoders.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdversarialRouting {
    /// Encoders receive the negated gradient (they learn to confuse `F`).
    Reversal,
    /// Plain gradient flow; only used to probe the reversal.
    Direct,
}

/// Index of the largest entry of `values` skipping `skip`; smallest index wins ties.
fn argmax_excluding(values: impl Iterator<Item = f64>, skip: usize) -> usize {
    let mut best = (usize::MAX, f64::NEG_INFINITY);
    for (j, v) in values.enumerate() {
        if j != skip && (best.0 == usize::MAX || v > best.1) {
            best = (j, v);
        }
    }
    best.0
}

/// Bidirectional hardest-negative hinge over a square similarity matrix
/// whose diagonal holds the positive pairs:
/// `mean_i [ max(0, Δ + S[i, j*] − S[i, i]) + max(0, Δ + S[k*, i] − S[i, i]) ]`.
pub fn hardest_negative_hinge(tape: &mut Tape, sims: Var, margin: f64) -> Result<Var> {
    let s = tape.value(sims);
    let (b, b2) = s
        .as_matrix_dims()
        .ok_or_else(|| Error::Shape("similarity matrix expected".into()))?;
    if b != b2 {
        return Err(Error::Shape(format!("similarity matrix {b}×{b2} is not square")));
    }
    if b < 2 {
        return Err(Error::Shape("hardest-negative mining needs at least 2 pairs".into()));
    }
    let mut pos = Vec::with_capacity(b);
    let mut row_neg = Vec::with_capacity(b);
    let mut col_neg = Vec::with_capacity(b);
    for i in 0..b {
        let j = argmax_excluding(s.row(i).iter().copied(), i);
        let k = argmax_excluding((0..b).map(|r| s.get(r, i)), i);
        pos.push(i * b + i);
        row_neg.push(i * b + j);
        col_neg.push(k * b + i);
    }
    let p = tape.pick(sims, &pos)?;
    let mut total: Option<Var> = None;
    for negs in [row_neg, col_neg] {
        let n = tape.pick(sims, &negs)?;
        let d = tape.sub(n, p)?;
        let d = tape.add_scalar(d, margin)?;
        let h = tape.relu(d)?;
        let h = tape.sum(h)?;
        total = Some(match total {
            Some(t) => tape.add(t, h)?,
            None => h,
        });
    }
    tape.scale(total.expect("two directions"), 1.0 / b as f64)
}

/// Hardest-negative triplet loss between aligned `anchors` and `positives` (cosine similarity).
pub fn hardest_negative_triplet(tape: &mut Tape, anchors: Var, positives: Var, margin: f64) -> Result<Var> {
    let (a, p) = (tape.value(anchors).shape().to_vec(), tape.value(positives).shape().to_vec());
    if a != p {
        return Err(Error::Shape(format!("anchors {a:?} vs positives {p:?}")));
    }
    let sims = tape.cosine_matrix(anchors, positives)?;
    hardest_negative_hinge(tape, sims, margin)
}

/// `L^S + α L^T` with videos as anchors.
pub fn loss_tri(tape: &mut Tape, batch: &BatchEmbeddings, w: &LossWeights) -> Result<Var> {
    batch.validate(tape)?;
    let ls = hardest_negative_triplet(tape, batch.video, batch.source, w.margin)?;
    let lt = hardest_negative_triplet(tape, batch.video, batch.target, w.margin)?;
    let lt = tape.scale(lt, w.alpha)?;
    tape.add(ls, lt)
}

/// Softmax over cosine similarities of each query row to every key row, at temperature `τ`.
pub fn similarity_distribution(tape: &mut Tape, queries: Var, keys: Var, temperature: f64) -> Result<Var> {
    if !(temperature > 0.0) {
        return Err(Error::Domain(format!("temperature {temperature} must be positive")));
    }
    let sims = tape.cosine_matrix(queries, keys)?;
    tape.softmax_rows(sims, temperature)
}

/// Mean over rows of `KL(q‖p) = Σ q ln(q/p)`, with `0·ln 0 = 0` and `p` floored at 1e-12.
pub fn kl_divergence_rows(tape: &mut Tape, q: Var, p: Var) -> Result<Var> {
    let (qs, ps) = (tape.value(q).shape().to_vec(), tape.value(p).shape().to_vec());
    if qs != ps {
        return Err(Error::Shape(format!("KL of {qs:?} against {ps:?}")));
    }
    let rows = tape.value(q).rows();
    let qf = tape.clamp(q, KL_FLOOR, f64::INFINITY)?;
    let pf = tape.clamp(p, KL_FLOOR, f64::INFINITY)?;
    let lq = tape.log(qf)?;
    let lp = tape.log(pf)?;
    let diff = tape.sub(lq, lp)?;
    let terms = tape.mul(q, diff)?;
    let total = tape.sum(terms)?;
    tape.scale(total, 1.0 / rows as f64)
}

/// Similarity-view distillation: `½[KL(q^{t2v}‖p^{t2v}) + KL(q^{v2t}‖p^{v2t})]`,
/// teacher `q` from `ĥ^C`, student `p` from `ĉ^T`.
pub fn loss_sim(tape: &mut Tape, batch: &BatchEmbeddings, w: &LossWeights) -> Result<Var> {
    batch.validate(tape)?;
    let teacher = batch
        .teacher
        .ok_or_else(|| Error::Invalid("similarity distillation needs teacher embeddings".into()))?;
    let tau = w.temperature;
    let q_t2v = similarity_distribution(tape, teacher, batch.video, tau)?;
    let p_t2v = similarity_distribution(tape, batch.target, batch.video, tau)?;
    let q_v2t = similarity_distribution(tape, batch.video, teacher, tau)?;
    let p_v2t = similarity_distribution(tape, batch.video, batch.target, tau)?;
    let a = kl_divergence_rows(tape, q_t2v, p_t2v)?;
    let b = kl_divergence_rows(tape, q_v2t, p_v2t)?;
    let s = tape.add(a, b)?;
    tape.scale(s, 0.5)
}

/// Feature-view distillation: batch mean of `‖ĥ^C − ĉ^T‖₁`.
pub fn loss_feat(tape: &mut Tape, batch: &BatchEmbeddings) -> Result<Var> {
    let b = batch.validate(tape)?;
    let teacher = batch
        .teacher
        .ok_or_else(|| Error::Invalid("feature distillation needs teacher embeddings".into()))?;
    let diff = tape.sub(teacher, batch.target)?;
    let a = tape.abs(diff)?;
    let s = tape.sum(a)?;
    tape.scale(s, 1.0 / b as f64)
}

/// Cycle consistency: hardest-negative triplet between back-translated
/// (`ĉ^B`, anchors) and original source captions (`ĉ^S`).
pub fn loss_cyc(tape: &mut Tape, batch: &BatchEmbeddings, w: &LossWeights) -> Result<Var> {
    batch.validate(tape)?;
    let back = batch
        .back
        .ok_or_else(|| Error::Invalid("cycle consistency needs back-translated embeddings".into()))?;
    hardest_negative_triplet(tape, back, batch.source, w.cycle_margin)
}

/// `(1/B) Σ [ln F(f(m^S)) + ln(1 − F(f(m^T)))]` with `F` clamped to `[1e-7, 1 − 1e-7]`.
///
/// Under [`AdversarialRouting::Reversal`] the pooled features pass through a
/// gradient-reversal node, so whatever descends `−λ·L_adv` for the
/// discriminator ascends it for the encoders.
pub fn loss_adv(
    tape: &mut Tape,
    batch: &BatchEmbeddings,
    disc: &DiscriminatorParams,
    params: &Bound,
    routing: AdversarialRouting,
) -> Result<Var> {
    batch.validate(tape)?;
    let (Some(src), Some(tgt)) = (batch.pooled_source, batch.pooled_target) else {
        return Err(Error::Invalid("adversarial term needs pooled token features".into()));
    };
    let route = |tape: &mut Tape, x: Var| match routing {
        AdversarialRouting::Reversal => tape.grad_reverse(x, 1.0),
        AdversarialRouting::Direct => Ok(x),
    };
    let src = route(tape, src)?;
    let tgt = route(tape, tgt)?;
    let fs = disc.forward(tape, params, src)?;
    let ft = disc.forward(tape, params, tgt)?;
    let fs = tape.clamp(fs, PROB_CLAMP, 1.0 - PROB_CLAMP)?;
    let ft = tape.clamp(ft, PROB_CLAMP, 1.0 - PROB_CLAMP)?;
    let ls = tape.log(fs)?;
    let not_t = tape.scale(ft, -1.0)?;
    let not_t = tape.add_scalar(not_t, 1.0)?;
    let lt = tape.log(not_t)?;
    let a = tape.mean(ls)?;
    let b = tape.mean(lt)?;
    tape.add(a, b)
}

/// Component values of one evaluation of the objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub tri: f64,
    pub sim: f64,
    pub feat: f64,
    pub cyc: f64,
    pub adv: f64,
}

impl LossComponents {
    /// `tri + λ1·sim + λ2·feat + λ3·cyc − λ4·adv`.
    pub fn combine(&self, w: &LossWeights) -> f64 {
        self.tri + w.lambda_sim * self.sim + w.lambda_feat * self.feat + w.lambda_cyc * self.cyc
            - w.lambda_adv * self.adv
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TotalLoss {
    pub total: Var,
    pub components: LossComponents,
}

/// `L = L_tri + λ1 L_sim + λ2 L_feat + λ3 L_cyc − λ4 L_adv`.
///
/// Terms with zero weight are not constructed, so a zero-λ objective is the
/// triplet-only graph exactly.
pub fn total_loss(
    tape: &mut Tape,
    batch: &BatchEmbeddings,
    w: &LossWeights,
    disc: &DiscriminatorParams,
    params: &Bound,
    routing: AdversarialRouting,
) -> Result<TotalLoss> {
    w.validate()?;
    batch.validate(tape)?;
    let mut components = LossComponents::default();
    let mut total = loss_tri(tape, batch, w)?;
    components.tri = tape.value(total).item();

    let mut add_term = |tape: &mut Tape, term: Var, weight: f64| -> Result<f64> {
        let v = tape.value(term).item();
        let scaled = tape.scale(term, weight)?;
        total = tape.add(total, scaled)?;
        Ok(v)
    };
    if w.lambda_sim > 0.0 {
        let t = loss_sim(tape, batch, w)?;
        components.sim = add_term(tape, t, w.lambda_sim)?;
    }
    if w.lambda_feat > 0.0 {
        let t = loss_feat(tape, batch)?;
        components.feat = add_term(tape, t, w.lambda_feat)?;
    }
    if w.lambda_cyc > 0.0 {
        let t = loss_cyc(tape, batch, w)?;
        components.cyc = add_term(tape, t, w.lambda_cyc)?;
    }
    if w.lambda_adv > 0.0 {
        let t = loss_adv(tape, batch, disc, params, routing)?;
        components.adv = add_term(tape, t, -w.lambda_adv)?;
    }
    Ok(TotalLoss { total, components })
}
