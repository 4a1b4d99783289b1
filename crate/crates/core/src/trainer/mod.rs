//! Minibatch optimization of the full objective, model selection on
//! validation SumR, and checkpoints.

mod audit;
mod checkpoint;

use serde::{Deserialize, Serialize};

use crate::corpus::{make_batches, Dataset, Split};
use crate::diffmath::{Segment, Tape, Var};
use crate::encoders::{ModelDims, ModelParams, TokenSequence};
use crate::error::{Error, Result};
use crate::objectives::{loss_adv, total_loss, AdversarialRouting, BatchEmbeddings, LossComponents, LossWeights};
use crate::params::{Bound, ParamId, ParamSet};
use crate::retrieval::{evaluate, EvalOptions, V2tFusion};

pub use audit::{audit_dims, audit_gradients, GradientAudit, AUDIT_LAMBDA_ADV};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_HEADER};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdvMode {
    /// One optimizer step per batch; the encoders see the reversed adversarial gradient.
    #[default]
    Reversal,
    /// A discriminator-only step, then a main step with the discriminator frozen.
    Alternating,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub detach_teacher: bool,
    pub freeze_embeddings: bool,
    pub adv_mode: AdvMode,
    pub word_dim: usize,
    pub common_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_positions: usize,
    /// Epochs without validation improvement before the learning rate halves.
    pub patience: usize,
    pub lr_floor: f64,
    pub early_stop_patience: usize,
    pub v2t_fusion: V2tFusion,
    /// Leading epochs trained on the triplet objective alone before the
    /// auxiliary terms switch on.
    pub warmup_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let dims = ModelDims::default();
        TrainConfig {
            lr: 1e-4,
            batch_size: 32,
            epochs: 30,
            seed: 0,
            weights: LossWeights::default(),
            detach_teacher: false,
            freeze_embeddings: false,
            adv_mode: AdvMode::Reversal,
            word_dim: dims.word_dim,
            common_dim: dims.common_dim,
            heads: dims.heads,
            ffn_dim: dims.ffn_dim,
            max_positions: dims.max_positions,
            patience: 2,
            lr_floor: 1e-6,
            early_stop_patience: 5,
            v2t_fusion: V2tFusion::Fused,
            warmup_epochs: 0,
        }
    }
}

impl TrainConfig {
    /// Triplet-only objective (all auxiliary weights zero).
    pub fn basic(mut self) -> Self {
        self.weights = self.weights.basic();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", "must be positive"));
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch_size", "must be at least 2"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::config("warmup_epochs", "must leave at least one epoch of the configured objective"));
        }
        if self.patience == 0 {
            return Err(Error::config("patience", "must be at least 1"));
        }
        if !(self.lr_floor > 0.0) {
            return Err(Error::config("lr_floor", "must be positive"));
        }
        self.weights.validate()
    }

    /// Applies one configuration key; `Ok(false)` if the key is not a training key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        use crate::config::{parse_bool, parse_value as p};
        let w = &mut self.weights;
        match key {
            "lr" => self.lr = p(key, value)?,
            "batch_size" => self.batch_size = p(key, value)?,
            "epochs" => self.epochs = p(key, value)?,
            "train_seed" => self.seed = p(key, value)?,
            "alpha" => w.alpha = p(key, value)?,
            "lambda_sim" => w.lambda_sim = p(key, value)?,
            "lambda_feat" => w.lambda_feat = p(key, value)?,
            "lambda_cyc" => w.lambda_cyc = p(key, value)?,
            "lambda_adv" => w.lambda_adv = p(key, value)?,
            "margin" => w.margin = p(key, value)?,
            "cycle_margin" => w.cycle_margin = p(key, value)?,
            "temperature" => w.temperature = p(key, value)?,
            "beta" => w.beta = p(key, value)?,
            "detach_teacher" => self.detach_teacher = parse_bool(key, value)?,
            "freeze_embeddings" => self.freeze_embeddings = parse_bool(key, value)?,
            "adv_mode" => {
                self.adv_mode = match value {
                    "reversal" => AdvMode::Reversal,
                    "alternating" => AdvMode::Alternating,
                    _ => return Err(Error::config(key, format!("expected reversal or alternating, found `{value}`"))),
                }
            }
            "word_dim" => self.word_dim = p(key, value)?,
            "common_dim" => self.common_dim = p(key, value)?,
            "heads" => self.heads = p(key, value)?,
            "ffn_dim" => self.ffn_dim = p(key, value)?,
            "max_positions" => self.max_positions = p(key, value)?,
            "patience" => self.patience = p(key, value)?,
            "lr_floor" => self.lr_floor = p(key, value)?,
            "early_stop_patience" => self.early_stop_patience = p(key, value)?,
            "warmup_epochs" => self.warmup_epochs = p(key, value)?,
            "v2t_fusion" => {
                self.v2t_fusion = match value {
                    "fused" => V2tFusion::Fused,
                    "target_only" => V2tFusion::TargetOnly,
                    _ => return Err(Error::config(key, format!("expected fused or target_only, found `{value}`"))),
                }
            }
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Every key with its current value; `set` on each pair reproduces `self`.
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        let w = &self.weights;
        vec![
            ("lr", self.lr.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("train_seed", self.seed.to_string()),
            ("alpha", w.alpha.to_string()),
            ("lambda_sim", w.lambda_sim.to_string()),
            ("lambda_feat", w.lambda_feat.to_string()),
            ("lambda_cyc", w.lambda_cyc.to_string()),
            ("lambda_adv", w.lambda_adv.to_string()),
            ("margin", w.margin.to_string()),
            ("cycle_margin", w.cycle_margin.to_string()),
            ("temperature", w.temperature.to_string()),
            ("beta", w.beta.to_string()),
            ("detach_teacher", self.detach_teacher.to_string()),
            ("freeze_embeddings", self.freeze_embeddings.to_string()),
            (
                "adv_mode",
                match self.adv_mode {
                    AdvMode::Reversal => "reversal",
                    AdvMode::Alternating => "alternating",
                }
                .to_string(),
            ),
            ("word_dim", self.word_dim.to_string()),
            ("common_dim", self.common_dim.to_string()),
            ("heads", self.heads.to_string()),
            ("ffn_dim", self.ffn_dim.to_string()),
            ("max_positions", self.max_positions.to_string()),
            ("patience", self.patience.to_string()),
            ("lr_floor", self.lr_floor.to_string()),
            ("early_stop_patience", self.early_stop_patience.to_string()),
            ("warmup_epochs", self.warmup_epochs.to_string()),
            (
                "v2t_fusion",
                match self.v2t_fusion {
                    V2tFusion::Fused => "fused",
                    V2tFusion::TargetOnly => "target_only",
                }
                .to_string(),
            ),
        ]
    }

    /// The configuration in force during `epoch` (1-based).
    pub fn for_epoch(&self, epoch: usize) -> std::borrow::Cow<'_, TrainConfig> {
        if epoch <= self.warmup_epochs {
            std::borrow::Cow::Owned(self.clone().basic())
        } else {
            std::borrow::Cow::Borrowed(self)
        }
    }

    /// Model dimensions for a corpus: frame width and vocabularies come from the data.
    pub fn dims_for(&self, data: &Dataset) -> ModelDims {
        let max_frames = [&data.train, &data.val, &data.test]
            .iter()
            .flat_map(|s| s.videos.iter())
            .map(|v| v.frames.len())
            .max()
            .unwrap_or(1);
        ModelDims {
            frame_dim: data.manifest.frame_dim,
            word_dim: self.word_dim,
            common_dim: self.common_dim,
            heads: self.heads,
            ffn_dim: self.ffn_dim,
            src_vocab: data.manifest.src_vocab,
            tgt_vocab: data.manifest.tgt_vocab,
            max_positions: self.max_positions,
            max_frames,
        }
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            beta: self.weights.beta,
            v2t_fusion: self.v2t_fusion,
            ..EvalOptions::default()
        }
    }
}

pub fn init_model(dims: ModelDims, seed: u64) -> Result<ModelParams> {
    ModelParams::init(dims, seed)
}

/// First and second moments plus a step count for every parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub steps: Vec<u64>,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        AdamState {
            m: params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect(),
            v: params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect(),
            steps: vec![0; params.len()],
        }
    }
}

/// One bias-corrected Adam update of every tensor that has a gradient.
pub fn adam_step(params: &mut ParamSet, grads: &[Option<Vec<f64>>], state: &mut AdamState, lr: f64) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Shape(format!(
            "{} gradients and {} moment tables for {} parameters",
            grads.len(),
            state.m.len(),
            params.len()
        )));
    }
    for (i, g) in grads.iter().enumerate() {
        let Some(g) = g else { continue };
        let id = ParamId(i);
        let p = params.get_mut(id);
        if g.len() != p.numel() {
            return Err(Error::Shape(format!("gradient of {} values for {} parameters", g.len(), p.numel())));
        }
        state.steps[i] += 1;
        let t = state.steps[i] as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (((x, &g), m), v) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            *x -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPSILON);
        }
    }
    Ok(())
}

/// What the minibatch forward builds beyond the triplet terms.
#[derive(Clone, Copy, Debug)]
pub struct ForwardPlan {
    pub back: bool,
    pub teacher: bool,
    pub detach_teacher: bool,
    pub pooled: bool,
}

impl ForwardPlan {
    pub fn for_weights(w: &LossWeights, detach_teacher: bool) -> Self {
        ForwardPlan {
            back: w.needs_back_translation(),
            teacher: w.needs_teacher(),
            detach_teacher,
            pooled: w.needs_discriminator(),
        }
    }
}

/// Encodes the instances `ids` of `split` into the embeddings the objective needs.
///
/// All captions go through one batched text-encoder pass; the teacher's
/// cross-attention and the pooled discriminator inputs reuse its token rows.
pub fn batch_embeddings(
    model: &ModelParams,
    tape: &mut Tape,
    p: &Bound,
    split: &Split,
    ids: &[usize],
    plan: ForwardPlan,
) -> Result<BatchEmbeddings> {
    forward_with_frames(model, tape, p, split, ids, plan, None)
}

/// As [`batch_embeddings`]; `frames` optionally replaces the stacked,
/// position-encoded frame matrix (so it can be a learnable input).
pub(crate) fn forward_with_frames(
    model: &ModelParams,
    tape: &mut Tape,
    p: &Bound,
    split: &Split,
    ids: &[usize],
    plan: ForwardPlan,
    frames: Option<Var>,
) -> Result<BatchEmbeddings> {
    let b = ids.len();
    let insts: Vec<_> = ids.iter().map(|&i| &split.instances[i]).collect();
    let videos: Vec<_> = insts.iter().map(|inst| &split.videos[inst.video].frames).collect();
    let mut fb = model.model.visual.stack_frames(tape, &videos)?;
    if let Some(f) = frames {
        if tape.value(f).shape() != tape.value(fb.frames).shape() {
            return Err(Error::Shape("frame override does not match the batch".into()));
        }
        fb.frames = f;
    }
    let video = model.model.visual.encode(tape, p, &fb)?;

    let mut seqs: Vec<&TokenSequence> = insts.iter().map(|i| &i.source).collect();
    seqs.extend(insts.iter().map(|i| &i.target));
    if plan.back {
        for inst in &insts {
            seqs.push(inst.back.as_ref().ok_or_else(|| Error::Invalid(format!(
                "caption `{}` has no back-translation",
                inst.caption_id
            )))?);
        }
    }
    let text = &model.model.text;
    let all = text.embed_batch(tape, p, &seqs)?;
    let encoded = text.encode(tape, p, &all)?;
    let source = tape.slice_rows(encoded, 0, b)?;
    let target = tape.slice_rows(encoded, b, b)?;
    let back = if plan.back { Some(tape.slice_rows(encoded, 2 * b, b)?) } else { None };

    let src_segs = &all.segments[..b];
    let tgt_segs = &all.segments[b..2 * b];
    let teacher = if plan.teacher {
        let ns: usize = src_segs.iter().map(|s| s.len).sum();
        let nt: usize = tgt_segs.iter().map(|s| s.len).sum();
        let src = crate::encoders::TokenBatch {
            reps: tape.slice_rows(all.reps, 0, ns)?,
            segments: Segment::pack(src_segs.iter().map(|s| s.len)),
        };
        let tgt = crate::encoders::TokenBatch {
            reps: tape.slice_rows(all.reps, ns, nt)?,
            segments: Segment::pack(tgt_segs.iter().map(|s| s.len)),
        };
        let h = text.cross_attend(tape, p, &src, &tgt)?;
        let t = text.pool_project_teacher(tape, p, h, &src.segments)?;
        Some(if plan.detach_teacher { tape.detach(t) } else { t })
    } else {
        None
    };
    let (pooled_source, pooled_target) = if plan.pooled {
        (Some(tape.segment_mean(all.reps, src_segs)?), Some(tape.segment_mean(all.reps, tgt_segs)?))
    } else {
        (None, None)
    };
    Ok(BatchEmbeddings { video, source, target, back, teacher, pooled_source, pooled_target })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_tri: f64,
    pub loss_sim: f64,
    pub loss_feat: f64,
    pub loss_cyc: f64,
    pub loss_adv: f64,
    pub val_sumr: f64,
}

impl EpochLog {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("plain data")
    }
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: ModelParams,
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: usize,
    pub lr: f64,
    pub best_val_sumr: f64,
    pub best_params: ParamSet,
    pub best_epoch: usize,
    pub since_improvement: usize,
    pub stopped: bool,
}

impl TrainState {
    pub fn fresh(config: &TrainConfig, data: &Dataset) -> Result<Self> {
        config.validate()?;
        let model = init_model(config.dims_for(data), config.seed)?;
        Ok(TrainState {
            adam: AdamState::new(&model.params),
            best_params: model.params.clone(),
            model,
            epoch: 0,
            lr: config.lr,
            best_val_sumr: f64::NEG_INFINITY,
            best_epoch: 0,
            since_improvement: 0,
            stopped: false,
        })
    }

    pub fn best_model(&self) -> ModelParams {
        ModelParams { model: self.model.model.clone(), params: self.best_params.clone() }
    }
}

fn collect_grads(tape: &Tape, bound: &Bound, learnable: &[bool]) -> Vec<Option<Vec<f64>>> {
    bound
        .vars()
        .iter()
        .zip(learnable)
        .map(|(&v, &on)| if on { tape.grad(v).map(<[f64]>::to_vec) } else { None })
        .collect()
}

fn diverged(e: Error, epoch: usize, batch: usize) -> Error {
    if e.is_numeric() {
        Error::DivergedLoss { epoch, batch }
    } else {
        e
    }
}

/// One optimizer update on one minibatch; returns the loss components and total.
pub fn train_step(
    state: &mut TrainState,
    config: &TrainConfig,
    split: &Split,
    ids: &[usize],
    tape: &mut Tape,
) -> Result<(LossComponents, f64)> {
    let w = &config.weights;
    let model = &state.model;
    let n = model.params.len();
    let mut learnable = vec![true; n];
    if config.freeze_embeddings {
        for id in model.embedding_ids() {
            learnable[id.index()] = false;
        }
    }
    let disc: Vec<ParamId> = model.discriminator_ids();
    let alternating = config.adv_mode == AdvMode::Alternating && w.needs_discriminator();

    if alternating {
        // discriminator-only step on −λ4·L_adv
        tape.reset();
        let mut mask = vec![false; n];
        for id in &disc {
            mask[id.index()] = true;
        }
        let bound = model.params.bind(tape, |id| mask[id.index()]);
        let plan = ForwardPlan { back: false, teacher: false, detach_teacher: false, pooled: true };
        let batch = batch_embeddings(model, tape, &bound, split, ids, plan)?;
        let adv = loss_adv(tape, &batch, &model.model.disc, &bound, AdversarialRouting::Direct)?;
        let loss = tape.scale(adv, -w.lambda_adv)?;
        tape.backward(loss)?;
        let grads = collect_grads(tape, &bound, &mask);
        adam_step(&mut state.model.params, &grads, &mut state.adam, state.lr)?;
        for id in &disc {
            learnable[id.index()] = false;
        }
    }

    let model = &state.model;
    tape.reset();
    let bound = model.params.bind(tape, |id| learnable[id.index()]);
    let plan = ForwardPlan::for_weights(w, config.detach_teacher);
    let batch = batch_embeddings(model, tape, &bound, split, ids, plan)?;
    let loss = total_loss(tape, &batch, w, &model.model.disc, &bound, AdversarialRouting::Reversal)?;
    let total = tape.value(loss.total).item();
    if !total.is_finite() {
        return Err(Error::NonFinite("loss"));
    }
    tape.backward(loss.total)?;
    let grads = collect_grads(tape, &bound, &learnable);
    adam_step(&mut state.model.params, &grads, &mut state.adam, state.lr)?;
    Ok((loss.components, total))
}

/// Runs one epoch over the training split and updates the schedule from
/// validation SumR.
pub fn train_epoch(state: &mut TrainState, config: &TrainConfig, data: &Dataset) -> Result<EpochLog> {
    let epoch = state.epoch + 1;
    let batches = make_batches(&data.train, config.batch_size, config.seed, epoch)?;
    if batches.is_empty() {
        return Err(Error::Invalid("training split yields no batch of at least 2 instances".into()));
    }
    let mut tape = Tape::new();
    let mut sums = LossComponents::default();
    let mut total = 0.0;
    let lr = state.lr;
    let step_config = config.for_epoch(epoch);
    for (bi, ids) in batches.iter().enumerate() {
        let (c, t) = train_step(state, &step_config, &data.train, ids, &mut tape).map_err(|e| diverged(e, epoch, bi + 1))?;
        sums.tri += c.tri;
        sums.sim += c.sim;
        sums.feat += c.feat;
        sums.cyc += c.cyc;
        sums.adv += c.adv;
        total += t;
    }
    let n = batches.len() as f64;
    let val = evaluate(&state.model, &data.val, &config.eval_options()).map_err(|e| diverged(e, epoch, 0))?;
    state.epoch = epoch;
    if epoch <= config.warmup_epochs {
        // the schedule and model selection start with the configured objective
    } else if val.sumr > state.best_val_sumr {
        state.best_val_sumr = val.sumr;
        state.best_params = state.model.params.clone();
        state.best_epoch = epoch;
        state.since_improvement = 0;
    } else {
        state.since_improvement += 1;
        if state.since_improvement % config.patience == 0 {
            state.lr = (state.lr / 2.0).max(config.lr_floor);
        }
        if state.since_improvement >= config.early_stop_patience {
            state.stopped = true;
        }
    }
    Ok(EpochLog {
        epoch,
        lr,
        loss_total: total / n,
        loss_tri: sums.tri / n,
        loss_sim: sums.sim / n,
        loss_feat: sums.feat / n,
        loss_cyc: sums.cyc / n,
        loss_adv: sums.adv / n,
        val_sumr: val.sumr,
    })
}

/// Trains until `config.epochs` or early stop; `on_epoch` sees every log line.
pub fn train_from(
    state: &mut TrainState,
    config: &TrainConfig,
    data: &Dataset,
    mut on_epoch: impl FnMut(&EpochLog, &TrainState) -> Result<()>,
) -> Result<Vec<EpochLog>> {
    config.validate()?;
    if data.train.instances.is_empty() || data.val.instances.is_empty() {
        return Err(Error::Invalid("corpus needs nonempty train and val splits".into()));
    }
    let mut logs = Vec::new();
    while state.epoch < config.epochs && !state.stopped {
        let log = train_epoch(state, config, data)?;
        on_epoch(&log, state)?;
        logs.push(log);
    }
    Ok(logs)
}

pub struct TrainOutcome {
    pub state: TrainState,
    pub log: Vec<EpochLog>,
}

impl TrainOutcome {
    pub fn best_model(&self) -> ModelParams {
        self.state.best_model()
    }
}

pub fn train(data: &Dataset, config: &TrainConfig) -> Result<TrainOutcome> {
    let mut state = TrainState::fresh(config, data)?;
    let log = train_from(&mut state, config, data, |_, _| Ok(()))?;
    Ok(TrainOutcome { state, log })
}

#[cfg(test)]
mod tests;
