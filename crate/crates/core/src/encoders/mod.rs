//! Visual encoder, weight-shared bilingual text encoder, cross-attention
//! teacher and the common-space projection heads.
//!
//! Both text branches are one function over one token table: source ids
//! occupy rows `0..src_vocab`, target ids rows `src_vocab..src_vocab+tgt_vocab`.

mod layers;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use layers::{sinusoidal_positions, POSITION_AMPLITUDE, AttentionHead, LayerNorm, Linear, Mlp, TransformerBlock};

use crate::diffmath::{softmax_into, Segment, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{uniform, Bound, ParamId, ParamSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Language {
    Source,
    Target,
}

impl Language {
    pub fn other(self) -> Language {
        match self {
            Language::Source => Language::Target,
            Language::Target => Language::Source,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    pub language: Language,
    pub ids: Vec<usize>,
}

impl TokenSequence {
    pub fn new(language: Language, ids: Vec<usize>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::Invalid("empty token sequence".into()));
        }
        Ok(TokenSequence { language, ids })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Precomputed per-frame features of one video (`frames × d_u`).
#[derive(Clone, Debug, PartialEq)]
pub struct FrameFeatureSequence {
    pub video_id: String,
    pub frames: Tensor,
}

impl FrameFeatureSequence {
    pub fn new(video_id: impl Into<String>, frames: Tensor) -> Result<Self> {
        if frames.as_matrix_dims().is_none() {
            return Err(Error::Shape(format!("frames must be a matrix, got {:?}", frames.shape())));
        }
        Ok(FrameFeatureSequence {
            video_id: video_id.into(),
            frames,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Frame feature width `d_u`.
    pub frame_dim: usize,
    /// Token representation width `d_w`.
    pub word_dim: usize,
    /// Common-space width `d`.
    pub common_dim: usize,
    pub heads: usize,
    /// Hidden width of the transformer feed-forward layers.
    pub ffn_dim: usize,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    /// Learned token positions; longer sequences are truncated.
    pub max_positions: usize,
    /// Length of the sinusoidal frame position table.
    pub max_frames: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            frame_dim: 32,
            word_dim: 32,
            common_dim: 32,
            heads: 2,
            ffn_dim: 64,
            src_vocab: 200,
            tgt_vocab: 200,
            max_positions: 32,
            max_frames: 32,
        }
    }
}

impl ModelDims {
    /// Projection-head hidden width `d_h = 2d`.
    pub fn head_hidden(&self) -> usize {
        2 * self.common_dim
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("frame_dim", self.frame_dim),
            ("word_dim", self.word_dim),
            ("common_dim", self.common_dim),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("src_vocab", self.src_vocab),
            ("tgt_vocab", self.tgt_vocab),
            ("max_positions", self.max_positions),
            ("max_frames", self.max_frames),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if self.word_dim % self.heads != 0 || self.frame_dim % self.heads != 0 {
            return Err(Error::config("heads", "must divide frame_dim and word_dim"));
        }
        if self.word_dim < 2 {
            return Err(Error::config("word_dim", "must be at least 2"));
        }
        Ok(())
    }

    /// Scalar parameter count implied by the architecture.
    pub fn parameter_count(&self) -> usize {
        let block = |w: usize| {
            let attn = 4 * w * w + w; // per-head q/k/v/out slices sum to w×w each, plus bias
            let norms = 2 * 2 * w;
            let ffn = w * self.ffn_dim + self.ffn_dim + self.ffn_dim * w + w;
            attn + norms + ffn
        };
        let head = |input: usize| {
            let h = self.head_hidden();
            input * h + h + h * self.common_dim + self.common_dim
        };
        let visual = block(self.frame_dim) + head(self.frame_dim);
        let text = (self.src_vocab + self.tgt_vocab) * self.word_dim
            + self.max_positions * self.word_dim
            + block(self.word_dim)
            + head(self.word_dim)
            + 3 * self.word_dim * self.word_dim;
        let half = self.word_dim / 2;
        let disc = self.word_dim * half + half + half + 1;
        visual + text + disc
    }
}

/// `Transformer_v` over frames plus the projection head `g_v`.
#[derive(Clone, Debug)]
pub struct VisualEncoderParams {
    pub block: TransformerBlock,
    pub head: Mlp,
    positions: Tensor,
}

/// Token table (mBERT stand-in), `Transformer_t`, `g_t`, and the
/// cross-attention projections `W_Q`, `W_K`, `W_V`.
#[derive(Clone, Debug)]
pub struct TextEncoderParams {
    pub tokens: ParamId,
    pub positions: ParamId,
    pub block: TransformerBlock,
    pub head: Mlp,
    pub cross_query: ParamId,
    pub cross_key: ParamId,
    pub cross_value: ParamId,
    src_vocab: usize,
    tgt_vocab: usize,
    max_positions: usize,
}

/// Language classifier `F`: `d_w → d_w/2 → 1`, sigmoid output.
#[derive(Clone, Debug)]
pub struct DiscriminatorParams {
    pub net: Mlp,
}

/// Parameter layout of the full model; values live in [`ModelParams::params`].
#[derive(Clone, Debug)]
pub struct Nrccr {
    pub dims: ModelDims,
    pub visual: VisualEncoderParams,
    pub text: TextEncoderParams,
    pub disc: DiscriminatorParams,
}

#[derive(Clone, Debug)]
pub struct ModelParams {
    pub model: Nrccr,
    pub params: ParamSet,
}

impl ModelParams {
    /// Seeded initialization: weights uniform in `±1/√fan_in`, token and
    /// position embeddings additionally scaled by 0.1, norms at identity,
    /// biases zero.
    pub fn init(dims: ModelDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let (du, dw, d, dh) = (dims.frame_dim, dims.word_dim, dims.common_dim, dims.head_hidden());

        let visual = VisualEncoderParams {
            block: TransformerBlock::init(&mut params, &mut rng, "visual.block", du, dims.heads, dims.ffn_dim)?,
            head: Mlp::init(&mut params, &mut rng, "visual.head", [du, dh, d])?,
            positions: sinusoidal_positions(dims.max_frames, du),
        };

        let emb_bound = 0.1 / (dw as f64).sqrt();
        let cross_bound = 1.0 / (dw as f64).sqrt();
        let text = TextEncoderParams {
            tokens: params.insert(
                "text.tokens",
                uniform(&mut rng, dims.src_vocab + dims.tgt_vocab, dw, emb_bound),
            )?,
            positions: params.insert("text.positions", uniform(&mut rng, dims.max_positions, dw, emb_bound))?,
            block: TransformerBlock::init(&mut params, &mut rng, "text.block", dw, dims.heads, dims.ffn_dim)?,
            head: Mlp::init(&mut params, &mut rng, "text.head", [dw, dh, d])?,
            cross_query: params.insert("text.cross.query", uniform(&mut rng, dw, dw, cross_bound))?,
            cross_key: params.insert("text.cross.key", uniform(&mut rng, dw, dw, cross_bound))?,
            cross_value: params.insert("text.cross.value", uniform(&mut rng, dw, dw, cross_bound))?,
            src_vocab: dims.src_vocab,
            tgt_vocab: dims.tgt_vocab,
            max_positions: dims.max_positions,
        };

        let disc = DiscriminatorParams {
            net: Mlp::init(&mut params, &mut rng, "disc", [dw, dw / 2, 1])?,
        };

        Ok(ModelParams {
            model: Nrccr {
                dims,
                visual,
                text,
                disc,
            },
            params,
        })
    }

    /// Ids of the token and position tables (the frozen part under `freeze_embeddings`).
    pub fn embedding_ids(&self) -> [ParamId; 2] {
        [self.model.text.tokens, self.model.text.positions]
    }

    /// Ids of the discriminator parameters.
    pub fn discriminator_ids(&self) -> Vec<ParamId> {
        self.params
            .ids()
            .filter(|&id| self.params.name(id).starts_with("disc."))
            .collect()
    }

    pub fn cross_attention_ids(&self) -> [ParamId; 3] {
        let t = &self.model.text;
        [t.cross_query, t.cross_key, t.cross_value]
    }

    /// Binds every parameter on `tape` as a constant (inference).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        self.params.bind(tape, |_| false)
    }
}

/// Row-stacked token representations of several sequences.
#[derive(Clone, Debug)]
pub struct TokenBatch {
    pub reps: Var,
    pub segments: Vec<Segment>,
}

impl TextEncoderParams {
    fn table_row(&self, language: Language, id: usize) -> Result<usize> {
        let (limit, offset) = match language {
            Language::Source => (self.src_vocab, 0),
            Language::Target => (self.tgt_vocab, self.src_vocab),
        };
        if id >= limit {
            return Err(Error::Domain(format!(
                "{language:?} token id {id} outside vocabulary of {limit}"
            )));
        }
        Ok(offset + id)
    }

    /// Token embedding plus learned position embedding per token; the
    /// `m^S`/`m^T` surrogate for several sequences at once.
    pub fn embed_batch(&self, tape: &mut Tape, p: &Bound, seqs: &[&TokenSequence]) -> Result<TokenBatch> {
        if seqs.is_empty() {
            return Err(Error::Shape("no sequences to embed".into()));
        }
        let mut rows = Vec::new();
        let mut positions = Vec::new();
        let mut lengths = Vec::with_capacity(seqs.len());
        for seq in seqs {
            if seq.ids.is_empty() {
                return Err(Error::Invalid("empty token sequence".into()));
            }
            let n = seq.len().min(self.max_positions);
            for (pos, &id) in seq.ids[..n].iter().enumerate() {
                rows.push(self.table_row(seq.language, id)?);
                positions.push(pos);
            }
            lengths.push(n);
        }
        let tok = tape.gather_rows(p.var(self.tokens), &rows)?;
        let pos = tape.gather_rows(p.var(self.positions), &positions)?;
        Ok(TokenBatch {
            reps: tape.add(tok, pos)?,
            segments: Segment::pack(lengths),
        })
    }

    pub fn embed_tokens(&self, tape: &mut Tape, p: &Bound, seq: &TokenSequence) -> Result<Var> {
        Ok(self.embed_batch(tape, p, &[seq])?.reps)
    }

    /// `g_t(mean_pool(Transformer_t(m)))` per segment; one row per sequence.
    pub fn encode(&self, tape: &mut Tape, p: &Bound, batch: &TokenBatch) -> Result<Var> {
        let h = self.block.forward(tape, p, batch.reps, &batch.segments)?;
        let pooled = tape.segment_mean(h, &batch.segments)?;
        self.head.forward(tape, p, pooled)
    }

    /// Common-space embedding `ĉ` of a single sequence's representations `m`.
    pub fn encode_text(&self, tape: &mut Tape, p: &Bound, m: Var) -> Result<Var> {
        let w = tape.value(m).cols();
        let expected = tape.value(p.var(self.cross_query)).rows();
        if tape.value(m).as_matrix_dims().is_none() || w != expected {
            return Err(Error::Shape(format!("token width {w}, expected {expected}")));
        }
        let rows = tape.value(m).rows();
        let batch = TokenBatch {
            reps: m,
            segments: vec![Segment::new(0, rows)],
        };
        self.encode(tape, p, &batch)
    }

    /// Cross-attention of source tokens (queries) over target tokens (keys,
    /// values), followed by `Transformer_t`'s FFN and output norm:
    /// `h^C = Norm(FFN(softmax(Q Kᵀ / √d_w) V))`.
    pub fn cross_attend(
        &self,
        tape: &mut Tape,
        p: &Bound,
        source: &TokenBatch,
        target: &TokenBatch,
    ) -> Result<Var> {
        let (ws, wt) = (tape.value(source.reps).cols(), tape.value(target.reps).cols());
        if ws != wt {
            return Err(Error::Shape(format!("cross-attention widths {ws} vs {wt}")));
        }
        let q = tape.matmul(source.reps, p.var(self.cross_query))?;
        let k = tape.matmul(target.reps, p.var(self.cross_key))?;
        let v = tape.matmul(target.reps, p.var(self.cross_value))?;
        let scale = 1.0 / (ws as f64).sqrt();
        let h = tape.segment_attention(q, k, v, &source.segments, &target.segments, scale)?;
        self.block.ffn_then_norm(tape, p, h)
    }

    /// Teacher embedding `ĥ^C = g_t(mean_pool(h^C))` per source segment.
    pub fn pool_project_teacher(&self, tape: &mut Tape, p: &Bound, h_cross: Var, segments: &[Segment]) -> Result<Var> {
        let pooled = tape.segment_mean(h_cross, segments)?;
        self.head.forward(tape, p, pooled)
    }

    /// Attention weights of the cross-attention for one sentence pair
    /// (rows: source tokens, columns: target tokens).
    pub fn cross_attention_weights(&self, params: &ParamSet, m_source: &Tensor, m_target: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let ms = tape.constant(m_source.detached());
        let mt = tape.constant(m_target.detached());
        let wq = tape.constant(params.get(self.cross_query).detached());
        let wk = tape.constant(params.get(self.cross_key).detached());
        let q = tape.matmul(ms, wq)?;
        let k = tape.matmul(mt, wk)?;
        let (n, w) = (m_source.rows(), m_source.cols());
        let m = m_target.rows();
        let (qv, kv) = (tape.value(q).data(), tape.value(k).data());
        let scale = 1.0 / (w as f64).sqrt();
        let mut weights = Vec::with_capacity(n * m);
        let mut scores = vec![0.0; m];
        for i in 0..n {
            for (j, s) in scores.iter_mut().enumerate() {
                *s = qv[i * w..(i + 1) * w]
                    .iter()
                    .zip(&kv[j * w..(j + 1) * w])
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    * scale;
            }
            softmax_into(&scores, 1.0, &mut weights);
        }
        Tensor::matrix(n, m, weights)
    }
}

/// Row-stacked frame features of several videos.
#[derive(Clone, Debug)]
pub struct FrameBatch {
    pub frames: Var,
    pub segments: Vec<Segment>,
}

impl VisualEncoderParams {
    /// Stacks videos' frames with sinusoidal positions added, as a constant.
    pub fn stack_frames(&self, tape: &mut Tape, videos: &[&FrameFeatureSequence]) -> Result<FrameBatch> {
        if videos.is_empty() {
            return Err(Error::Shape("no videos".into()));
        }
        let width = self.positions.cols();
        let mut data = Vec::new();
        let mut lengths = Vec::with_capacity(videos.len());
        for video in videos {
            let (l, du) = video
                .frames
                .as_matrix_dims()
                .ok_or_else(|| Error::Shape("frames must be a matrix".into()))?;
            if du != width {
                return Err(Error::Shape(format!(
                    "video {}: frame width {du}, expected {width}",
                    video.video_id
                )));
            }
            if l > self.positions.rows() {
                return Err(Error::Shape(format!(
                    "video {}: {l} frames exceed position table of {}",
                    video.video_id,
                    self.positions.rows()
                )));
            }
            for (r, row) in video.frames.data().chunks(du).enumerate() {
                data.extend(row.iter().zip(self.positions.row(r)).map(|(x, p)| x + p));
            }
            lengths.push(l);
        }
        let total = data.len() / width;
        let frames = tape.constant(Tensor::matrix(total, width, data)?);
        Ok(FrameBatch {
            frames,
            segments: Segment::pack(lengths),
        })
    }

    /// `g_v(mean_pool(Transformer_v(U + P)))` per video. `frames` must already
    /// carry positional encodings (see [`stack_frames`](Self::stack_frames)
    /// and [`add_positions`](Self::add_positions)).
    pub fn encode(&self, tape: &mut Tape, p: &Bound, batch: &FrameBatch) -> Result<Var> {
        let h = self.block.forward(tape, p, batch.frames, &batch.segments)?;
        let pooled = tape.segment_mean(h, &batch.segments)?;
        self.head.forward(tape, p, pooled)
    }

    /// Adds the positional table to a (possibly learnable) frame matrix of one video.
    pub fn add_positions(&self, tape: &mut Tape, frames: Var) -> Result<Var> {
        let (l, du) = tape
            .value(frames)
            .as_matrix_dims()
            .ok_or_else(|| Error::Shape("frames must be a matrix".into()))?;
        if du != self.positions.cols() {
            return Err(Error::Shape(format!("frame width {du}, expected {}", self.positions.cols())));
        }
        if l > self.positions.rows() {
            return Err(Error::Shape(format!("{l} frames exceed position table")));
        }
        let pe = tape.constant(Tensor::raw(vec![l, du], self.positions.data()[..l * du].to_vec()));
        tape.add(frames, pe)
    }

    /// Common-space embedding `v̂` of a single video whose frames are `u`.
    pub fn encode_video(&self, tape: &mut Tape, p: &Bound, u: Var) -> Result<Var> {
        let with_pos = self.add_positions(tape, u)?;
        let rows = tape.value(with_pos).rows();
        self.encode(
            tape,
            p,
            &FrameBatch {
                frames: with_pos,
                segments: vec![Segment::new(0, rows)],
            },
        )
    }
}

impl DiscriminatorParams {
    /// Language probability `F(x)` (source = 1) per row of `x`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let logits = self.net.forward(tape, p, x)?;
        tape.sigmoid(logits)
    }
}

#[cfg(test)]
mod tests;
