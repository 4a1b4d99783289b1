use rand::Rng;

use crate::diffmath::{Segment, Tape, Tensor, Var};
use crate::error::Result;
use crate::params::{uniform, Bound, ParamId, ParamSet};

pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub(crate) fn init(
        params: &mut ParamSet,
        rng: &mut impl Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Result<Self> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Ok(Linear {
            weight: params.insert(format!("{name}.weight"), uniform(rng, fan_in, fan_out, bound))?,
            bias: params.insert(format!("{name}.bias"), Tensor::zeros(vec![fan_out]))?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p.var(self.weight))?;
        tape.add_row(y, p.var(self.bias))
    }
}

/// Two affine layers with a relu between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub first: Linear,
    pub second: Linear,
}

impl Mlp {
    pub(crate) fn init(
        params: &mut ParamSet,
        rng: &mut impl Rng,
        name: &str,
        dims: [usize; 3],
    ) -> Result<Self> {
        Ok(Mlp {
            first: Linear::init(params, rng, &format!("{name}.0"), dims[0], dims[1])?,
            second: Linear::init(params, rng, &format!("{name}.1"), dims[1], dims[2])?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = self.first.forward(tape, p, x)?;
        let h = tape.relu(h)?;
        self.second.forward(tape, p, h)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub(crate) fn init(params: &mut ParamSet, name: &str, width: usize) -> Result<Self> {
        Ok(LayerNorm {
            gain: params.insert(format!("{name}.gain"), Tensor::raw(vec![width], vec![1.0; width]))?,
            bias: params.insert(format!("{name}.bias"), Tensor::zeros(vec![width]))?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm_rows(x, p.var(self.gain), p.var(self.bias), LAYER_NORM_EPS)
    }
}

#[derive(Clone, Debug)]
pub struct AttentionHead {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    pub output: ParamId,
}

/// Post-norm transformer block: `x₁ = Norm₁(x + MHA(x))`, `y = Norm₂(x₁ + FFN(x₁))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub heads: Vec<AttentionHead>,
    pub attn_bias: ParamId,
    pub attn_norm: LayerNorm,
    pub ffn: Mlp,
    pub ffn_norm: LayerNorm,
    head_dim: usize,
}

impl TransformerBlock {
    pub(crate) fn init(
        params: &mut ParamSet,
        rng: &mut impl Rng,
        name: &str,
        width: usize,
        heads: usize,
        ffn_width: usize,
    ) -> Result<Self> {
        let head_dim = width / heads;
        let in_bound = 1.0 / (width as f64).sqrt();
        let out_bound = 1.0 / (head_dim as f64).sqrt();
        let mut hs = Vec::with_capacity(heads);
        for h in 0..heads {
            hs.push(AttentionHead {
                query: params.insert(format!("{name}.attn.{h}.query"), uniform(rng, width, head_dim, in_bound))?,
                key: params.insert(format!("{name}.attn.{h}.key"), uniform(rng, width, head_dim, in_bound))?,
                value: params.insert(format!("{name}.attn.{h}.value"), uniform(rng, width, head_dim, in_bound))?,
                output: params.insert(format!("{name}.attn.{h}.output"), uniform(rng, head_dim, width, out_bound))?,
            });
        }
        Ok(TransformerBlock {
            heads: hs,
            attn_bias: params.insert(format!("{name}.attn.bias"), Tensor::zeros(vec![width]))?,
            attn_norm: LayerNorm::init(params, &format!("{name}.attn_norm"), width)?,
            ffn: Mlp::init(params, rng, &format!("{name}.ffn"), [width, ffn_width, width])?,
            ffn_norm: LayerNorm::init(params, &format!("{name}.ffn_norm"), width)?,
            head_dim,
        })
    }

    pub fn self_attention(&self, tape: &mut Tape, p: &Bound, x: Var, segs: &[Segment]) -> Result<Var> {
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut acc: Option<Var> = None;
        for head in &self.heads {
            let q = tape.matmul(x, p.var(head.query))?;
            let k = tape.matmul(x, p.var(head.key))?;
            let v = tape.matmul(x, p.var(head.value))?;
            let a = tape.segment_attention(q, k, v, segs, segs, scale)?;
            let o = tape.matmul(a, p.var(head.output))?;
            acc = Some(match acc {
                Some(prev) => tape.add(prev, o)?,
                None => o,
            });
        }
        let merged = acc.expect("at least one head");
        tape.add_row(merged, p.var(self.attn_bias))
    }

    /// `Norm₂(FFN(x))` without the residual; the cross-attention teacher reuses it.
    pub fn ffn_then_norm(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let f = self.ffn.forward(tape, p, x)?;
        self.ffn_norm.forward(tape, p, f)
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, segs: &[Segment]) -> Result<Var> {
        let attn = self.self_attention(tape, p, x, segs)?;
        let r = tape.add(x, attn)?;
        let x1 = self.attn_norm.forward(tape, p, r)?;
        let f = self.ffn.forward(tape, p, x1)?;
        let r2 = tape.add(x1, f)?;
        self.ffn_norm.forward(tape, p, r2)
    }
}

/// Amplitude of the frame position encodings, on the scale of the learned
/// embeddings; at 1 they swamp frame features of RMS ~0.1.
pub const POSITION_AMPLITUDE: f64 = 0.1;

/// Fixed sinusoidal encodings scaled by [`POSITION_AMPLITUDE`], `rows × width`.
pub fn sinusoidal_positions(rows: usize, width: usize) -> Tensor {
    let mut data = Vec::with_capacity(rows * width);
    for pos in 0..rows {
        for i in 0..width {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / width as f64);
            data.push(POSITION_AMPLITUDE * if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::raw(vec![rows, width], data)
}
