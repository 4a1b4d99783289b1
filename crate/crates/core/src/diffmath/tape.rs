use super::tensor::{gemm, gemm_nt_acc, gemm_tn_acc, Tensor};
use crate::error::{Error, Result};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Contiguous block of rows `[start, start + len)` belonging to one sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

impl Segment {
    pub fn new(start: usize, len: usize) -> Self {
        Segment { start, len }
    }

    /// Back-to-back segments for the given lengths.
    pub fn pack(lengths: impl IntoIterator<Item = usize>) -> Vec<Segment> {
        let mut start = 0;
        lengths
            .into_iter()
            .map(|len| {
                let s = Segment { start, len };
                start += len;
                s
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Scale(f64),
    Relu,
    Sigmoid,
    Log,
    Abs,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    Abs(Var),
    Clamp(Var, f64, f64),
    MatMul(Var, Var),
    AddRow(Var, Var),
    SoftmaxRows(Var, f64),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normed: Vec<f64>,
        inv_std: Vec<f64>,
    },
    MeanPoolRows(Var),
    SegmentMean(Var, Vec<Segment>),
    SegmentAttention {
        q: Var,
        k: Var,
        v: Var,
        q_segs: Vec<Segment>,
        kv_segs: Vec<Segment>,
        scale: f64,
        weights: Vec<f64>,
    },
    Cosine {
        x: Var,
        y: Var,
        x_norm: Vec<f64>,
        y_norm: Vec<f64>,
    },
    GatherRows(Var, Vec<usize>),
    StackRows(Vec<Var>),
    SliceRows(Var, usize),
    Pick(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    GradReverse(Var, f64),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub(crate) const NORM_FLOOR: f64 = 1e-12;

/// Reverse-mode recording of tensor operations.
///
/// Nodes are appended in execution order so every operand precedes its
/// result. A tape supports exactly one [`backward`](Tape::backward) pass;
/// call [`reset`](Tape::reset) to reuse the allocation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn reset(&mut self) {
        self.nodes.clear();
        self.consumed = false;
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient accumulated on a learnable leaf by the last backward pass.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an input tensor. Learnable leaves receive gradients.
    pub fn leaf(&mut self, value: Tensor, learnable: bool) -> Var {
        let mut value = value;
        value.clear_grad();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: learnable,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).detached();
        self.constant(t)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn binary_operands(&self, name: &str, a: Var, b: Var) -> Result<()> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() || tb.numel() == 1 {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{name}: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )))
        }
    }

    fn map_binary(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = if tb.numel() == 1 && ta.numel() != 1 {
            let s = tb.item();
            ta.data().iter().map(|&x| f(x, s)).collect()
        } else {
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect()
        };
        Tensor::raw(ta.shape().to_vec(), data)
    }

    fn map_unary(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let ta = self.value(a);
        Tensor::raw(ta.shape().to_vec(), ta.data().iter().map(|&x| f(x)).collect())
    }

    /// Elementwise arithmetic or activation. `b` is required for the binary
    /// kinds and may be a single-element tensor.
    pub fn elementwise(&mut self, kind: Elementwise, a: Var, b: Option<Var>) -> Result<Var> {
        let need_b = || b.ok_or_else(|| Error::Domain(format!("{kind:?} needs two operands")));
        match kind {
            Elementwise::Add => self.add(a, need_b()?),
            Elementwise::Sub => self.sub(a, need_b()?),
            Elementwise::Mul => self.mul(a, need_b()?),
            Elementwise::Scale(c) => self.scale(a, c),
            Elementwise::Relu => self.relu(a),
            Elementwise::Sigmoid => self.sigmoid(a),
            Elementwise::Log => self.log(a),
            Elementwise::Abs => self.abs(a),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_operands("add", a, b)?;
        let t = self.map_binary(a, b, |x, y| x + y);
        self.push("add", t, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_operands("sub", a, b)?;
        let t = self.map_binary(a, b, |x, y| x - y);
        self.push("sub", t, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_operands("mul", a, b)?;
        let t = self.map_binary(a, b, |x, y| x * y);
        self.push("mul", t, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.map_unary(a, |x| x * c);
        self.push("scale", t, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.map_unary(a, |x| x + c);
        self.push("add_scalar", t, Op::AddScalar(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let t = self.map_unary(a, |x| x.max(0.0));
        self.push("relu", t, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let t = self.map_unary(a, sigmoid);
        self.push("sigmoid", t, Op::Sigmoid(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&x| x <= 0.0) {
            return Err(Error::Domain(format!("log of non-positive value {bad}")));
        }
        let t = self.map_unary(a, f64::ln);
        self.push("log", t, Op::Log(a), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let t = self.map_unary(a, f64::abs);
        self.push("abs", t, Op::Abs(a), &[a])
    }

    /// Clamp into `[lo, hi]`; gradient passes only where the input is strictly inside.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(Error::Domain(format!("clamp bounds {lo} > {hi}")));
        }
        let t = self.map_unary(a, |x| x.clamp(lo, hi));
        self.push("clamp", t, Op::Clamp(a, lo, hi), &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ((n, k), (k2, m)) = match (ta.as_matrix_dims(), tb.as_matrix_dims()) {
            (Some(x), Some(y)) => (x, y),
            _ => {
                return Err(Error::Shape(format!(
                    "matmul needs matrices, got {:?} and {:?}",
                    ta.shape(),
                    tb.shape()
                )))
            }
        };
        if k != k2 {
            return Err(Error::Shape(format!("matmul inner dims {k} vs {k2}")));
        }
        let out = gemm(ta.data(), tb.data(), n, k, m);
        self.push("matmul", Tensor::raw(vec![n, m], out), Op::MatMul(a, b), &[a, b])
    }

    /// Adds the vector `bias` to every row of matrix `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        let cols = ta.cols();
        if tb.numel() != cols || ta.shape().len() != 2 {
            return Err(Error::Shape(format!(
                "add_row: {:?} + {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let bd = tb.data();
        let data = ta
            .data()
            .chunks(cols)
            .flat_map(|row| row.iter().zip(bd).map(|(x, y)| x + y))
            .collect();
        let t = Tensor::raw(ta.shape().to_vec(), data);
        self.push("add_row", t, Op::AddRow(a, bias), &[a, bias])
    }

    /// Row-wise softmax of `a / temperature`, stabilized by the row max.
    pub fn softmax_rows(&mut self, a: Var, temperature: f64) -> Result<Var> {
        if !(temperature > 0.0) {
            return Err(Error::Domain(format!("temperature {temperature} must be positive")));
        }
        let ta = self.value(a);
        let cols = ta.cols();
        let mut data = Vec::with_capacity(ta.numel());
        for row in ta.data().chunks(cols) {
            softmax_into(row, temperature, &mut data);
        }
        let t = Tensor::raw(ta.shape().to_vec(), data);
        self.push("softmax_rows", t, Op::SoftmaxRows(a, temperature), &[a])
    }

    /// Per-row `(x − mean) / sqrt(var + epsilon)` (population variance), then `gain ⊙ · + bias`.
    pub fn layer_norm_rows(&mut self, a: Var, gain: Var, bias: Var, epsilon: f64) -> Result<Var> {
        if !(epsilon > 0.0) {
            return Err(Error::Domain(format!("epsilon {epsilon} must be positive")));
        }
        let (ta, tg, tb) = (self.value(a), self.value(gain), self.value(bias));
        let d = ta.cols();
        if tg.numel() != d || tb.numel() != d {
            return Err(Error::Shape(format!(
                "layer_norm: width {d}, gain {:?}, bias {:?}",
                tg.shape(),
                tb.shape()
            )));
        }
        let rows = ta.numel() / d;
        let mut normed = Vec::with_capacity(ta.numel());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(ta.numel());
        for row in ta.data().chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + epsilon).sqrt();
            inv_std.push(inv);
            for (j, &x) in row.iter().enumerate() {
                let n = (x - mean) * inv;
                normed.push(n);
                out.push(n * tg.data()[j] + tb.data()[j]);
            }
        }
        let t = Tensor::raw(ta.shape().to_vec(), out);
        self.push(
            "layer_norm_rows",
            t,
            Op::LayerNorm {
                x: a,
                gain,
                bias,
                normed,
                inv_std,
            },
            &[a, gain, bias],
        )
    }

    /// Arithmetic mean over the rows of a matrix; returns a vector.
    pub fn mean_pool_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (n, d) = ta
            .as_matrix_dims()
            .ok_or_else(|| Error::Shape(format!("mean_pool_rows needs a matrix, got {:?}", ta.shape())))?;
        let mut out = vec![0.0; d];
        for row in ta.data().chunks(d) {
            for (o, x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        out.iter_mut().for_each(|o| *o /= n as f64);
        self.push("mean_pool_rows", Tensor::raw(vec![d], out), Op::MeanPoolRows(a), &[a])
    }

    /// Mean of each segment's rows; output has one row per segment.
    pub fn segment_mean(&mut self, a: Var, segments: &[Segment]) -> Result<Var> {
        let ta = self.value(a);
        let (n, d) = ta
            .as_matrix_dims()
            .ok_or_else(|| Error::Shape("segment_mean needs a matrix".into()))?;
        check_segments(segments, n)?;
        let mut out = vec![0.0; segments.len() * d];
        for (s, seg) in segments.iter().enumerate() {
            let orow = &mut out[s * d..(s + 1) * d];
            for r in seg.start..seg.start + seg.len {
                for (o, x) in orow.iter_mut().zip(ta.row(r)) {
                    *o += x;
                }
            }
            orow.iter_mut().for_each(|o| *o /= seg.len as f64);
        }
        let t = Tensor::raw(vec![segments.len(), d], out);
        self.push("segment_mean", t, Op::SegmentMean(a, segments.to_vec()), &[a])
    }

    /// Scaled dot-product attention applied independently per segment pair:
    /// rows of query segment `i` attend over rows of key/value segment `i`.
    pub fn segment_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        q_segs: &[Segment],
        kv_segs: &[Segment],
        scale: f64,
    ) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (nq, dk) = tq.as_matrix_dims().ok_or_else(|| Error::Shape("attention query".into()))?;
        let (nk, dk2) = tk.as_matrix_dims().ok_or_else(|| Error::Shape("attention key".into()))?;
        let (nv, dv) = tv.as_matrix_dims().ok_or_else(|| Error::Shape("attention value".into()))?;
        if dk != dk2 || nk != nv {
            return Err(Error::Shape(format!(
                "attention q {:?} k {:?} v {:?}",
                tq.shape(),
                tk.shape(),
                tv.shape()
            )));
        }
        if q_segs.len() != kv_segs.len() {
            return Err(Error::Shape("attention segment counts differ".into()));
        }
        check_segments(q_segs, nq)?;
        check_segments(kv_segs, nk)?;
        let mut out = vec![0.0; nq * dv];
        let mut weights = Vec::new();
        let mut scores = Vec::new();
        for (qs, ks) in q_segs.iter().zip(kv_segs) {
            let qd = &tq.data()[qs.start * dk..(qs.start + qs.len) * dk];
            let kd = &tk.data()[ks.start * dk..(ks.start + ks.len) * dk];
            let vd = &tv.data()[ks.start * dv..(ks.start + ks.len) * dv];
            scores.clear();
            scores.resize(qs.len * ks.len, 0.0);
            gemm_nt_acc(&mut scores, qd, kd, qs.len, dk, ks.len);
            let base = weights.len();
            for row in scores.chunks(ks.len) {
                softmax_into(row, 1.0 / scale, &mut weights);
            }
            let a = &weights[base..];
            let o = gemm(a, vd, qs.len, ks.len, dv);
            out[qs.start * dv..(qs.start + qs.len) * dv].copy_from_slice(&o);
        }
        let t = Tensor::raw(vec![nq, dv], out);
        self.push(
            "segment_attention",
            t,
            Op::SegmentAttention {
                q,
                k,
                v,
                q_segs: q_segs.to_vec(),
                kv_segs: kv_segs.to_vec(),
                scale,
                weights,
            },
            &[q, k, v],
        )
    }

    /// Pairwise cosine similarity between rows of `x` (n×d) and `y` (m×d).
    /// Row norms are floored at 1e-12.
    pub fn cosine_matrix(&mut self, x: Var, y: Var) -> Result<Var> {
        let (tx, ty) = (self.value(x), self.value(y));
        let (n, d) = tx.as_matrix_dims().ok_or_else(|| Error::Shape("cosine lhs".into()))?;
        let (m, d2) = ty.as_matrix_dims().ok_or_else(|| Error::Shape("cosine rhs".into()))?;
        if d != d2 {
            return Err(Error::Shape(format!("cosine width {d} vs {d2}")));
        }
        let norms = |t: &Tensor| -> Vec<f64> {
            t.data()
                .chunks(d)
                .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_FLOOR))
                .collect()
        };
        let (x_norm, y_norm) = (norms(tx), norms(ty));
        let mut out = vec![0.0; n * m];
        gemm_nt_acc(&mut out, tx.data(), ty.data(), n, d, m);
        for i in 0..n {
            for j in 0..m {
                out[i * m + j] /= x_norm[i] * y_norm[j];
            }
        }
        let t = Tensor::raw(vec![n, m], out);
        self.push(
            "cosine_matrix",
            t,
            Op::Cosine {
                x,
                y,
                x_norm,
                y_norm,
            },
            &[x, y],
        )
    }

    /// Rows of `table` selected by `ids` (an embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (n, d) = tt.as_matrix_dims().ok_or_else(|| Error::Shape("gather needs a matrix".into()))?;
        if ids.is_empty() {
            return Err(Error::Shape("gather with no ids".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= n) {
            return Err(Error::Domain(format!("row id {bad} out of range for table of {n}")));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(tt.row(i));
        }
        let t = Tensor::raw(vec![ids.len(), d], out);
        self.push("gather_rows", t, Op::GatherRows(table, ids.to_vec()), &[table])
    }

    /// Stacks equally sized tensors as rows of a matrix.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return Err(Error::Shape("stack of nothing".into()));
        };
        let d = self.value(*first).numel();
        let mut out = Vec::with_capacity(d * parts.len());
        for &p in parts {
            let t = self.value(p);
            if t.numel() != d {
                return Err(Error::Shape(format!("stack: {} vs {d} elements", t.numel())));
            }
            out.extend_from_slice(t.data());
        }
        let t = Tensor::raw(vec![parts.len(), d], out);
        self.push("stack_rows", t, Op::StackRows(parts.to_vec()), parts)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        let (n, d) = ta.as_matrix_dims().ok_or_else(|| Error::Shape("slice needs a matrix".into()))?;
        if len == 0 || start + len > n {
            return Err(Error::Shape(format!("rows {start}..{} of {n}", start + len)));
        }
        let data = ta.data()[start * d..(start + len) * d].to_vec();
        let t = Tensor::raw(vec![len, d], data);
        self.push("slice_rows", t, Op::SliceRows(a, start), &[a])
    }

    /// Elements at flat row-major `indices`, as a vector.
    pub fn pick(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        if indices.is_empty() {
            return Err(Error::Shape("pick with no indices".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= ta.numel()) {
            return Err(Error::Shape(format!("pick index {bad} of {}", ta.numel())));
        }
        let data = indices.iter().map(|&i| ta.data()[i]).collect();
        let t = Tensor::raw(vec![indices.len()], data);
        self.push("pick", t, Op::Pick(a, indices.to_vec()), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Identity forward; backward multiplies the incoming gradient by `-factor`.
    pub fn grad_reverse(&mut self, a: Var, factor: f64) -> Result<Var> {
        let t = self.value(a).detached();
        self.push("grad_reverse", t, Op::GradReverse(a, factor), &[a])
    }

    /// Accumulates `d loss / d leaf` into every learnable leaf, seeding with 1.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if let Op::Leaf = self.nodes[idx].op {
                self.nodes[idx].value.set_grad(g);
                continue;
            }
            self.backprop_node(idx, &g, &mut grads);
        }
        Ok(())
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        let nodes = &self.nodes;
        macro_rules! with_grad {
            ($v:expr, |$acc:ident| $body:block) => {
                if let Some($acc) = grad_slot(nodes, grads, $v) $body
            };
        }
        let val = |v: Var| nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                with_grad!(*a, |acc| {
                    if acc.len() == 1 && g.len() != 1 {
                        acc[0] += g.iter().sum::<f64>();
                    } else {
                        acc.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                });
                with_grad!(*b, |acc| {
                    if acc.len() == 1 && g.len() != 1 {
                        acc[0] += sign * g.iter().sum::<f64>();
                    } else {
                        acc.iter_mut().zip(g).for_each(|(x, y)| *x += sign * y);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let b_scalar = bv.len() == 1 && av.len() != 1;
                with_grad!(*a, |acc| {
                    for (i, x) in acc.iter_mut().enumerate() {
                        *x += g[i] * if b_scalar { bv[0] } else { bv[i] };
                    }
                });
                with_grad!(*b, |acc| {
                    if b_scalar {
                        acc[0] += g.iter().zip(av).map(|(x, y)| x * y).sum::<f64>();
                    } else {
                        for (i, x) in acc.iter_mut().enumerate() {
                            *x += g[i] * av[i];
                        }
                    }
                });
            }
            Op::Scale(a, c) => with_grad!(*a, |acc| {
                acc.iter_mut().zip(g).for_each(|(x, y)| *x += c * y);
            }),
            Op::AddScalar(a) => with_grad!(*a, |acc| {
                acc.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }),
            Op::Relu(a) => with_grad!(*a, |acc| {
                for ((x, gy), &inp) in acc.iter_mut().zip(g).zip(val(*a)) {
                    if inp > 0.0 {
                        *x += gy;
                    }
                }
            }),
            Op::Sigmoid(a) => with_grad!(*a, |acc| {
                for ((x, gy), y) in acc.iter_mut().zip(g).zip(out) {
                    *x += gy * y * (1.0 - y);
                }
            }),
            Op::Log(a) => with_grad!(*a, |acc| {
                for ((x, gy), inp) in acc.iter_mut().zip(g).zip(val(*a)) {
                    *x += gy / inp;
                }
            }),
            Op::Abs(a) => with_grad!(*a, |acc| {
                for ((x, gy), &inp) in acc.iter_mut().zip(g).zip(val(*a)) {
                    if inp > 0.0 {
                        *x += gy;
                    } else if inp < 0.0 {
                        *x -= gy;
                    }
                }
            }),
            Op::Clamp(a, lo, hi) => with_grad!(*a, |acc| {
                for ((x, gy), &inp) in acc.iter_mut().zip(g).zip(val(*a)) {
                    if inp > *lo && inp < *hi {
                        *x += gy;
                    }
                }
            }),
            Op::MatMul(a, b) => {
                let (n, k) = nodes[a.0].value.as_matrix_dims().unwrap();
                let m = nodes[b.0].value.cols();
                with_grad!(*a, |acc| {
                    gemm_nt_acc(acc, g, val(*b), n, m, k);
                });
                with_grad!(*b, |acc| {
                    gemm_tn_acc(acc, val(*a), g, n, k, m);
                });
            }
            Op::AddRow(a, bias) => {
                with_grad!(*a, |acc| {
                    acc.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                });
                with_grad!(*bias, |acc| {
                    let d = acc.len();
                    for row in g.chunks(d) {
                        acc.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::SoftmaxRows(a, t) => with_grad!(*a, |acc| {
                let d = node.value.cols();
                for ((arow, grow), yrow) in acc.chunks_mut(d).zip(g.chunks(d)).zip(out.chunks(d)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(x, y)| x * y).sum();
                    for ((x, gy), y) in arow.iter_mut().zip(grow).zip(yrow) {
                        *x += y * (gy - dot) / t;
                    }
                }
            }),
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            } => {
                let d = node.value.cols();
                let gv = val(*gain);
                with_grad!(*x, |acc| {
                    for (r, ((arow, grow), nrow)) in acc
                        .chunks_mut(d)
                        .zip(g.chunks(d))
                        .zip(normed.chunks(d))
                        .enumerate()
                    {
                        let dn: Vec<f64> = grow.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let sum_dn: f64 = dn.iter().sum();
                        let sum_dn_n: f64 = dn.iter().zip(nrow).map(|(a, b)| a * b).sum();
                        let inv = inv_std[r];
                        for ((o, dnj), nj) in arow.iter_mut().zip(&dn).zip(nrow) {
                            *o += inv * (dnj - sum_dn / d as f64 - nj * sum_dn_n / d as f64);
                        }
                    }
                });
                with_grad!(*gain, |acc| {
                    for (grow, nrow) in g.chunks(d).zip(normed.chunks(d)) {
                        for ((o, gy), n) in acc.iter_mut().zip(grow).zip(nrow) {
                            *o += gy * n;
                        }
                    }
                });
                with_grad!(*bias, |acc| {
                    for grow in g.chunks(d) {
                        acc.iter_mut().zip(grow).for_each(|(o, gy)| *o += gy);
                    }
                });
            }
            Op::MeanPoolRows(a) => with_grad!(*a, |acc| {
                let d = g.len();
                let n = acc.len() / d;
                for row in acc.chunks_mut(d) {
                    row.iter_mut().zip(g).for_each(|(x, y)| *x += y / n as f64);
                }
            }),
            Op::SegmentMean(a, segs) => with_grad!(*a, |acc| {
                let d = node.value.cols();
                for (s, seg) in segs.iter().enumerate() {
                    let grow = &g[s * d..(s + 1) * d];
                    for r in seg.start..seg.start + seg.len {
                        for (x, y) in acc[r * d..(r + 1) * d].iter_mut().zip(grow) {
                            *x += y / seg.len as f64;
                        }
                    }
                }
            }),
            Op::SegmentAttention {
                q,
                k,
                v,
                q_segs,
                kv_segs,
                scale,
                weights,
            } => {
                let dk = nodes[q.0].value.cols();
                let dv = nodes[v.0].value.cols();
                let (qv, kvv, vv) = (val(*q), val(*k), val(*v));
                let mut dq = vec![0.0; qv.len()];
                let mut dk_all = vec![0.0; kvv.len()];
                let mut dv_all = vec![0.0; vv.len()];
                let mut woff = 0;
                for (qs, ks) in q_segs.iter().zip(kv_segs) {
                    let a = &weights[woff..woff + qs.len * ks.len];
                    woff += qs.len * ks.len;
                    let go = &g[qs.start * dv..(qs.start + qs.len) * dv];
                    let vd = &vv[ks.start * dv..(ks.start + ks.len) * dv];
                    // dA = dO · Vᵀ
                    let mut da = vec![0.0; qs.len * ks.len];
                    gemm_nt_acc(&mut da, go, vd, qs.len, dv, ks.len);
                    // dV += Aᵀ · dO
                    gemm_tn_acc(
                        &mut dv_all[ks.start * dv..(ks.start + ks.len) * dv],
                        a,
                        go,
                        qs.len,
                        ks.len,
                        dv,
                    );
                    // dS = A ⊙ (dA − rowsum(dA ⊙ A)), then scaled
                    for (darow, arow) in da.chunks_mut(ks.len).zip(a.chunks(ks.len)) {
                        let dot: f64 = darow.iter().zip(arow).map(|(x, y)| x * y).sum();
                        for (x, y) in darow.iter_mut().zip(arow) {
                            *x = y * (*x - dot) * scale;
                        }
                    }
                    let qd = &qv[qs.start * dk..(qs.start + qs.len) * dk];
                    let kd = &kvv[ks.start * dk..(ks.start + ks.len) * dk];
                    let dqs = gemm(&da, kd, qs.len, ks.len, dk);
                    for (x, y) in dq[qs.start * dk..(qs.start + qs.len) * dk].iter_mut().zip(&dqs) {
                        *x += y;
                    }
                    gemm_tn_acc(
                        &mut dk_all[ks.start * dk..(ks.start + ks.len) * dk],
                        &da,
                        qd,
                        qs.len,
                        ks.len,
                        dk,
                    );
                }
                with_grad!(*q, |acc| {
                    acc.iter_mut().zip(&dq).for_each(|(x, y)| *x += y);
                });
                with_grad!(*k, |acc| {
                    acc.iter_mut().zip(&dk_all).for_each(|(x, y)| *x += y);
                });
                with_grad!(*v, |acc| {
                    acc.iter_mut().zip(&dv_all).for_each(|(x, y)| *x += y);
                });
            }
            Op::Cosine {
                x,
                y,
                x_norm,
                y_norm,
            } => {
                let d = nodes[x.0].value.cols();
                let m = y_norm.len();
                let (xv, yv) = (val(*x), val(*y));
                with_grad!(*x, |acc| {
                    for (i, &nx) in x_norm.iter().enumerate() {
                        let xi = &xv[i * d..(i + 1) * d];
                        let floored = nx <= NORM_FLOOR;
                        for j in 0..m {
                            let gij = g[i * m + j];
                            if gij == 0.0 {
                                continue;
                            }
                            let yj = &yv[j * d..(j + 1) * d];
                            let c = out[i * m + j];
                            let a = gij / (nx * y_norm[j]);
                            for t in 0..d {
                                let mut dv = a * yj[t];
                                if !floored {
                                    dv -= gij * c * xi[t] / (nx * nx);
                                }
                                acc[i * d + t] += dv;
                            }
                        }
                    }
                });
                with_grad!(*y, |acc| {
                    for (j, &ny) in y_norm.iter().enumerate() {
                        let yj = &yv[j * d..(j + 1) * d];
                        let floored = ny <= NORM_FLOOR;
                        for (i, &nx) in x_norm.iter().enumerate() {
                            let gij = g[i * m + j];
                            if gij == 0.0 {
                                continue;
                            }
                            let xi = &xv[i * d..(i + 1) * d];
                            let c = out[i * m + j];
                            let a = gij / (nx * ny);
                            for t in 0..d {
                                let mut dv = a * xi[t];
                                if !floored {
                                    dv -= gij * c * yj[t] / (ny * ny);
                                }
                                acc[j * d + t] += dv;
                            }
                        }
                    }
                });
            }
            Op::GatherRows(table, ids) => with_grad!(*table, |acc| {
                let d = node.value.cols();
                for (r, &id) in ids.iter().enumerate() {
                    for (x, y) in acc[id * d..(id + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                        *x += y;
                    }
                }
            }),
            Op::StackRows(parts) => {
                let d = node.value.cols();
                for (r, &p) in parts.iter().enumerate() {
                    with_grad!(p, |acc| {
                        acc.iter_mut().zip(&g[r * d..(r + 1) * d]).for_each(|(x, y)| *x += y);
                    });
                }
            }
            Op::SliceRows(a, start) => with_grad!(*a, |acc| {
                let d = node.value.cols();
                acc[start * d..start * d + g.len()]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(x, y)| *x += y);
            }),
            Op::Pick(a, indices) => with_grad!(*a, |acc| {
                for (&i, y) in indices.iter().zip(g) {
                    acc[i] += y;
                }
            }),
            Op::Sum(a) => with_grad!(*a, |acc| {
                acc.iter_mut().for_each(|x| *x += g[0]);
            }),
            Op::Mean(a) => with_grad!(*a, |acc| {
                let n = acc.len() as f64;
                acc.iter_mut().for_each(|x| *x += g[0] / n);
            }),
            Op::GradReverse(a, factor) => with_grad!(*a, |acc| {
                acc.iter_mut().zip(g).for_each(|(x, y)| *x -= factor * y);
            }),
        }
    }
}

/// Accumulator for `v`'s gradient, created lazily; `None` when `v` is not differentiable.
fn grad_slot<'g>(nodes: &[Node], grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Appends `softmax(row / temperature)` to `out`.
pub(crate) fn softmax_into(row: &[f64], temperature: f64, out: &mut Vec<f64>) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let start = out.len();
    let mut total = 0.0;
    for &x in row {
        let e = ((x - max) / temperature).exp();
        total += e;
        out.push(e);
    }
    out[start..].iter_mut().for_each(|e| *e /= total);
}

fn check_segments(segments: &[Segment], rows: usize) -> Result<()> {
    if segments.is_empty() {
        return Err(Error::Shape("no segments".into()));
    }
    for s in segments {
        if s.len == 0 || s.start + s.len > rows {
            return Err(Error::Shape(format!(
                "segment {}..{} outside {rows} rows",
                s.start,
                s.start + s.len
            )));
        }
    }
    Ok(())
}
