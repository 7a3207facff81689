//! Reverse-mode autodiff on a write-once tape.
//!
//! Every forward op appends a node holding the op description and its output
//! tensor; `backward` walks the nodes in reverse, accumulating gradients for
//! named parameters. Replaying the tape re-executes the same ops and must
//! reproduce every recorded output bit-exactly.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{strides, Precision, Tensor};

/// Handle to a node on a `Tape`. Only valid for the tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(String),
    Add { a: Var, b: Var },
    /// `[.., d] + [d]`, bias broadcast over leading dims.
    AddBias { x: Var, b: Var },
    Mul { a: Var, b: Var },
    /// `[.., d] * [d]`, gain broadcast over leading dims.
    MulBias { x: Var, g: Var },
    Scale { x: Var, c: f64 },
    Matmul { a: Var, b: Var },
    Transpose { x: Var },
    Gelu { x: Var },
    Softmax { x: Var, axis: usize },
    /// Normalizes the last axis to zero mean / unit variance (no affine).
    LayerNorm { x: Var, eps: f64 },
    /// Row gather: `table[ids[i], :]` stacked.
    Embed { table: Var, ids: Vec<usize> },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize, len: usize },
    Reshape { x: Var, shape: Vec<usize> },
    SumAll { x: Var },
    MeanAll { x: Var },
    /// Token cross-entropy from logits `[t, v]` against `labels[t]`, skipping
    /// positions whose label equals `ignore`. Scalar output: sum or mean over
    /// the kept positions.
    CrossEntropy { logits: Var, labels: Vec<i64>, ignore: i64, mean: bool },
}

struct Node {
    op: Op,
    value: Tensor,
}

pub struct Tape {
    nodes: Vec<Node>,
    precision: Precision,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

// ── Raw kernels ─────────────────────────────────────────────────────────────

/// C[m,n] += A[m,k] * B[k,n]
fn matmul_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += a_ip * brow[j];
            }
        }
    }
}

/// C[m,k] += A[m,n] * B[k,n]^T  (rows dotted with rows)
fn matmul_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for j in 0..n {
                acc += arow[j] * brow[j];
            }
            c[i * k + p] += acc;
        }
    }
}

/// C[k,n] += A[m,k]^T * B[m,n]  (outer-product accumulation)
fn matmul_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += a_ip * brow[j];
            }
        }
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044715;

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

// ── Tape ────────────────────────────────────────────────────────────────────

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), precision: Precision::F64 }
    }

    pub fn with_precision(precision: Precision) -> Self {
        Tape { nodes: Vec::new(), precision }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn apply_precision(&self, t: Tensor) -> Tensor {
        match self.precision {
            Precision::F64 => t,
            Precision::F32 => t.round_to_f32(),
        }
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        let t = self.apply_precision(t);
        self.nodes.push(Node { op: Op::Leaf, value: t });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, name: impl Into<String>, t: Tensor) -> Result<Var> {
        let name = name.into();
        for n in &self.nodes {
            if let Op::Param(existing) = &n.op {
                if *existing == name {
                    return Err(Error::InvalidArg {
                        op: "param",
                        detail: format!("duplicate parameter name {name:?}"),
                    });
                }
            }
        }
        let t = self.apply_precision(t);
        self.nodes.push(Node { op: Op::Param(name), value: t });
        Ok(Var(self.nodes.len() - 1))
    }

    fn push(&mut self, op: Op) -> Result<Var> {
        let value = self.eval(&op)?;
        let value = self.apply_precision(value);
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name(&op) });
        }
        self.nodes.push(Node { op, value });
        Ok(Var(self.nodes.len() - 1))
    }

    fn check(&self, v: Var, op: &'static str) -> Result<()> {
        if v.0 >= self.nodes.len() {
            return Err(Error::InvalidArg {
                op,
                detail: format!("var {} is not on this tape (len {})", v.0, self.nodes.len()),
            });
        }
        Ok(())
    }

    // ── Op constructors ─────────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a, "add")?;
        self.check(b, "add")?;
        self.push(Op::Add { a, b })
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        self.check(x, "add_bias")?;
        self.check(b, "add_bias")?;
        self.push(Op::AddBias { x, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a, "mul")?;
        self.check(b, "mul")?;
        self.push(Op::Mul { a, b })
    }

    pub fn mul_bias(&mut self, x: Var, g: Var) -> Result<Var> {
        self.check(x, "mul_bias")?;
        self.check(g, "mul_bias")?;
        self.push(Op::MulBias { x, g })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.check(x, "scale")?;
        if !c.is_finite() {
            return Err(Error::NonFinite { op: "scale" });
        }
        self.push(Op::Scale { x, c })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a, "matmul")?;
        self.check(b, "matmul")?;
        self.push(Op::Matmul { a, b })
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.check(x, "transpose")?;
        self.push(Op::Transpose { x })
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.check(x, "gelu")?;
        self.push(Op::Gelu { x })
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check(x, "softmax")?;
        let nd = self.value(x).ndim();
        if axis >= nd {
            return Err(Error::InvalidArg {
                op: "softmax",
                detail: format!("axis {axis} out of range for ndim {nd}"),
            });
        }
        self.push(Op::Softmax { x, axis })
    }

    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        self.check(x, "layer_norm")?;
        if self.value(x).ndim() == 0 {
            return Err(Error::InvalidArg {
                op: "layer_norm",
                detail: "scalar input has no feature axis".into(),
            });
        }
        self.push(Op::LayerNorm { x, eps })
    }

    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.check(table, "embed")?;
        let t = self.value(table);
        if t.ndim() != 2 {
            return Err(Error::ShapeMismatch {
                op: "embed",
                detail: format!("table must be 2-d, got {:?}", t.shape()),
            });
        }
        let rows = t.shape()[0];
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::InvalidArg {
                op: "embed",
                detail: format!("id {bad} out of range for table with {rows} rows"),
            });
        }
        self.push(Op::Embed { table, ids: ids.to_vec() })
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::InvalidArg { op: "concat", detail: "no parts".into() });
        }
        for &p in parts {
            self.check(p, "concat")?;
        }
        self.push(Op::Concat { parts: parts.to_vec(), axis })
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check(x, "slice")?;
        let shape = self.value(x).shape();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(Error::InvalidArg {
                op: "slice",
                detail: format!("range {start}..{} on axis {axis} of {:?}", start + len, shape),
            });
        }
        self.push(Op::Slice { x, axis, start, len })
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        self.check(x, "reshape")?;
        let n: usize = shape.iter().product();
        if n != self.value(x).len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                detail: format!("cannot view {:?} as {:?}", self.value(x).shape(), shape),
            });
        }
        self.push(Op::Reshape { x, shape })
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        self.check(x, "sum_all")?;
        self.push(Op::SumAll { x })
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        self.check(x, "mean_all")?;
        if self.value(x).is_empty() {
            return Err(Error::Degenerate { op: "mean_all", detail: "empty tensor".into() });
        }
        self.push(Op::MeanAll { x })
    }

    /// Mean token cross-entropy over positions whose label != `ignore`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[i64], ignore: i64) -> Result<Var> {
        self.cross_entropy_inner(logits, labels, ignore, true)
    }

    /// Summed token cross-entropy (same masking); pair with
    /// [`Tape::cross_entropy_count`] for batch-level means.
    pub fn cross_entropy_sum(&mut self, logits: Var, labels: &[i64], ignore: i64) -> Result<Var> {
        self.cross_entropy_inner(logits, labels, ignore, false)
    }

    pub fn cross_entropy_count(labels: &[i64], ignore: i64) -> usize {
        labels.iter().filter(|&&l| l != ignore).count()
    }

    fn cross_entropy_inner(
        &mut self,
        logits: Var,
        labels: &[i64],
        ignore: i64,
        mean: bool,
    ) -> Result<Var> {
        self.check(logits, "cross_entropy")?;
        let lt = self.value(logits);
        if lt.ndim() != 2 {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                detail: format!("logits must be [t, vocab], got {:?}", lt.shape()),
            });
        }
        let (t, v) = (lt.shape()[0], lt.shape()[1]);
        if labels.len() != t {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                detail: format!("{} labels for {} logit rows", labels.len(), t),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l != ignore && (l < 0 || l as usize >= v)) {
            return Err(Error::InvalidArg {
                op: "cross_entropy",
                detail: format!("label {bad} out of range for vocab {v}"),
            });
        }
        if mean && Self::cross_entropy_count(labels, ignore) == 0 {
            return Err(Error::Degenerate {
                op: "cross_entropy",
                detail: "no unignored positions".into(),
            });
        }
        self.push(Op::CrossEntropy { logits, labels: labels.to_vec(), ignore, mean })
    }

    /// Scaled dot-product attention: `softmax(scale * q k^T + mask) v`.
    /// Composite of primitive ops; returns `(output, probs)` so callers can
    /// inspect the attention matrix. `mask` is additive, same shape as the
    /// logits.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        mask: Option<Var>,
        scale: f64,
    ) -> Result<(Var, Var)> {
        let kt = self.transpose(k)?;
        let logits = self.matmul(q, kt)?;
        let logits = self.scale(logits, scale)?;
        let logits = match mask {
            Some(m) => self.add(logits, m)?,
            None => logits,
        };
        let probs = self.softmax(logits, 1)?;
        let out = self.matmul(probs, v)?;
        Ok((out, probs))
    }

    // ── Forward evaluation ──────────────────────────────────────────────

    fn eval(&self, op: &Op) -> Result<Tensor> {
        let val = |v: Var| &self.nodes[v.0].value;
        match op {
            Op::Leaf | Op::Param(_) => unreachable!("leaves are not re-evaluated"),
            Op::Add { a, b } => {
                let (ta, tb) = (val(*a), val(*b));
                if ta.shape() != tb.shape() {
                    return Err(Error::ShapeMismatch {
                        op: "add",
                        detail: format!("{:?} vs {:?}", ta.shape(), tb.shape()),
                    });
                }
                let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
                Ok(Tensor::from_vec_unchecked(ta.shape().to_vec(), data))
            }
            Op::AddBias { x, b } => {
                let (tx, tb) = (val(*x), val(*b));
                let d = *tx.shape().last().unwrap_or(&0);
                if tb.shape() != [d] {
                    return Err(Error::ShapeMismatch {
                        op: "add_bias",
                        detail: format!("bias {:?} vs feature dim {}", tb.shape(), d),
                    });
                }
                let bias = tb.data();
                let data = tx
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, x)| x + bias[i % d])
                    .collect();
                Ok(Tensor::from_vec_unchecked(tx.shape().to_vec(), data))
            }
            Op::Mul { a, b } => {
                let (ta, tb) = (val(*a), val(*b));
                if ta.shape() != tb.shape() {
                    return Err(Error::ShapeMismatch {
                        op: "mul",
                        detail: format!("{:?} vs {:?}", ta.shape(), tb.shape()),
                    });
                }
                let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                Ok(Tensor::from_vec_unchecked(ta.shape().to_vec(), data))
            }
            Op::MulBias { x, g } => {
                let (tx, tg) = (val(*x), val(*g));
                let d = *tx.shape().last().unwrap_or(&0);
                if tg.shape() != [d] {
                    return Err(Error::ShapeMismatch {
                        op: "mul_bias",
                        detail: format!("gain {:?} vs feature dim {}", tg.shape(), d),
                    });
                }
                let gain = tg.data();
                let data = tx
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, x)| x * gain[i % d])
                    .collect();
                Ok(Tensor::from_vec_unchecked(tx.shape().to_vec(), data))
            }
            Op::Scale { x, c } => {
                let tx = val(*x);
                let data = tx.data().iter().map(|v| v * c).collect();
                Ok(Tensor::from_vec_unchecked(tx.shape().to_vec(), data))
            }
            Op::Matmul { a, b } => {
                let (ta, tb) = (val(*a), val(*b));
                if ta.ndim() != 2 || tb.ndim() != 2 || ta.shape()[1] != tb.shape()[0] {
                    return Err(Error::ShapeMismatch {
                        op: "matmul",
                        detail: format!("{:?} x {:?}", ta.shape(), tb.shape()),
                    });
                }
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                let mut c = vec![0.0; m * n];
                matmul_nn(ta.data(), tb.data(), &mut c, m, k, n);
                Ok(Tensor::from_vec_unchecked(vec![m, n], c))
            }
            Op::Transpose { x } => {
                let tx = val(*x);
                if tx.ndim() != 2 {
                    return Err(Error::ShapeMismatch {
                        op: "transpose",
                        detail: format!("expected 2-d, got {:?}", tx.shape()),
                    });
                }
                let (m, n) = (tx.shape()[0], tx.shape()[1]);
                let src = tx.data();
                let mut data = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        data[j * m + i] = src[i * n + j];
                    }
                }
                Ok(Tensor::from_vec_unchecked(vec![n, m], data))
            }
            Op::Gelu { x } => {
                let tx = val(*x);
                let data = tx.data().iter().map(|&v| gelu_scalar(v)).collect();
                Ok(Tensor::from_vec_unchecked(tx.shape().to_vec(), data))
            }
            Op::Softmax { x, axis } => {
                let tx = val(*x);
                let mut data = tx.data().to_vec();
                softmax_lanes(&mut data, tx.shape(), *axis);
                Ok(Tensor::from_vec_unchecked(tx.shape().to_vec(), data))
            }
            Op::LayerNorm { x, eps } => {
                let tx = val(*x);
                let d = *tx.shape().last().unwrap();
                let mut data = tx.data().to_vec();
                for lane in data.chunks_mut(d) {
                    let mean = lane.iter().sum::<f64>() / d as f64;
                    let var = lane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    for v in lane.iter_mut() {
                        *v = (*v - mean) * inv;
                    }
                }
                Ok(Tensor::from_vec_unchecked(tx.shape().to_vec(), data))
            }
            Op::Embed { table, ids } => {
                let tt = val(*table);
                let d = tt.shape()[1];
                let src = tt.data();
                let mut data = Vec::with_capacity(ids.len() * d);
                for &id in ids {
                    data.extend_from_slice(&src[id * d..(id + 1) * d]);
                }
                Ok(Tensor::from_vec_unchecked(vec![ids.len(), d], data))
            }
            Op::Concat { parts, axis } => {
                let first = val(parts[0]).shape().to_vec();
                if *axis >= first.len() {
                    return Err(Error::InvalidArg {
                        op: "concat",
                        detail: format!("axis {axis} out of range for {first:?}"),
                    });
                }
                let mut axis_total = 0;
                for &p in parts {
                    let s = val(p).shape();
                    if s.len() != first.len()
                        || s.iter()
                            .zip(&first)
                            .enumerate()
                            .any(|(i, (a, b))| i != *axis && a != b)
                    {
                        return Err(Error::ShapeMismatch {
                            op: "concat",
                            detail: format!("{s:?} vs {first:?} (axis {axis})"),
                        });
                    }
                    axis_total += s[*axis];
                }
                let mut out_shape = first.clone();
                out_shape[*axis] = axis_total;
                let outer: usize = first[..*axis].iter().product();
                let inner: usize = first[*axis + 1..].iter().product();
                let mut data = vec![0.0; out_shape.iter().product()];
                let row_out = axis_total * inner;
                let mut offset = 0;
                for &p in parts {
                    let t = val(p);
                    let len = t.shape()[*axis];
                    let row_in = len * inner;
                    for o in 0..outer {
                        let src = &t.data()[o * row_in..(o + 1) * row_in];
                        let dst = &mut data[o * row_out + offset..o * row_out + offset + row_in];
                        dst.copy_from_slice(src);
                    }
                    offset += row_in;
                }
                Ok(Tensor::from_vec_unchecked(out_shape, data))
            }
            Op::Slice { x, axis, start, len } => {
                let tx = val(*x);
                let shape = tx.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let row_in = shape[*axis] * inner;
                let row_out = len * inner;
                let mut out_shape = shape.to_vec();
                out_shape[*axis] = *len;
                let mut data = vec![0.0; outer * row_out];
                for o in 0..outer {
                    let src = &tx.data()[o * row_in + start * inner..o * row_in + (start + len) * inner];
                    data[o * row_out..(o + 1) * row_out].copy_from_slice(src);
                }
                Ok(Tensor::from_vec_unchecked(out_shape, data))
            }
            Op::Reshape { x, shape } => val(*x).reshaped(shape.clone()),
            Op::SumAll { x } => Ok(Tensor::scalar(val(*x).data().iter().sum())),
            Op::MeanAll { x } => {
                let tx = val(*x);
                Ok(Tensor::scalar(tx.data().iter().sum::<f64>() / tx.len() as f64))
            }
            Op::CrossEntropy { logits, labels, ignore, mean } => {
                let lt = val(*logits);
                let v = lt.shape()[1];
                let mut total = 0.0;
                let mut count = 0usize;
                for (t, &label) in labels.iter().enumerate() {
                    if label == *ignore {
                        continue;
                    }
                    let row = &lt.data()[t * v..(t + 1) * v];
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lse = m + row.iter().map(|&l| (l - m).exp()).sum::<f64>().ln();
                    total += lse - row[label as usize];
                    count += 1;
                }
                if *mean {
                    total /= count as f64;
                }
                Ok(Tensor::scalar(total))
            }
        }
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar `loss`, seeded with 1. Returns gradients
    /// for every named parameter on the tape; parameters the loss does not
    /// depend on get zero gradients.
    pub fn backward(&self, loss: Var) -> Result<BTreeMap<String, Tensor>> {
        self.backward_seeded(loss, 1.0)
    }

    /// Same as [`Tape::backward`] with a custom seed value: gradients of
    /// `seed * loss`. Used for fixed-order batch reductions.
    pub fn backward_seeded(&self, loss: Var, seed: f64) -> Result<BTreeMap<String, Tensor>> {
        self.check(loss, "backward")?;
        if self.value(loss).ndim() != 0 {
            return Err(Error::ShapeMismatch {
                op: "backward",
                detail: format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![seed]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
            // Re-store for parameter map extraction below.
            grads[idx] = Some(g);
        }

        let mut map = BTreeMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Param(name) = &node.op {
                let data = grads[idx].take().unwrap_or_else(|| vec![0.0; node.value.len()]);
                let t = Tensor::from_vec_unchecked(node.value.shape().to_vec(), data);
                if !t.is_finite() {
                    return Err(Error::NonFinite { op: "backward" });
                }
                map.insert(name.clone(), t);
            }
        }
        Ok(map)
    }

    fn accum(grads: &mut [Option<Vec<f64>>], target: Var, size: usize, f: impl FnOnce(&mut [f64])) {
        let slot = grads[target.0].get_or_insert_with(|| vec![0.0; size]);
        f(slot);
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        match &self.nodes[idx].op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add { a, b } => {
                for &side in &[*a, *b] {
                    Self::accum(grads, side, val(side).len(), |dst| {
                        for (d, s) in dst.iter_mut().zip(g) {
                            *d += s;
                        }
                    });
                }
            }
            Op::AddBias { x, b } => {
                Self::accum(grads, *x, val(*x).len(), |dst| {
                    for (d, s) in dst.iter_mut().zip(g) {
                        *d += s;
                    }
                });
                let d = val(*b).len();
                Self::accum(grads, *b, d, |dst| {
                    for (i, s) in g.iter().enumerate() {
                        dst[i % d] += s;
                    }
                });
            }
            Op::Mul { a, b } => {
                let (ta, tb) = (val(*a), val(*b));
                Self::accum(grads, *a, ta.len(), |dst| {
                    for ((d, s), y) in dst.iter_mut().zip(g).zip(tb.data()) {
                        *d += s * y;
                    }
                });
                Self::accum(grads, *b, tb.len(), |dst| {
                    for ((d, s), x) in dst.iter_mut().zip(g).zip(ta.data()) {
                        *d += s * x;
                    }
                });
            }
            Op::MulBias { x, g: gain } => {
                let (tx, tg) = (val(*x), val(*gain));
                let d = tg.len();
                Self::accum(grads, *x, tx.len(), |dst| {
                    for (i, s) in g.iter().enumerate() {
                        dst[i] += s * tg.data()[i % d];
                    }
                });
                Self::accum(grads, *gain, d, |dst| {
                    for (i, s) in g.iter().enumerate() {
                        dst[i % d] += s * tx.data()[i];
                    }
                });
            }
            Op::Scale { x, c } => {
                Self::accum(grads, *x, val(*x).len(), |dst| {
                    for (d, s) in dst.iter_mut().zip(g) {
                        *d += s * c;
                    }
                });
            }
            Op::Matmul { a, b } => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                // dA = dC B^T, dB = A^T dC
                Self::accum(grads, *a, m * k, |dst| {
                    matmul_nt(g, tb.data(), dst, m, n, k);
                });
                Self::accum(grads, *b, k * n, |dst| {
                    matmul_tn(ta.data(), g, dst, m, k, n);
                });
            }
            Op::Transpose { x } => {
                let tx = val(*x);
                let (m, n) = (tx.shape()[0], tx.shape()[1]);
                Self::accum(grads, *x, m * n, |dst| {
                    // g has shape [n, m]
                    for j in 0..n {
                        for i in 0..m {
                            dst[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::Gelu { x } => {
                let tx = val(*x);
                Self::accum(grads, *x, tx.len(), |dst| {
                    for ((d, s), &v) in dst.iter_mut().zip(g).zip(tx.data()) {
                        *d += s * gelu_grad_scalar(v);
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let s = &self.nodes[idx].value;
                let shape = s.shape().to_vec();
                let st = strides(&shape);
                let step = st[*axis];
                let axis_len = shape[*axis];
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                Self::accum(grads, *x, s.len(), |dst| {
                    let sv = s.data();
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * axis_len * inner + i;
                            let mut dot = 0.0;
                            for j in 0..axis_len {
                                let p = base + j * step;
                                dot += g[p] * sv[p];
                            }
                            for j in 0..axis_len {
                                let p = base + j * step;
                                dst[p] += sv[p] * (g[p] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { x, eps } => {
                let tx = val(*x);
                let d = *tx.shape().last().unwrap();
                Self::accum(grads, *x, tx.len(), |dst| {
                    let src = tx.data();
                    for lane in 0..src.len() / d {
                        let xs = &src[lane * d..(lane + 1) * d];
                        let gs = &g[lane * d..(lane + 1) * d];
                        let mean = xs.iter().sum::<f64>() / d as f64;
                        let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        let xhat: Vec<f64> = xs.iter().map(|v| (v - mean) * inv).collect();
                        let g_mean = gs.iter().sum::<f64>() / d as f64;
                        let gx_mean =
                            gs.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            dst[lane * d + j] += inv * (gs[j] - g_mean - xhat[j] * gx_mean);
                        }
                    }
                });
            }
            Op::Embed { table, ids } => {
                let tt = val(*table);
                let d = tt.shape()[1];
                Self::accum(grads, *table, tt.len(), |dst| {
                    for (row, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            dst[id * d + j] += g[row * d + j];
                        }
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let out_shape = self.nodes[idx].value.shape().to_vec();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let row_out = out_shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let t = val(p);
                    let row_in = t.shape()[*axis] * inner;
                    Self::accum(grads, p, t.len(), |dst| {
                        for o in 0..outer {
                            let src = &g[o * row_out + offset..o * row_out + offset + row_in];
                            for (d, s) in dst[o * row_in..(o + 1) * row_in].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    });
                    offset += row_in;
                }
            }
            Op::Slice { x, axis, start, len } => {
                let tx = val(*x);
                let shape = tx.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let row_in = shape[*axis] * inner;
                let row_out = len * inner;
                Self::accum(grads, *x, tx.len(), |dst| {
                    for o in 0..outer {
                        let d = &mut dst[o * row_in + start * inner..o * row_in + (start + len) * inner];
                        for (dv, sv) in d.iter_mut().zip(&g[o * row_out..(o + 1) * row_out]) {
                            *dv += sv;
                        }
                    }
                });
            }
            Op::Reshape { x, .. } => {
                Self::accum(grads, *x, val(*x).len(), |dst| {
                    for (d, s) in dst.iter_mut().zip(g) {
                        *d += s;
                    }
                });
            }
            Op::SumAll { x } => {
                Self::accum(grads, *x, val(*x).len(), |dst| {
                    for d in dst.iter_mut() {
                        *d += g[0];
                    }
                });
            }
            Op::MeanAll { x } => {
                let n = val(*x).len() as f64;
                Self::accum(grads, *x, val(*x).len(), |dst| {
                    for d in dst.iter_mut() {
                        *d += g[0] / n;
                    }
                });
            }
            Op::CrossEntropy { logits, labels, ignore, mean } => {
                let lt = val(*logits);
                let v = lt.shape()[1];
                let count = Self::cross_entropy_count(labels, *ignore);
                let w = if *mean { g[0] / count as f64 } else { g[0] };
                Self::accum(grads, *logits, lt.len(), |dst| {
                    for (t, &label) in labels.iter().enumerate() {
                        if label == *ignore {
                            continue;
                        }
                        let row = &lt.data()[t * v..(t + 1) * v];
                        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let z: f64 = row.iter().map(|&l| (l - m).exp()).sum();
                        for j in 0..v {
                            let p = (row[j] - m).exp() / z;
                            let onehot = if j == label as usize { 1.0 } else { 0.0 };
                            dst[t * v + j] += w * (p - onehot);
                        }
                    }
                });
            }
        }
        Ok(())
    }

    /// Re-execute every recorded op and check the stored outputs reproduce
    /// bit-exactly.
    pub fn replay(&self) -> Result<()> {
        for (idx, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf | Op::Param(_)) {
                continue;
            }
            let fresh = self.apply_precision(self.eval(&node.op)?);
            if !fresh.bit_eq(&node.value) {
                return Err(Error::InvalidArg {
                    op: "replay",
                    detail: format!("node {idx} ({}) diverged on replay", op_name(&node.op)),
                });
            }
        }
        Ok(())
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Param(_) => "param",
        Op::Add { .. } => "add",
        Op::AddBias { .. } => "add_bias",
        Op::Mul { .. } => "mul",
        Op::MulBias { .. } => "mul_bias",
        Op::Scale { .. } => "scale",
        Op::Matmul { .. } => "matmul",
        Op::Transpose { .. } => "transpose",
        Op::Gelu { .. } => "gelu",
        Op::Softmax { .. } => "softmax",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Embed { .. } => "embed",
        Op::Concat { .. } => "concat",
        Op::Slice { .. } => "slice",
        Op::Reshape { .. } => "reshape",
        Op::SumAll { .. } => "sum_all",
        Op::MeanAll { .. } => "mean_all",
        Op::CrossEntropy { .. } => "cross_entropy",
    }
}

/// In-place softmax over `axis` lanes of a row-major buffer.
fn softmax_lanes(data: &mut [f64], shape: &[usize], axis: usize) {
    let st = strides(shape);
    let step = st[axis];
    let axis_len = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * axis_len * inner + i;
            let mut m = f64::NEG_INFINITY;
            for j in 0..axis_len {
                m = m.max(data[base + j * step]);
            }
            let mut z = 0.0;
            for j in 0..axis_len {
                let e = (data[base + j * step] - m).exp();
                data[base + j * step] = e;
                z += e;
            }
            for j in 0..axis_len {
                data[base + j * step] /= z;
            }
        }
    }
}

// ── Tests ───────────────────────────────────────────────────────────────────
