//! Shared transformer building blocks: parameter binding, affine layer norm,
//! linear layers, MLP, multi-head attention, dropout.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

use super::params::ParamSet;

pub const LN_EPS: f64 = 1e-6;
/// Additive mask value. Finite on purpose: exp(MASK - max) underflows to
/// exactly 0, and the tape's finiteness checks keep holding.
pub const MASK: f64 = -1e30;

/// Tape handles for every model parameter, keyed by name. Frozen parameters
/// are bound as plain leaves so backward never visits them.
pub struct ModelVars {
    map: BTreeMap<String, Var>,
}

impl ModelVars {
    pub fn bind(tape: &mut Tape, params: &ParamSet) -> Result<ModelVars> {
        let mut map = BTreeMap::new();
        for (name, p) in params.iter() {
            let var = if p.trainable {
                tape.param(name, p.value.clone())?
            } else {
                tape.leaf(p.value.clone())
            };
            map.insert(name.to_string(), var);
        }
        Ok(ModelVars { map })
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.map.get(name).copied().ok_or_else(|| Error::InvalidArg {
            op: "model_vars",
            detail: format!("no parameter {name:?} bound"),
        })
    }
}

/// Inverted dropout state for one forward pass.
pub struct DropCtx {
    pub rng: ChaCha8Rng,
    pub rate: f64,
}

/// Multiply by a fresh Bernoulli keep-mask scaled by 1/keep. Identity when
/// `ctx` is None or the rate is 0.
pub fn dropout(tape: &mut Tape, x: Var, ctx: &mut Option<DropCtx>) -> Result<Var> {
    let Some(c) = ctx else { return Ok(x) };
    if c.rate == 0.0 {
        return Ok(x);
    }
    if !(c.rate > 0.0 && c.rate < 1.0) {
        return Err(Error::InvalidArg {
            op: "dropout",
            detail: format!("rate must be in [0, 1), got {}", c.rate),
        });
    }
    let keep = 1.0 - c.rate;
    let shape = tape.value(x).shape().to_vec();
    let n: usize = shape.iter().product();
    let mask: Vec<f64> = (0..n)
        .map(|_| if c.rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    let mask = tape.leaf(Tensor::from_vec_unchecked(shape, mask));
    tape.mul(x, mask)
}

/// `layer_norm(x) * g + b` with parameters at `{prefix}.g` / `{prefix}.b`.
pub fn ln_affine(tape: &mut Tape, vars: &ModelVars, prefix: &str, x: Var) -> Result<Var> {
    let g = vars.get(&format!("{prefix}.g"))?;
    let b = vars.get(&format!("{prefix}.b"))?;
    let h = tape.layer_norm(x, LN_EPS)?;
    let h = tape.mul_bias(h, g)?;
    tape.add_bias(h, b)
}

/// `x @ w + b`; `bias` may be absent (output projection has none).
pub fn linear(
    tape: &mut Tape,
    vars: &ModelVars,
    w: &str,
    b: Option<&str>,
    x: Var,
) -> Result<Var> {
    let wv = vars.get(w)?;
    let h = tape.matmul(x, wv)?;
    match b {
        Some(b) => {
            let bv = vars.get(b)?;
            tape.add_bias(h, bv)
        }
        None => Ok(h),
    }
}

/// Two-layer GELU MLP with parameters under `{prefix}.{w1,b1,w2,b2}`.
pub fn mlp(tape: &mut Tape, vars: &ModelVars, prefix: &str, x: Var) -> Result<Var> {
    let h = linear(tape, vars, &format!("{prefix}.w1"), Some(&format!("{prefix}.b1")), x)?;
    let h = tape.gelu(h)?;
    linear(tape, vars, &format!("{prefix}.w2"), Some(&format!("{prefix}.b2")), h)
}

/// Multi-head attention with parameters under `{prefix}.{wq,wk,wv,wo,bq,..}`.
/// `head_biases` is an optional per-head additive bias on the attention
/// logits (relative-position bias and/or masks, already summed). Every head's
/// attention matrix is appended to `trace`.
pub fn multi_head_attention(
    tape: &mut Tape,
    vars: &ModelVars,
    trace: &mut Vec<(String, Var)>,
    prefix: &str,
    heads: usize,
    q_in: Var,
    kv_in: Var,
    head_biases: Option<&[Var]>,
) -> Result<Var> {
    let d = *tape.value(q_in).shape().last().ok_or(Error::ShapeMismatch {
        op: "multi_head_attention",
        detail: "scalar input".into(),
    })?;
    if d % heads != 0 {
        return Err(Error::ShapeMismatch {
            op: "multi_head_attention",
            detail: format!("dim {d} not divisible by {heads} heads"),
        });
    }
    if let Some(hb) = head_biases {
        if hb.len() != heads {
            return Err(Error::ShapeMismatch {
                op: "multi_head_attention",
                detail: format!("{} biases for {heads} heads", hb.len()),
            });
        }
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let q = linear(tape, vars, &format!("{prefix}.wq"), Some(&format!("{prefix}.bq")), q_in)?;
    let k = linear(tape, vars, &format!("{prefix}.wk"), Some(&format!("{prefix}.bk")), kv_in)?;
    let v = linear(tape, vars, &format!("{prefix}.wv"), Some(&format!("{prefix}.bv")), kv_in)?;

    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice(q, 1, h * dh, dh)?;
        let kh = tape.slice(k, 1, h * dh, dh)?;
        let vh = tape.slice(v, 1, h * dh, dh)?;
        let bias = head_biases.map(|hb| hb[h]);
        let (out, probs) = tape.attention(qh, kh, vh, bias, scale)?;
        trace.push((format!("{prefix}.head{h}"), probs));
        outs.push(out);
    }
    let cat = tape.concat(&outs, 1)?;
    linear(tape, vars, &format!("{prefix}.wo"), Some(&format!("{prefix}.bo")), cat)
}

// ── Tests ───────────────────────────────────────────────────────────────────
