//! Adafactor with first moment disabled: factored second-moment accumulators
//! (row/column sums for matrices, full for vectors and scalars), decay 0.8,
//! update RMS-clipped at 1.0. Scalar parameters reduce exactly to an
//! RMSProp-style update, which the tests pin against a five-line oracle.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::ParamSet;
use crate::tensor::Tensor;

pub const DECAY: f64 = 0.8;
pub const EPS: f64 = 1e-30;
pub const CLIP_RMS: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub enum SecondMoment {
    /// Same shape as the parameter (ndim ≤ 1).
    Full { v: Tensor },
    /// Row/column running sums of squared gradients over the matrix view
    /// `[prod(leading dims), last dim]`.
    Factored { r: Tensor, c: Tensor },
}

#[derive(Debug, Clone)]
pub struct Adafactor {
    pub decay: f64,
    pub eps: f64,
    pub clip_rms: f64,
    pub step: u64,
    slots: BTreeMap<String, SecondMoment>,
}

impl Default for Adafactor {
    fn default() -> Self {
        Adafactor::new()
    }
}

/// Matrix view for factoring: all leading dims fold into rows.
fn matrix_view(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().expect("ndim >= 2");
    (shape.iter().product::<usize>() / cols, cols)
}

impl Adafactor {
    pub fn new() -> Adafactor {
        Adafactor { decay: DECAY, eps: EPS, clip_rms: CLIP_RMS, step: 0, slots: BTreeMap::new() }
    }

    /// One optimizer step: `grads` must cover every trainable parameter and
    /// nothing else. Frozen parameters are untouched.
    pub fn update(
        &mut self,
        params: &mut ParamSet,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
    ) -> Result<()> {
        if !lr.is_finite() || lr < 0.0 {
            return Err(Error::InvalidArg {
                op: "adafactor_update",
                detail: format!("lr {lr} must be finite and nonnegative"),
            });
        }
        let trainable: Vec<String> = params
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(n, _)| n.to_string())
            .collect();
        for name in grads.keys() {
            if !trainable.iter().any(|t| t == name) {
                return Err(Error::InvalidArg {
                    op: "adafactor_update",
                    detail: format!("gradient for unknown or frozen parameter {name:?}"),
                });
            }
        }
        for name in &trainable {
            let grad = grads.get(name).ok_or_else(|| Error::InvalidArg {
                op: "adafactor_update",
                detail: format!("missing gradient for trainable parameter {name:?}"),
            })?;
            let param = params.get(name).expect("listed above");
            if grad.shape() != param.value.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adafactor_update",
                    detail: format!(
                        "{name}: grad {:?} vs param {:?}",
                        grad.shape(),
                        param.value.shape()
                    ),
                });
            }
            let update = self.update_tensor(name, &param.value, grad)?;
            let new_value = Tensor::from_vec(
                param.value.shape().to_vec(),
                param
                    .value
                    .data()
                    .iter()
                    .zip(update.iter())
                    .map(|(p, u)| p - lr * u)
                    .collect(),
            )?;
            params.set_value(name, new_value)?;
        }
        self.step += 1;
        Ok(())
    }

    /// The clipped update direction for one parameter; advances its slot.
    fn update_tensor(&mut self, name: &str, param: &Tensor, grad: &Tensor) -> Result<Vec<f64>> {
        let d = self.decay;
        let shape = param.shape();
        let g = grad.data();
        let mut u: Vec<f64>;
        if shape.len() >= 2 {
            let (rows, cols) = matrix_view(shape);
            let slot = self.slots.entry(name.to_string()).or_insert_with(|| SecondMoment::Factored {
                r: Tensor::zeros(vec![rows]),
                c: Tensor::zeros(vec![cols]),
            });
            let SecondMoment::Factored { r, c } = slot else {
                return Err(Error::InvalidArg {
                    op: "adafactor_update",
                    detail: format!("{name}: slot kind does not match parameter rank"),
                });
            };
            if r.len() != rows || c.len() != cols {
                return Err(Error::ShapeMismatch {
                    op: "adafactor_update",
                    detail: format!(
                        "{name}: slot [{}]x[{}] vs matrix view [{rows},{cols}]",
                        r.len(),
                        c.len()
                    ),
                });
            }
            let mut row_sums = vec![0.0; rows];
            let mut col_sums = vec![0.0; cols];
            for i in 0..rows {
                for j in 0..cols {
                    let g2 = g[i * cols + j] * g[i * cols + j];
                    row_sums[i] += g2;
                    col_sums[j] += g2;
                }
            }
            let new_r: Vec<f64> =
                r.data().iter().zip(&row_sums).map(|(old, s)| d * old + (1.0 - d) * s).collect();
            let new_c: Vec<f64> =
                c.data().iter().zip(&col_sums).map(|(old, s)| d * old + (1.0 - d) * s).collect();
            let r_total: f64 = new_r.iter().sum();
            u = vec![0.0; rows * cols];
            for i in 0..rows {
                for j in 0..cols {
                    // v̂_ij = R_i·C_j / ΣR: exact for rank-1 g², bounded
                    // approximation otherwise.
                    let v_hat = if r_total > 0.0 { new_r[i] * new_c[j] / r_total } else { 0.0 };
                    u[i * cols + j] = g[i * cols + j] / (v_hat + self.eps).sqrt();
                }
            }
            *r = Tensor::from_vec(vec![rows], new_r)?;
            *c = Tensor::from_vec(vec![cols], new_c)?;
        } else {
            let slot = self
                .slots
                .entry(name.to_string())
                .or_insert_with(|| SecondMoment::Full { v: Tensor::zeros(shape.to_vec()) });
            let SecondMoment::Full { v } = slot else {
                return Err(Error::InvalidArg {
                    op: "adafactor_update",
                    detail: format!("{name}: slot kind does not match parameter rank"),
                });
            };
            if v.shape() != shape {
                return Err(Error::ShapeMismatch {
                    op: "adafactor_update",
                    detail: format!("{name}: slot {:?} vs param {shape:?}", v.shape()),
                });
            }
            let new_v: Vec<f64> =
                v.data().iter().zip(g).map(|(old, gi)| d * old + (1.0 - d) * gi * gi).collect();
            u = new_v.iter().zip(g).map(|(vi, gi)| gi / (vi + self.eps).sqrt()).collect();
            *v = Tensor::from_vec(shape.to_vec(), new_v)?;
        }

        let rms = (u.iter().map(|x| x * x).sum::<f64>() / u.len() as f64).sqrt();
        if rms > self.clip_rms {
            let scale = self.clip_rms / rms;
            for x in &mut u {
                *x *= scale;
            }
        }
        Ok(u)
    }

    /// Serialize accumulators as checkpoint extras: `opt.step`, and per
    /// parameter `opt.v.*` or `opt.r.*`/`opt.c.*`.
    pub fn to_extra(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        out.insert(
            "opt.step".to_string(),
            Tensor::from_vec(vec![1], vec![self.step as f64]).expect("finite"),
        );
        for (name, slot) in &self.slots {
            match slot {
                SecondMoment::Full { v } => {
                    out.insert(format!("opt.v.{name}"), v.clone());
                }
                SecondMoment::Factored { r, c } => {
                    out.insert(format!("opt.r.{name}"), r.clone());
                    out.insert(format!("opt.c.{name}"), c.clone());
                }
            }
        }
        out
    }

    /// Rebuild from checkpoint extras; entries outside the `opt.` namespace
    /// are ignored.
    pub fn from_extra(extra: &BTreeMap<String, Tensor>) -> Result<Adafactor> {
        let mut opt = Adafactor::new();
        if let Some(step) = extra.get("opt.step") {
            if step.len() != 1 {
                return Err(Error::InvalidArg {
                    op: "adafactor_from_extra",
                    detail: format!("opt.step has {} entries, expected 1", step.len()),
                });
            }
            opt.step = step.data()[0] as u64;
        }
        for (key, t) in extra {
            if let Some(name) = key.strip_prefix("opt.v.") {
                opt.slots.insert(name.to_string(), SecondMoment::Full { v: t.clone() });
            } else if let Some(name) = key.strip_prefix("opt.r.") {
                let c_key = format!("opt.c.{name}");
                let c = extra.get(&c_key).ok_or_else(|| Error::ManifestMismatch {
                    entry: c_key.clone(),
                    detail: "row factor present without column factor".into(),
                })?;
                opt.slots.insert(
                    name.to_string(),
                    SecondMoment::Factored { r: t.clone(), c: c.clone() },
                );
            }
        }
        Ok(opt)
    }

    pub fn slot(&self, name: &str) -> Option<&SecondMoment> {
        self.slots.get(name)
    }
}

// ── Tests ───────────────────────────────────────────────────────────────────
