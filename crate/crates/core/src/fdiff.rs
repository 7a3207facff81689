//! Central finite differences. The gradient oracle: it only ever calls the
//! function under test, never the tape, so it stays independent of the
//! backward implementation it is used to check.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::params::ParamSet;
use crate::tensor::Tensor;

fn check_eps(eps: f64) -> Result<()> {
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::InvalidArg {
            op: "finite_difference",
            detail: format!("eps must be positive and finite, got {eps}"),
        });
    }
    Ok(())
}

/// Evaluate `f` twice and insist on bit-identical results. A finite-difference
/// gradient of a nondeterministic function is noise, so that is an error.
fn check_deterministic<F: Fn(&ParamSet) -> Result<f64>>(f: &F, params: &ParamSet) -> Result<f64> {
    let a = f(params)?;
    let b = f(params)?;
    if a.to_bits() != b.to_bits() {
        return Err(Error::InvalidArg {
            op: "finite_difference",
            detail: format!("function is not deterministic: {a} vs {b}"),
        });
    }
    if !a.is_finite() {
        return Err(Error::NonFinite { op: "finite_difference" });
    }
    Ok(a)
}

/// Central difference for one coordinate: `(f(p+eps) - f(p-eps)) / (2 eps)`
/// at `params[name][flat_idx]`.
pub fn finite_difference_at<F: Fn(&ParamSet) -> Result<f64>>(
    f: &F,
    params: &ParamSet,
    name: &str,
    flat_idx: usize,
    eps: f64,
) -> Result<f64> {
    check_eps(eps)?;
    check_deterministic(f, params)?;
    let plus = f(&params.with_perturbed(name, flat_idx, eps)?)?;
    let minus = f(&params.with_perturbed(name, flat_idx, -eps)?)?;
    Ok((plus - minus) / (2.0 * eps))
}

/// Full central-difference gradient map over every coordinate of every
/// parameter. Quadratic cost in parameter count; meant for toy models.
pub fn finite_difference_grad<F: Fn(&ParamSet) -> Result<f64>>(
    f: &F,
    params: &ParamSet,
    eps: f64,
) -> Result<BTreeMap<String, Tensor>> {
    check_eps(eps)?;
    check_deterministic(f, params)?;
    let mut out = BTreeMap::new();
    for (name, p) in params.iter() {
        let mut g = Vec::with_capacity(p.value.len());
        for idx in 0..p.value.len() {
            let plus = f(&params.with_perturbed(name, idx, eps)?)?;
            let minus = f(&params.with_perturbed(name, idx, -eps)?)?;
            g.push((plus - minus) / (2.0 * eps));
        }
        out.insert(name.to_string(), Tensor::from_vec(p.value.shape().to_vec(), g)?);
    }
    Ok(out)
}

/// `|a - b| / max(1, |a|, |b|)`: relative for large values, absolute near 0.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1.0f64.max(a.abs()).max(b.abs())
}

// ── Tests ───────────────────────────────────────────────────────────────────
