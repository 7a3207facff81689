//! Checkpoint souping: the per-parameter arithmetic mean of two or more
//! parameter sets with identical manifests. Optimizer state is never souped;
//! a resumed run starts with fresh accumulators.

use crate::error::{Error, Result};
use crate::model::ParamSet;
use crate::tensor::Tensor;

pub fn soup(sets: &[&ParamSet]) -> Result<ParamSet> {
    if sets.len() < 2 {
        return Err(Error::InvalidArg {
            op: "soup",
            detail: format!("need at least 2 checkpoints, got {}", sets.len()),
        });
    }
    let reference = sets[0].manifest();
    for (idx, set) in sets.iter().enumerate().skip(1) {
        let manifest = set.manifest();
        if manifest.len() != reference.len() {
            return Err(Error::ManifestMismatch {
                entry: format!("checkpoint {idx}"),
                detail: format!("{} parameters vs {}", manifest.len(), reference.len()),
            });
        }
        for (a, b) in reference.iter().zip(&manifest) {
            if a != b {
                return Err(Error::ManifestMismatch {
                    entry: a.name.clone(),
                    detail: format!(
                        "checkpoint {idx} disagrees: {:?}/{:?}/trainable={} vs {:?}/{:?}/trainable={}",
                        a.name, a.shape, a.trainable, b.name, b.shape, b.trainable
                    ),
                });
            }
        }
    }

    let n = sets.len() as f64;
    let mut out = ParamSet::new();
    for entry in &reference {
        let shape = entry.shape.clone();
        let mut acc = vec![0.0; shape.iter().product()];
        for set in sets {
            let p = set.get(&entry.name).expect("manifests verified identical");
            for (a, v) in acc.iter_mut().zip(p.value.data()) {
                *a += v;
            }
        }
        for a in &mut acc {
            *a /= n;
        }
        out.insert_with_flag(&entry.name, Tensor::from_vec(shape, acc)?, entry.trainable)?;
    }
    Ok(out)
}

// ── Tests ───────────────────────────────────────────────────────────────────
