//! Named parameter collections. Names are dotted paths ("vit.block0.attn.wq");
//! iteration order is always name order, which makes every consumer
//! (optimizer, checkpoint, souping) deterministic for free.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::config::ModelConfig;

#[derive(Debug, Clone)]
pub struct Parameter {
    pub value: Tensor,
    pub trainable: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    map: BTreeMap<String, Parameter>,
}

/// One row of a parameter manifest: everything about a parameter except its
/// values.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.map.contains_key(&name) {
            return Err(Error::InvalidArg {
                op: "param_insert",
                detail: format!("duplicate parameter {name:?}"),
            });
        }
        self.map.insert(name, Parameter { value, trainable: true });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.map.get(name)
    }

    /// Replace a parameter's value, keeping its trainable flag. The new value
    /// must have the original shape.
    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self.map.get_mut(name).ok_or_else(|| Error::InvalidArg {
            op: "set_value",
            detail: format!("no parameter {name:?}"),
        })?;
        if p.value.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "set_value",
                detail: format!("{name}: {:?} -> {:?}", p.value.shape(), value.shape()),
            });
        }
        p.value = value;
        Ok(())
    }

    /// Replace a parameter allowing a shape change (positional grids resize).
    pub fn replace(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self.map.get_mut(name).ok_or_else(|| Error::InvalidArg {
            op: "replace",
            detail: format!("no parameter {name:?}"),
        })?;
        p.value = value;
        Ok(())
    }

    pub fn insert_with_flag(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> Result<()> {
        let name = name.into();
        self.insert(name.clone(), value)?;
        self.map.get_mut(&name).unwrap().trainable = trainable;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Parameter)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.map.values().map(|p| p.value.len()).sum()
    }

    /// Mark parameters whose name starts with any of `prefixes` as frozen and
    /// everything else trainable. Returns the frozen count.
    pub fn freeze_by_prefix(&mut self, prefixes: &[String]) -> usize {
        let mut frozen = 0;
        for (name, p) in self.map.iter_mut() {
            let hit = prefixes.iter().any(|pre| name.starts_with(pre.as_str()));
            p.trainable = !hit;
            if hit {
                frozen += 1;
            }
        }
        frozen
    }

    pub fn manifest(&self) -> Vec<ManifestEntry> {
        self.map
            .iter()
            .map(|(name, p)| ManifestEntry {
                name: name.clone(),
                shape: p.value.shape().to_vec(),
                trainable: p.trainable,
            })
            .collect()
    }

    /// Copy with one coordinate of one parameter shifted by `delta`.
    pub fn with_perturbed(&self, name: &str, flat_idx: usize, delta: f64) -> Result<ParamSet> {
        let p = self.map.get(name).ok_or_else(|| Error::InvalidArg {
            op: "with_perturbed",
            detail: format!("no parameter {name:?}"),
        })?;
        if flat_idx >= p.value.len() {
            return Err(Error::InvalidArg {
                op: "with_perturbed",
                detail: format!("index {flat_idx} out of range for {name} ({})", p.value.len()),
            });
        }
        let mut data = p.value.data().to_vec();
        data[flat_idx] += delta;
        let mut out = self.clone();
        out.map.get_mut(name).unwrap().value =
            Tensor::from_vec(p.value.shape().to_vec(), data)?;
        Ok(out)
    }

    pub fn bit_eq(&self, other: &ParamSet) -> bool {
        self.map.len() == other.map.len()
            && self.iter().zip(other.iter()).all(|((an, ap), (bn, bp))| {
                an == bn && ap.trainable == bp.trainable && ap.value.bit_eq(&bp.value)
            })
    }
}

const INIT_STD: f64 = 0.02;

/// Build the full parameter set for a model config. Weight matrices and
/// embeddings are N(0, 0.02); biases, layer-norm shifts and relative-position
/// tables start at zero; layer-norm gains at one.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamSet::new();
    let v = &cfg.vit;
    let e = &cfg.encdec;

    let w = |p: &mut ParamSet, name: String, shape: Vec<usize>, rng: &mut ChaCha8Rng| {
        p.insert(name, Tensor::randn(shape, INIT_STD, rng))
    };
    fn zeros(p: &mut ParamSet, name: String, shape: Vec<usize>) -> Result<()> {
        p.insert(name, Tensor::zeros(shape))
    }
    fn ones(p: &mut ParamSet, name: String, shape: Vec<usize>) -> Result<()> {
        p.insert(name, Tensor::full(shape, 1.0))
    }

    // Vision tower.
    let patch_dim = v.patch_size * v.patch_size * 3;
    w(&mut p, "vit.patch_proj.w".into(), vec![patch_dim, v.width], &mut rng)?;
    zeros(&mut p, "vit.patch_proj.b".into(), vec![v.width])?;
    p.insert(
        "vit.pos",
        Tensor::randn(vec![v.grid(), v.grid(), v.width], INIT_STD, &mut rng),
    )?;
    for i in 0..v.depth {
        let pre = format!("vit.block{i}");
        ones(&mut p, format!("{pre}.ln1.g"), vec![v.width])?;
        zeros(&mut p, format!("{pre}.ln1.b"), vec![v.width])?;
        for side in ["wq", "wk", "wv", "wo"] {
            w(&mut p, format!("{pre}.attn.{side}"), vec![v.width, v.width], &mut rng)?;
        }
        for side in ["bq", "bk", "bv", "bo"] {
            zeros(&mut p, format!("{pre}.attn.{side}"), vec![v.width])?;
        }
        ones(&mut p, format!("{pre}.ln2.g"), vec![v.width])?;
        zeros(&mut p, format!("{pre}.ln2.b"), vec![v.width])?;
        w(&mut p, format!("{pre}.mlp.w1"), vec![v.width, v.mlp_dim], &mut rng)?;
        zeros(&mut p, format!("{pre}.mlp.b1"), vec![v.mlp_dim])?;
        w(&mut p, format!("{pre}.mlp.w2"), vec![v.mlp_dim, v.width], &mut rng)?;
        zeros(&mut p, format!("{pre}.mlp.b2"), vec![v.width])?;
    }
    ones(&mut p, "vit.ln_f.g".into(), vec![v.width])?;
    zeros(&mut p, "vit.ln_f.b".into(), vec![v.width])?;

    // Visual-token projector into the text model's space. Not under "vit." on
    // purpose: it trains during phase 1 while the tower is frozen.
    w(&mut p, "proj.w".into(), vec![v.width, e.d_model], &mut rng)?;
    zeros(&mut p, "proj.b".into(), vec![e.d_model])?;

    // Text encoder-decoder.
    w(&mut p, "encdec.embed".into(), vec![e.vocab_size, e.d_model], &mut rng)?;
    zeros(&mut p, "encdec.enc.relbias".into(), vec![e.rel_buckets, e.heads])?;
    zeros(&mut p, "encdec.dec.relbias".into(), vec![e.rel_buckets, e.heads])?;
    for i in 0..e.enc_layers {
        let pre = format!("encdec.enc.block{i}");
        ones(&mut p, format!("{pre}.ln1.g"), vec![e.d_model])?;
        zeros(&mut p, format!("{pre}.ln1.b"), vec![e.d_model])?;
        for side in ["wq", "wk", "wv", "wo"] {
            w(&mut p, format!("{pre}.attn.{side}"), vec![e.d_model, e.d_model], &mut rng)?;
        }
        for side in ["bq", "bk", "bv", "bo"] {
            zeros(&mut p, format!("{pre}.attn.{side}"), vec![e.d_model])?;
        }
        ones(&mut p, format!("{pre}.ln2.g"), vec![e.d_model])?;
        zeros(&mut p, format!("{pre}.ln2.b"), vec![e.d_model])?;
        w(&mut p, format!("{pre}.mlp.w1"), vec![e.d_model, e.ffn_dim], &mut rng)?;
        zeros(&mut p, format!("{pre}.mlp.b1"), vec![e.ffn_dim])?;
        w(&mut p, format!("{pre}.mlp.w2"), vec![e.ffn_dim, e.d_model], &mut rng)?;
        zeros(&mut p, format!("{pre}.mlp.b2"), vec![e.d_model])?;
    }
    ones(&mut p, "encdec.enc.ln_f.g".into(), vec![e.d_model])?;
    zeros(&mut p, "encdec.enc.ln_f.b".into(), vec![e.d_model])?;
    for i in 0..e.dec_layers {
        let pre = format!("encdec.dec.block{i}");
        ones(&mut p, format!("{pre}.ln1.g"), vec![e.d_model])?;
        zeros(&mut p, format!("{pre}.ln1.b"), vec![e.d_model])?;
        for side in ["wq", "wk", "wv", "wo"] {
            w(&mut p, format!("{pre}.attn.{side}"), vec![e.d_model, e.d_model], &mut rng)?;
        }
        for side in ["bq", "bk", "bv", "bo"] {
            zeros(&mut p, format!("{pre}.attn.{side}"), vec![e.d_model])?;
        }
        ones(&mut p, format!("{pre}.ln2.g"), vec![e.d_model])?;
        zeros(&mut p, format!("{pre}.ln2.b"), vec![e.d_model])?;
        for side in ["wq", "wk", "wv", "wo"] {
            w(&mut p, format!("{pre}.cross.{side}"), vec![e.d_model, e.d_model], &mut rng)?;
        }
        for side in ["bq", "bk", "bv", "bo"] {
            zeros(&mut p, format!("{pre}.cross.{side}"), vec![e.d_model])?;
        }
        ones(&mut p, format!("{pre}.ln3.g"), vec![e.d_model])?;
        zeros(&mut p, format!("{pre}.ln3.b"), vec![e.d_model])?;
        w(&mut p, format!("{pre}.mlp.w1"), vec![e.d_model, e.ffn_dim], &mut rng)?;
        zeros(&mut p, format!("{pre}.mlp.b1"), vec![e.ffn_dim])?;
        w(&mut p, format!("{pre}.mlp.w2"), vec![e.ffn_dim, e.d_model], &mut rng)?;
        zeros(&mut p, format!("{pre}.mlp.b2"), vec![e.d_model])?;
    }
    ones(&mut p, "encdec.dec.ln_f.g".into(), vec![e.d_model])?;
    zeros(&mut p, "encdec.dec.ln_f.b".into(), vec![e.d_model])?;
    w(&mut p, "encdec.out.w".into(), vec![e.d_model, e.vocab_size], &mut rng)?;

    Ok(p)
}

// ── Tests ───────────────────────────────────────────────────────────────────
