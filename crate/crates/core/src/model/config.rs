//! Model hyperparameter structs and named presets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Vision transformer shape. `resolution` is the train-time input edge in
/// pixels; images are square.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViTConfig {
    /// Token width (1408 for g/14, 1664 for G/14, 1792 for e/14).
    pub width: usize,
    /// Transformer depth (40 / 48 / 56 for g/G/e).
    pub depth: usize,
    /// MLP hidden dim (6144 / 8192 / 15360).
    pub mlp_dim: usize,
    /// Attention heads (16 for all full-size variants).
    pub heads: usize,
    /// Square patch edge in pixels.
    pub patch_size: usize,
    /// Square input edge in pixels; must be a multiple of `patch_size`.
    pub resolution: usize,
}

impl ViTConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let (width, depth, mlp_dim, heads, patch_size, resolution) = match name {
            "g/14" => (1408, 40, 6144, 16, 14, 224),
            "G/14" => (1664, 48, 8192, 16, 14, 224),
            "e/14" => (1792, 56, 15360, 16, 14, 224),
            "toy" => (64, 2, 128, 4, 14, 56),
            _ => {
                return Err(Error::InvalidConfig {
                    field: "vit.preset".into(),
                    detail: format!("unknown preset {name:?}; known: g/14, G/14, e/14, toy"),
                })
            }
        };
        Ok(ViTConfig { width, depth, mlp_dim, heads, patch_size, resolution })
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.depth == 0 || self.mlp_dim == 0 || self.heads == 0 {
            return Err(Error::InvalidConfig {
                field: "vit".into(),
                detail: "all extents must be positive".into(),
            });
        }
        if self.width % self.heads != 0 {
            return Err(Error::InvalidConfig {
                field: "vit.heads".into(),
                detail: format!("width {} not divisible by heads {}", self.width, self.heads),
            });
        }
        if self.patch_size == 0 || self.resolution % self.patch_size != 0 {
            return Err(Error::InvalidConfig {
                field: "vit.resolution".into(),
                detail: format!(
                    "resolution {} not divisible by patch size {}",
                    self.resolution, self.patch_size
                ),
            });
        }
        Ok(())
    }

    /// Patch-grid edge length at the configured resolution.
    pub fn grid(&self) -> usize {
        self.resolution / self.patch_size
    }

    /// Visual token count.
    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }
}

/// Text encoder-decoder shape (T5-style, relative position biases on the
/// text side).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncDecConfig {
    pub d_model: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    /// Hard cap on text token counts (prompt and target separately).
    pub max_text_len: usize,
    /// Sentinel tokens reserved for span corruption.
    pub num_sentinels: usize,
    /// Relative-position bucket count.
    pub rel_buckets: usize,
    /// Offsets at or beyond this distance share the top log-spaced buckets.
    pub rel_max_distance: usize,
}

impl EncDecConfig {
    pub fn toy(vocab_size: usize) -> Self {
        EncDecConfig {
            d_model: 64,
            enc_layers: 2,
            dec_layers: 2,
            heads: 4,
            ffn_dim: 128,
            vocab_size,
            max_text_len: 64,
            num_sentinels: 100,
            rel_buckets: 32,
            rel_max_distance: 128,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0
            || self.enc_layers == 0
            || self.dec_layers == 0
            || self.heads == 0
            || self.ffn_dim == 0
            || self.max_text_len == 0
        {
            return Err(Error::InvalidConfig {
                field: "encdec".into(),
                detail: "all extents must be positive".into(),
            });
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::InvalidConfig {
                field: "encdec.heads".into(),
                detail: format!("d_model {} not divisible by heads {}", self.d_model, self.heads),
            });
        }
        // pad and eos are always present on top of the sentinels.
        if self.vocab_size <= self.num_sentinels + 2 {
            return Err(Error::InvalidConfig {
                field: "encdec.vocab_size".into(),
                detail: format!(
                    "vocab {} must exceed sentinels {} + specials 2",
                    self.vocab_size, self.num_sentinels
                ),
            });
        }
        if self.rel_buckets < 2 || self.rel_max_distance < 2 {
            return Err(Error::InvalidConfig {
                field: "encdec.rel_buckets".into(),
                detail: "need at least 2 buckets and max distance >= 2".into(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vit: ViTConfig,
    pub encdec: EncDecConfig,
}

impl ModelConfig {
    /// Small configuration used throughout the tests: toy ViT on 56px inputs
    /// feeding a 2+2-layer encoder-decoder.
    pub fn toy(vocab_size: usize) -> Self {
        ModelConfig {
            vit: ViTConfig::preset("toy").expect("toy preset"),
            encdec: EncDecConfig::toy(vocab_size),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        self.encdec.validate()
    }
}

pub const PAD_ID: u32 = 0;
pub const EOS_ID: u32 = 1;

// ── Tests ───────────────────────────────────────────────────────────────────
