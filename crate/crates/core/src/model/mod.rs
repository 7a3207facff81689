//! The image-and-text to text model: a ViT tower whose output tokens are
//! projected and concatenated with embedded prompt text in front of a T5-style
//! encoder-decoder.

pub mod config;
pub mod encdec;
pub mod generate;
pub mod layers;
pub mod params;
pub mod vit;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::{Precision, Tensor};

pub use config::{EncDecConfig, ModelConfig, ViTConfig, EOS_ID, PAD_ID};
pub use encdec::Encoded;
pub use params::ParamSet;

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamSet,
}

impl Model {
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Model> {
        let params = params::init_params(&cfg, seed)?;
        Ok(Model { cfg, params })
    }

    /// Start a forward pass: fresh tape with all parameters bound.
    pub fn forward(&self) -> Result<Forward<'_>> {
        self.forward_at(Precision::F64)
    }

    pub fn forward_at(&self, precision: Precision) -> Result<Forward<'_>> {
        let mut tape = Tape::with_precision(precision);
        let vars = layers::ModelVars::bind(&mut tape, &self.params)?;
        Ok(Forward { model: self, tape, vars, trace: Vec::new(), drop: None })
    }

    /// Adapt to a new input resolution (bilinear positional-grid resize).
    pub fn resized(&self, new_resolution: usize) -> Result<Model> {
        let (params, vit_cfg) =
            vit::resize_positional_embeddings(&self.params, &self.cfg.vit, new_resolution)?;
        let mut cfg = self.cfg.clone();
        cfg.vit = vit_cfg;
        Ok(Model { cfg, params })
    }
}

/// One forward pass over one example. Owns the tape; every intermediate stays
/// addressable until the pass is dropped, which is what backward and the
/// attention-inspection tests need.
pub struct Forward<'m> {
    pub model: &'m Model,
    pub tape: Tape,
    vars: layers::ModelVars,
    /// (label, attention-probs var) for every head evaluated on this tape.
    pub trace: Vec<(String, Var)>,
    drop: Option<layers::DropCtx>,
}

impl<'m> Forward<'m> {
    /// Enable dropout for this pass (training only).
    pub fn with_dropout(mut self, rate: f64, seed: u64) -> Self {
        if rate > 0.0 {
            self.drop = Some(layers::DropCtx { rng: ChaCha8Rng::seed_from_u64(seed), rate });
        }
        self
    }

    /// Tower forward: image to `[n, width]` visual tokens.
    pub fn vit(&mut self, image: &Tensor) -> Result<Var> {
        vit::vit_forward(
            &mut self.tape,
            &self.vars,
            &mut self.trace,
            &self.model.cfg.vit,
            image,
            &mut self.drop,
        )
    }

    /// Image + prompt to encoder states.
    pub fn encode(&mut self, image: &Tensor, prompt: &[u32]) -> Result<Encoded> {
        let visual = self.vit(image)?;
        encdec::encode_multimodal(
            &mut self.tape,
            &self.vars,
            &mut self.trace,
            &self.model.cfg,
            visual,
            prompt,
            &mut self.drop,
        )
    }

    /// Teacher-forced logits `[len(targets), vocab]`; `targets` must end
    /// with EOS.
    pub fn teacher_logits(&mut self, enc: &Encoded, targets: &[u32]) -> Result<Var> {
        encdec::decode_teacher_forced(
            &mut self.tape,
            &self.vars,
            &mut self.trace,
            &self.model.cfg,
            enc,
            targets,
            &mut self.drop,
        )
    }

    /// Logits for continuing `prefix`: decoder run on [PAD; prefix], last row
    /// is the next-token distribution.
    pub fn prefix_logits(&mut self, enc: &Encoded, prefix: &[u32]) -> Result<Var> {
        let mut inputs = Vec::with_capacity(prefix.len() + 1);
        inputs.push(PAD_ID);
        inputs.extend_from_slice(prefix);
        encdec::decoder_forward(
            &mut self.tape,
            &self.vars,
            &mut self.trace,
            &self.model.cfg,
            enc,
            &inputs,
            &mut self.drop,
        )
    }

    /// Mean token cross-entropy of `targets` under the teacher-forced logits,
    /// ignoring PAD positions.
    pub fn loss(&mut self, image: &Tensor, prompt: &[u32], targets: &[u32]) -> Result<Var> {
        let enc = self.encode(image, prompt)?;
        let logits = self.teacher_logits(&enc, targets)?;
        let labels: Vec<i64> = targets.iter().map(|&t| t as i64).collect();
        self.tape.cross_entropy(logits, &labels, PAD_ID as i64)
    }

    /// Summed token cross-entropy plus the counted positions; building block
    /// for batch-level token means.
    pub fn loss_sum(&mut self, image: &Tensor, prompt: &[u32], targets: &[u32]) -> Result<(Var, usize)> {
        let enc = self.encode(image, prompt)?;
        let logits = self.teacher_logits(&enc, targets)?;
        let labels: Vec<i64> = targets.iter().map(|&t| t as i64).collect();
        let sum = self.tape.cross_entropy_sum(logits, &labels, PAD_ID as i64)?;
        Ok((sum, Tape::cross_entropy_count(&labels, PAD_ID as i64)))
    }
}
