//! Run configuration: one structured config file drives every pipeline
//! stage. Unset fields take documented defaults; the fully-defaulted
//! effective config is written next to each command's outputs and
//! revalidates cleanly.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use imtext_core::corpus::CorpusConfig;
use imtext_core::error::{Error, Result};
use imtext_core::model::{EncDecConfig, ModelConfig, ViTConfig};
use imtext_core::schedule::Schedule;
use imtext_core::tasks::{MixtureSpec, Task};
use imtext_core::trainer::PhaseConfig;

fn invalid(field: &str, detail: impl Into<String>) -> Error {
    Error::InvalidConfig { field: field.into(), detail: detail.into() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub model: ModelSection,
    pub corpus: CorpusSection,
    pub phases: Vec<PhaseSection>,
    pub finetune: FinetuneSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        RunConfig {
            seed: 42,
            output_dir: PathBuf::from("out"),
            model: ModelSection::default(),
            corpus: CorpusSection::default(),
            phases: vec![PhaseSection::phase1_default(), PhaseSection::phase2_default()],
            finetune: FinetuneSection::default(),
            eval: EvalSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Named preset; inline `vit`/`encdec` blocks override it wholesale.
    pub preset: String,
    pub vit: Option<ViTConfig>,
    pub encdec: Option<EncDecConfig>,
}

impl Default for ModelSection {
    fn default() -> ModelSection {
        ModelSection { preset: "pipeline".to_string(), vit: None, encdec: None }
    }
}

impl ModelSection {
    pub fn resolve(&self) -> Result<ModelConfig> {
        let mut cfg = match self.preset.as_str() {
            // Desk-scale defaults: small enough to pretrain in seconds,
            // large enough to memorize the toy corpus.
            "pipeline" => ModelConfig {
                vit: ViTConfig {
                    width: 32,
                    depth: 1,
                    mlp_dim: 64,
                    heads: 2,
                    patch_size: 14,
                    resolution: 28,
                },
                encdec: EncDecConfig {
                    d_model: 32,
                    enc_layers: 1,
                    dec_layers: 1,
                    heads: 2,
                    ffn_dim: 64,
                    vocab_size: 2048,
                    max_text_len: 128,
                    num_sentinels: 100,
                    rel_buckets: 16,
                    rel_max_distance: 32,
                },
            },
            "toy" => ModelConfig::toy(2048),
            other => {
                return Err(invalid(
                    "model.preset",
                    format!("unknown preset {other:?}; known: pipeline, toy"),
                ))
            }
        };
        if let Some(vit) = &self.vit {
            cfg.vit = vit.clone();
        }
        if let Some(encdec) = &self.encdec {
            cfg.encdec = encdec.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    /// Corpus directory, relative paths resolved under `output_dir`.
    pub dir: PathBuf,
    pub num_scenes: usize,
    pub resolution: usize,
    pub keep_fraction: f64,
    pub eval_records: usize,
    pub threads: usize,
}

impl Default for CorpusSection {
    fn default() -> CorpusSection {
        CorpusSection {
            dir: PathBuf::from("corpus"),
            num_scenes: 120,
            resolution: 56,
            keep_fraction: 0.5,
            eval_records: 6,
            threads: 1,
        }
    }
}

impl CorpusSection {
    pub fn resolved_dir(&self, output_dir: &Path) -> PathBuf {
        if self.dir.is_absolute() {
            self.dir.clone()
        } else {
            output_dir.join(&self.dir)
        }
    }

    pub fn to_corpus_config(&self, seed: u64) -> CorpusConfig {
        CorpusConfig {
            seed,
            num_scenes: self.num_scenes,
            resolution: self.resolution,
            keep_fraction: self.keep_fraction,
            eval_records: self.eval_records,
            threads: self.threads,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhaseSection {
    pub name: String,
    pub resolution: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub dropout: f64,
    pub frozen_prefixes: Vec<String>,
    /// "pretrain" (weighted mixture) or "uniform" over available tasks.
    pub mixture: String,
    /// "warmup_inv_sqrt" or "linear_to_zero".
    pub schedule: String,
    pub peak_lr: f64,
    pub warmup_steps: usize,
}

impl Default for PhaseSection {
    fn default() -> PhaseSection {
        PhaseSection::phase1_default()
    }
}

impl PhaseSection {
    pub fn phase1_default() -> PhaseSection {
        PhaseSection {
            name: "phase1".to_string(),
            resolution: 28,
            steps: 20,
            batch_size: 4,
            dropout: 0.0,
            frozen_prefixes: vec!["vit.".to_string()],
            mixture: "pretrain".to_string(),
            schedule: "warmup_inv_sqrt".to_string(),
            peak_lr: 0.01,
            warmup_steps: 5,
        }
    }

    pub fn phase2_default() -> PhaseSection {
        PhaseSection {
            name: "phase2".to_string(),
            resolution: 56,
            steps: 8,
            batch_size: 4,
            dropout: 0.1,
            frozen_prefixes: vec![],
            mixture: "uniform".to_string(),
            schedule: "warmup_inv_sqrt".to_string(),
            peak_lr: 0.005,
            warmup_steps: 2,
        }
    }

    pub fn to_phase_config(&self, index: usize) -> Result<PhaseConfig> {
        let field = |leaf: &str| format!("phases[{index}].{leaf}");
        let mixture = match self.mixture.as_str() {
            "pretrain" => MixtureSpec::pretrain(),
            "uniform" => MixtureSpec::uniform(&Task::ALL),
            other => {
                return Err(invalid(
                    &field("mixture"),
                    format!("unknown mixture {other:?}; known: pretrain, uniform"),
                ))
            }
        };
        let schedule = match self.schedule.as_str() {
            "warmup_inv_sqrt" => Schedule::warmup_inv_sqrt(self.warmup_steps, self.peak_lr),
            "linear_to_zero" => {
                Schedule::linear_to_zero(self.warmup_steps, self.peak_lr, self.steps)
            }
            other => {
                return Err(invalid(
                    &field("schedule"),
                    format!("unknown schedule {other:?}; known: warmup_inv_sqrt, linear_to_zero"),
                ))
            }
        };
        Ok(PhaseConfig {
            name: self.name.clone(),
            resolution: self.resolution,
            frozen_prefixes: self.frozen_prefixes.clone(),
            mixture,
            steps: self.steps,
            batch_size: self.batch_size,
            schedule,
            dropout: self.dropout,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSection {
    pub preset: String,
    pub steps_divisor: usize,
    pub batch_size: usize,
    pub resolution: usize,
}

impl Default for FinetuneSection {
    fn default() -> FinetuneSection {
        FinetuneSection {
            preset: "vqa-like".to_string(),
            steps_divisor: 1000,
            batch_size: 4,
            resolution: 56,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Splits to score; each must have an eval_{split}.jsonl in the corpus.
    pub splits: Vec<String>,
    /// Beam width; absent means greedy decoding.
    pub beam: Option<usize>,
}

impl Default for EvalSection {
    fn default() -> EvalSection {
        EvalSection { splits: vec!["caption".to_string(), "vqa".to_string()], beam: None }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| {
            invalid("config", format!("{}: {e}", path.display()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.resolve()?;
        self.corpus.to_corpus_config(self.seed).validate()?;
        if self.phases.len() != 2 {
            return Err(invalid(
                "phases",
                format!("pre-training needs exactly 2 phases, got {}", self.phases.len()),
            ));
        }
        let patch = self.model.resolve()?.vit.patch_size;
        for (i, section) in self.phases.iter().enumerate() {
            section.to_phase_config(i)?.validate(patch)?;
        }
        if self.finetune.steps_divisor == 0 {
            return Err(invalid("finetune.steps_divisor", "must be at least 1"));
        }
        if self.finetune.batch_size == 0 {
            return Err(invalid("finetune.batch_size", "must be at least 1"));
        }
        if self.finetune.resolution == 0 || self.finetune.resolution % patch != 0 {
            return Err(invalid(
                "finetune.resolution",
                format!("{} not divisible by patch size {patch}", self.finetune.resolution),
            ));
        }
        for split in &self.eval.splits {
            if split != "caption" && split != "vqa" {
                return Err(invalid(
                    "eval.splits",
                    format!("unknown split {split:?}; known: caption, vqa"),
                ));
            }
        }
        if self.eval.beam == Some(0) {
            return Err(invalid("eval.beam", "beam width must be at least 1"));
        }
        Ok(())
    }

    /// Write the fully-defaulted config next to a command's outputs.
    pub fn write_effective(&self, out_dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let path = out_dir.join("effective-config.json");
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

// ── Tests ───────────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_validates() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.phases[0].resolution, 28);
        assert_eq!(cfg.phases[1].resolution, 56);
        let model = cfg.model.resolve().unwrap();
        assert_eq!(model.vit.resolution, 28);
        assert_eq!(model.encdec.max_text_len, 128);
    }

    #[test]
    fn effective_config_round_trips() {
        let cfg = RunConfig::default();
        let dir = std::env::temp_dir().join("imtext-runconfig-test");
        let path = cfg.write_effective(&dir).unwrap();
        let back = RunConfig::load(&path).unwrap();
        assert_eq!(back, cfg);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn partial_config_takes_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"seed": 7}"#).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.corpus.num_scenes, 120);
        assert_eq!(cfg.phases.len(), 2);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_fields_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"sede": 7}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"corpus": {"scenes": 1}}"#).is_err());
    }

    #[test]
    fn invalid_fields_name_their_path() {
        let mut cfg = RunConfig::default();
        cfg.phases[1].schedule = "cosine".to_string();
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("phases[1].schedule"), "{err}");

        let mut cfg = RunConfig::default();
        cfg.model.preset = "huge".to_string();
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("model.preset"), "{err}");

        let mut cfg = RunConfig::default();
        cfg.finetune.resolution = 30;
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("finetune.resolution"), "{err}");

        let mut cfg = RunConfig::default();
        cfg.eval.splits = vec!["ocr".to_string()];
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("eval.splits"), "{err}");

        let mut cfg = RunConfig::default();
        cfg.phases.pop();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn inline_model_overrides_preset() {
        let mut cfg = RunConfig::default();
        cfg.model.vit = Some(ViTConfig {
            width: 16,
            depth: 1,
            mlp_dim: 32,
            heads: 2,
            patch_size: 14,
            resolution: 28,
        });
        let model = cfg.model.resolve().unwrap();
        assert_eq!(model.vit.width, 16);
        assert_eq!(model.encdec.d_model, 32);
    }

    #[test]
    fn corpus_dir_resolution() {
        let cfg = RunConfig::default();
        assert_eq!(
            cfg.corpus.resolved_dir(Path::new("/tmp/run")),
            PathBuf::from("/tmp/run/corpus")
        );
        let mut abs = cfg.clone();
        abs.corpus.dir = PathBuf::from("/data/corpus");
        assert_eq!(abs.corpus.resolved_dir(Path::new("/tmp/run")), PathBuf::from("/data/corpus"));
    }
}
