//! Training loops: batched teacher-forced cross-entropy with Adafactor, the
//! two-phase pre-training regimen (vision frozen at low resolution, then
//! everything trained at high resolution on a reduced equal-weight mixture),
//! and fine-tuning presets with linear-to-zero schedules.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adafactor::Adafactor;
use crate::checkpoint::Checkpoint;
use crate::corpus::{CorpusRecord, ImageStore};
use crate::error::{Error, Result};
use crate::model::{Model, PAD_ID};
use crate::schedule::Schedule;
use crate::tasks::{sample_mixture, MixtureSpec, Task};
use crate::tensor::Tensor;
use crate::tokenizer::Tokenizer;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

fn string_tag(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

// ── Batches ─────────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct TrainExample {
    pub image: Tensor,
    pub prompt: Vec<u32>,
    /// Target token ids, ending with EOS.
    pub target: Vec<u32>,
}

/// One structured metrics row per optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub tokens_seen: u64,
    pub phase: String,
}

/// One optimizer step over a batch: per-example tapes, gradients of the
/// batch token-mean loss accumulated in fixed parameter order, one Adafactor
/// update. Returns (mean loss per token, tokens in batch).
pub fn train_step(
    model: &mut Model,
    opt: &mut Adafactor,
    batch: &[TrainExample],
    lr: f64,
    dropout: f64,
    step_seed: u64,
) -> Result<(f64, usize)> {
    if batch.is_empty() {
        return Err(Error::InvalidArg { op: "train_step", detail: "empty batch".into() });
    }
    let res = model.cfg.vit.resolution;
    for (i, ex) in batch.iter().enumerate() {
        let s = ex.image.shape();
        if s.len() != 3 || s[0] != res || s[1] != res {
            return Err(Error::ShapeMismatch {
                op: "train_step",
                detail: format!("example {i}: image {s:?} but model expects [{res},{res},3]"),
            });
        }
    }
    let total_tokens: usize = batch
        .iter()
        .map(|ex| ex.target.iter().filter(|&&t| t != PAD_ID).count())
        .sum();
    if total_tokens == 0 {
        return Err(Error::InvalidArg { op: "train_step", detail: "no target tokens".into() });
    }

    let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
    let mut loss_total = 0.0;
    for (i, ex) in batch.iter().enumerate() {
        let mut fwd = model
            .forward()?
            .with_dropout(dropout, splitmix64(step_seed ^ (i as u64 + 1)));
        let (sum_var, _count) = fwd.loss_sum(&ex.image, &ex.prompt, &ex.target)?;
        loss_total += fwd.tape.value(sum_var).data()[0];
        let example_grads = fwd.tape.backward_seeded(sum_var, 1.0 / total_tokens as f64)?;
        for (name, g) in example_grads {
            match grads.entry(name) {
                std::collections::btree_map::Entry::Vacant(v) => {
                    v.insert(g);
                }
                std::collections::btree_map::Entry::Occupied(mut o) => {
                    let cur = o.get();
                    let summed = Tensor::from_vec(
                        cur.shape().to_vec(),
                        cur.data().iter().zip(g.data()).map(|(a, b)| a + b).collect(),
                    )?;
                    o.insert(summed);
                }
            }
        }
    }
    opt.update(&mut model.params, &grads, lr)?;
    Ok((loss_total / total_tokens as f64, total_tokens))
}

// ── Datasets ────────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct TrainItem {
    pub record: CorpusRecord,
    pub prompt: Vec<u32>,
    pub target: Vec<u32>,
}

/// Tokenized corpus records grouped by task, each group served cyclically.
#[derive(Debug, Clone)]
pub struct TrainSet {
    items: Vec<TrainItem>,
    groups: BTreeMap<Task, Vec<usize>>,
    cursors: BTreeMap<Task, usize>,
    pub skipped_too_long: usize,
    pub max_token_id: u32,
}

impl TrainSet {
    /// Tokenize and index records, dropping any whose prompt or target
    /// exceeds `max_text_len` tokens.
    pub fn load(records: Vec<CorpusRecord>, tok: &Tokenizer, max_text_len: usize) -> Result<TrainSet> {
        let mut items = Vec::new();
        let mut groups: BTreeMap<Task, Vec<usize>> = BTreeMap::new();
        let mut skipped = 0;
        let mut max_id = 0;
        for record in records {
            let prompt = tok.tokenize(&record.input_text);
            let target = tok.encode_target(&record.target_text);
            if prompt.len() > max_text_len || target.len() > max_text_len {
                skipped += 1;
                continue;
            }
            max_id = prompt.iter().chain(&target).copied().fold(max_id, u32::max);
            groups.entry(record.task).or_default().push(items.len());
            items.push(TrainItem { record, prompt, target });
        }
        if items.is_empty() {
            return Err(Error::Degenerate {
                op: "train_set",
                detail: format!("no records fit max_text_len {max_text_len} ({skipped} skipped)"),
            });
        }
        Ok(TrainSet {
            items,
            groups,
            cursors: BTreeMap::new(),
            skipped_too_long: skipped,
            max_token_id: max_id,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn available_tasks(&self) -> Vec<Task> {
        self.groups.keys().copied().collect()
    }

    pub fn items(&self) -> &[TrainItem] {
        &self.items
    }

    /// Next item of a task, cycling through that task's records in corpus
    /// order.
    pub fn take(&mut self, task: Task) -> Result<&TrainItem> {
        let group = self.groups.get(&task).ok_or_else(|| Error::InvalidArg {
            op: "train_set",
            detail: format!("no records for task {}", task.name()),
        })?;
        let cursor = self.cursors.entry(task).or_insert(0);
        let idx = group[*cursor % group.len()];
        *cursor += 1;
        Ok(&self.items[idx])
    }
}

/// Draw `batch_size` examples: task from the mixture, record from that
/// task's cyclic queue, image from the store at `resolution`.
pub fn assemble_batch(
    set: &mut TrainSet,
    store: &ImageStore,
    mixture: &MixtureSpec,
    rng: &mut ChaCha8Rng,
    batch_size: usize,
    resolution: usize,
) -> Result<Vec<TrainExample>> {
    let mut batch = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let task = sample_mixture(mixture, rng);
        let item = set.take(task)?;
        let image = store.get(&item.record.image_ref, resolution)?;
        batch.push(TrainExample { image, prompt: item.prompt.clone(), target: item.target.clone() });
    }
    Ok(batch)
}

// ── Phases ──────────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct PhaseConfig {
    pub name: String,
    pub resolution: usize,
    pub frozen_prefixes: Vec<String>,
    pub mixture: MixtureSpec,
    pub steps: usize,
    pub batch_size: usize,
    pub schedule: Schedule,
    pub dropout: f64,
}

impl PhaseConfig {
    pub fn validate(&self, patch_size: usize) -> Result<()> {
        let field = |f: &str, d: String| Error::InvalidConfig { field: f.into(), detail: d };
        if self.resolution == 0 || self.resolution % patch_size != 0 {
            return Err(field(
                "phase.resolution",
                format!("{} not divisible by patch size {patch_size}", self.resolution),
            ));
        }
        if self.steps == 0 {
            return Err(field("phase.steps", "must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(field("phase.batch_size", "must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(field("phase.dropout", format!("{} outside [0,1)", self.dropout)));
        }
        self.mixture.validate()?;
        self.schedule.validate()
    }
}

fn run_phase(
    model: &mut Model,
    opt: &mut Adafactor,
    set: &mut TrainSet,
    store: &ImageStore,
    phase: &PhaseConfig,
    seed: u64,
    global_step: &mut usize,
    tokens_seen: &mut u64,
    metrics: &mut Vec<StepMetrics>,
) -> Result<()> {
    let mixture = phase.mixture.restrict(&set.available_tasks())?;
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ string_tag(&phase.name)));
    for i in 0..phase.steps {
        let lr = phase.schedule.lr_at_step(i + 1);
        let batch =
            assemble_batch(set, store, &mixture, &mut rng, phase.batch_size, phase.resolution)?;
        let step_seed = splitmix64(seed ^ ((*global_step as u64) << 24) ^ string_tag(&phase.name));
        let (loss, tokens) = train_step(model, opt, &batch, lr, phase.dropout, step_seed)?;
        *global_step += 1;
        *tokens_seen += tokens as u64;
        metrics.push(StepMetrics {
            step: *global_step,
            lr,
            loss,
            tokens_seen: *tokens_seen,
            phase: phase.name.clone(),
        });
    }
    Ok(())
}

fn checkpoint_of(model: &Model, step: usize, opt: &Adafactor) -> Checkpoint {
    let mut ckpt = Checkpoint::new(model.cfg.clone(), step as u64, model.params.clone());
    ckpt.extra = opt.to_extra();
    ckpt
}

pub struct PretrainOutput {
    pub phase1: Checkpoint,
    pub phase2: Checkpoint,
    pub metrics: Vec<StepMetrics>,
}

/// Two-phase pre-training: phase 1 at low resolution with the vision tower
/// frozen, positional-embedding resize at the boundary, phase 2 with all
/// parameters trainable. The optimizer restarts fresh at the boundary (the
/// resized grid invalidates its accumulator shapes).
pub fn run_pretraining(
    mut model: Model,
    set: &mut TrainSet,
    store: &ImageStore,
    phase1: &PhaseConfig,
    phase2: &PhaseConfig,
    seed: u64,
) -> Result<PretrainOutput> {
    phase1.validate(model.cfg.vit.patch_size)?;
    phase2.validate(model.cfg.vit.patch_size)?;
    if phase2.resolution < phase1.resolution {
        return Err(Error::InvalidConfig {
            field: "phase.resolution".into(),
            detail: format!(
                "phase 2 resolution {} below phase 1 resolution {}",
                phase2.resolution, phase1.resolution
            ),
        });
    }
    if model.cfg.vit.resolution != phase1.resolution {
        return Err(Error::InvalidConfig {
            field: "phase.resolution".into(),
            detail: format!(
                "model initialized at {}, phase 1 expects {}",
                model.cfg.vit.resolution, phase1.resolution
            ),
        });
    }
    if set.max_token_id as usize >= model.cfg.encdec.vocab_size {
        return Err(Error::InvalidConfig {
            field: "encdec.vocab_size".into(),
            detail: format!(
                "corpus token id {} outside vocab {}",
                set.max_token_id, model.cfg.encdec.vocab_size
            ),
        });
    }

    let mut metrics = Vec::new();
    let mut global_step = 0;
    let mut tokens_seen = 0;

    model.params.freeze_by_prefix(&phase1.frozen_prefixes);
    let mut opt = Adafactor::new();
    run_phase(&mut model, &mut opt, set, store, phase1, seed, &mut global_step, &mut tokens_seen, &mut metrics)?;
    let ckpt1 = checkpoint_of(&model, global_step, &opt);

    model = model.resized(phase2.resolution)?;
    model.params.freeze_by_prefix(&phase2.frozen_prefixes);
    let mut opt = Adafactor::new();
    run_phase(&mut model, &mut opt, set, store, phase2, seed, &mut global_step, &mut tokens_seen, &mut metrics)?;
    let ckpt2 = checkpoint_of(&model, global_step, &opt);

    Ok(PretrainOutput { phase1: ckpt1, phase2: ckpt2, metrics })
}

// ── Fine-tuning ─────────────────────────────────────────────────────────────

pub const FINETUNE_WARMUP: usize = 1000;
pub const FINETUNE_DROPOUT: f64 = 0.1;

/// (name, full-scale steps, peak learning rate).
pub const FINETUNE_PRESETS: &[(&str, usize, f64)] =
    &[("coco-like", 20_000, 3e-5), ("vqa-like", 5_000, 1e-4)];

/// Resolve a preset to its schedule at a step-count divisor: linear decay to
/// zero over `steps/divisor`, warmup scaled the same way.
pub fn resolve_preset(name: &str, divisor: usize) -> Result<(Schedule, usize, f64)> {
    if divisor == 0 {
        return Err(Error::InvalidConfig {
            field: "finetune.steps_divisor".into(),
            detail: "must be at least 1".into(),
        });
    }
    let (_, base_steps, lr) = FINETUNE_PRESETS
        .iter()
        .find(|(n, _, _)| *n == name)
        .ok_or_else(|| Error::InvalidConfig {
            field: "finetune.preset".into(),
            detail: format!(
                "unknown preset {name:?}; known presets: {}",
                FINETUNE_PRESETS.iter().map(|(n, _, _)| *n).collect::<Vec<_>>().join(", ")
            ),
        })?;
    let steps = (base_steps / divisor).max(2);
    let warmup = (FINETUNE_WARMUP / divisor).clamp(1, steps - 1);
    Ok((Schedule::linear_to_zero(warmup, *lr, steps), steps, FINETUNE_DROPOUT))
}

/// Fine-tune all parameters on a dataset with a preset's schedule and
/// dropout. The model is resized first if the target resolution differs.
pub fn run_finetune(
    mut model: Model,
    set: &mut TrainSet,
    store: &ImageStore,
    preset: &str,
    divisor: usize,
    batch_size: usize,
    resolution: usize,
    seed: u64,
) -> Result<(Checkpoint, Vec<StepMetrics>)> {
    let (schedule, steps, dropout) = resolve_preset(preset, divisor)?;
    if model.cfg.vit.resolution != resolution {
        model = model.resized(resolution)?;
    }
    let phase = PhaseConfig {
        name: format!("finetune-{preset}"),
        resolution,
        frozen_prefixes: vec![],
        mixture: MixtureSpec::uniform(&set.available_tasks()),
        steps,
        batch_size,
        schedule,
        dropout,
    };
    phase.validate(model.cfg.vit.patch_size)?;
    if set.max_token_id as usize >= model.cfg.encdec.vocab_size {
        return Err(Error::InvalidConfig {
            field: "encdec.vocab_size".into(),
            detail: format!(
                "corpus token id {} outside vocab {}",
                set.max_token_id, model.cfg.encdec.vocab_size
            ),
        });
    }
    model.params.freeze_by_prefix(&[]);
    let mut opt = Adafactor::new();
    let mut metrics = Vec::new();
    let mut global_step = 0;
    let mut tokens_seen = 0;
    run_phase(&mut model, &mut opt, set, store, &phase, seed, &mut global_step, &mut tokens_seen, &mut metrics)?;
    Ok((checkpoint_of(&model, global_step, &opt), metrics))
}

// ── Tests ───────────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::ImageStore;
    use crate::model::{EncDecConfig, ModelConfig, ViTConfig};
    use crate::scene::{render_scene, SceneSpec, LANGUAGES};
    use crate::tasks::{gen_example, TaskText};
    use crate::tensor::Tensor;

    fn tiny_cfg(resolution: usize) -> ModelConfig {
        ModelConfig {
            vit: ViTConfig {
                width: 16,
                depth: 1,
                mlp_dim: 32,
                heads: 2,
                patch_size: 7,
                resolution,
            },
            encdec: EncDecConfig {
                d_model: 16,
                enc_layers: 1,
                dec_layers: 1,
                heads: 2,
                ffn_dim: 32,
                vocab_size: 2048,
                max_text_len: 64,
                num_sentinels: 100,
                rel_buckets: 8,
                rel_max_distance: 16,
            },
        }
    }

    fn tiny_model(seed: u64) -> Model {
        Model::init(tiny_cfg(14), seed).unwrap()
    }

    fn tiny_batch(tok: &Tokenizer, n: usize) -> Vec<TrainExample> {
        (0..n)
            .map(|i| {
                let spec = SceneSpec::generate(100 + i as u64);
                let text = gen_example(
                    &spec,
                    Task::Cap,
                    &mut ChaCha8Rng::seed_from_u64(i as u64),
                    14,
                )
                .unwrap();
                TrainExample {
                    image: render_scene(&spec, 14).unwrap(),
                    prompt: tok.tokenize(&text.input),
                    target: tok.encode_target(&text.target),
                }
            })
            .collect()
    }

    /// Records over a handful of scenes/tasks with a preloaded in-memory
    /// store at the given resolutions.
    fn tiny_corpus(resolutions: &[usize]) -> (Vec<CorpusRecord>, ImageStore) {
        let store = ImageStore::open("unused");
        let mut records = Vec::new();
        for i in 0..6u64 {
            let spec = SceneSpec::generate(200 + i);
            let task = if i % 2 == 0 { Task::Cap } else { Task::Vqa };
            let text: TaskText =
                gen_example(&spec, task, &mut ChaCha8Rng::seed_from_u64(i), 14).unwrap();
            let image_ref = format!("images/{:016x}.png", spec.seed);
            for &res in resolutions {
                store.preload(&image_ref, render_scene(&spec, res).unwrap());
            }
            records.push(CorpusRecord {
                seed: spec.seed,
                task,
                language: LANGUAGES[spec.language].to_string(),
                input_text: text.input,
                target_text: text.target,
                image_ref,
            });
        }
        (records, store)
    }

    #[test]
    fn overfit_smoke_on_fixed_batch() {
        let tok = Tokenizer::new();
        let mut model = tiny_model(7);
        let mut opt = Adafactor::new();
        let batch = tiny_batch(&tok, 2);
        let sched = Schedule::warmup_inv_sqrt(20, 0.05);
        let (initial, _) = train_step(&mut model, &mut opt, &batch, 0.0, 0.0, 1).unwrap();
        let mut last = initial;
        for i in 0..200 {
            let (loss, _) = train_step(
                &mut model,
                &mut opt,
                &batch,
                sched.lr_at_step(i + 1),
                0.0,
                2 + i as u64,
            )
            .unwrap();
            last = loss;
        }
        assert!(
            last < 0.1 * initial,
            "loss {initial} -> {last} did not overfit"
        );
    }

    #[test]
    fn frozen_prefixes_stay_bit_identical() {
        let tok = Tokenizer::new();
        let mut model = tiny_model(3);
        model.params.freeze_by_prefix(&["vit.".to_string()]);
        let before: Vec<(String, Tensor)> = model
            .params
            .iter()
            .filter(|(n, _)| n.starts_with("vit."))
            .map(|(n, p)| (n.to_string(), p.value.clone()))
            .collect();
        let encdec_before = model.params.get("encdec.embed").unwrap().value.clone();
        let mut opt = Adafactor::new();
        let batch = tiny_batch(&tok, 2);
        for i in 0..20 {
            train_step(&mut model, &mut opt, &batch, 0.01, 0.0, i).unwrap();
        }
        for (name, old) in &before {
            assert!(
                model.params.get(name).unwrap().value.bit_eq(old),
                "{name} moved while frozen"
            );
        }
        assert!(!model.params.get("encdec.embed").unwrap().value.bit_eq(&encdec_before));
    }

    #[test]
    fn unfrozen_vision_moves_within_one_step() {
        let tok = Tokenizer::new();
        let mut model = tiny_model(3);
        let before = model.params.get("vit.patch_proj.w").unwrap().value.clone();
        let mut opt = Adafactor::new();
        let batch = tiny_batch(&tok, 1);
        train_step(&mut model, &mut opt, &batch, 0.01, 0.0, 0).unwrap();
        assert!(!model.params.get("vit.patch_proj.w").unwrap().value.bit_eq(&before));
    }

    #[test]
    fn resolution_mismatch_is_rejected() {
        let tok = Tokenizer::new();
        let mut model = tiny_model(3);
        let mut batch = tiny_batch(&tok, 1);
        batch[0].image = Tensor::zeros(vec![28, 28, 3]);
        let mut opt = Adafactor::new();
        assert!(train_step(&mut model, &mut opt, &batch, 0.01, 0.0, 0).is_err());
        assert!(train_step(&mut model, &mut opt, &[], 0.01, 0.0, 0).is_err());
    }

    #[test]
    fn train_step_is_deterministic_with_dropout() {
        let tok = Tokenizer::new();
        let batch = tiny_batch(&tok, 2);
        let run = || {
            let mut model = tiny_model(11);
            let mut opt = Adafactor::new();
            for i in 0..5 {
                train_step(&mut model, &mut opt, &batch, 0.02, 0.1, 77 + i).unwrap();
            }
            model.params
        };
        assert!(run().bit_eq(&run()));
    }

    #[test]
    fn train_set_loads_groups_and_cycles() {
        let tok = Tokenizer::new();
        let (records, _) = tiny_corpus(&[14]);
        let mut set = TrainSet::load(records.clone(), &tok, 64).unwrap();
        assert_eq!(set.len(), 6);
        assert_eq!(set.available_tasks(), vec![Task::Cap, Task::Vqa]);
        assert_eq!(set.skipped_too_long, 0);
        // Cycling returns to the first cap record after the group wraps.
        let first = set.take(Task::Cap).unwrap().record.seed;
        let _ = set.take(Task::Cap).unwrap();
        let _ = set.take(Task::Cap).unwrap();
        assert_eq!(set.take(Task::Cap).unwrap().record.seed, first);
        assert!(set.take(Task::Det).is_err());
        // A tight length budget drops everything and errors.
        assert!(TrainSet::load(records, &tok, 1).is_err());
    }

    #[test]
    fn pretraining_two_phases_produce_loadable_checkpoints() {
        let tok = Tokenizer::new();
        let (records, store) = tiny_corpus(&[14, 28]);
        let mut set = TrainSet::load(records, &tok, 64).unwrap();
        let model = tiny_model(5);
        let phase1 = PhaseConfig {
            name: "phase1".into(),
            resolution: 14,
            frozen_prefixes: vec!["vit.".to_string()],
            mixture: MixtureSpec::pretrain(),
            steps: 3,
            batch_size: 2,
            schedule: Schedule::warmup_inv_sqrt(2, 0.01),
            dropout: 0.0,
        };
        let phase2 = PhaseConfig {
            name: "phase2".into(),
            resolution: 28,
            frozen_prefixes: vec![],
            mixture: MixtureSpec::uniform(&[Task::Ocr, Task::Cap, Task::Vqa]),
            steps: 2,
            batch_size: 2,
            schedule: Schedule::warmup_inv_sqrt(2, 0.01),
            dropout: 0.1,
        };
        let out = run_pretraining(model, &mut set, &store, &phase1, &phase2, 99).unwrap();
        assert_eq!(out.metrics.len(), 5);
        assert_eq!(out.metrics[0].phase, "phase1");
        assert_eq!(out.metrics[4].phase, "phase2");
        assert_eq!(out.metrics[4].step, 5);
        assert!(out.metrics.windows(2).all(|w| w[0].tokens_seen < w[1].tokens_seen));
        // Phase-1 checkpoint keeps the 14px grid, phase 2 the 28px grid.
        assert_eq!(out.phase1.config.vit.resolution, 14);
        assert_eq!(out.phase2.config.vit.resolution, 28);
        assert_eq!(out.phase1.params.get("vit.pos").unwrap().value.shape(), &[2, 2, 16]);
        assert_eq!(out.phase2.params.get("vit.pos").unwrap().value.shape(), &[4, 4, 16]);
        // Vision was frozen in phase 1 (init values) and trained in phase 2.
        let init = tiny_model(5);
        assert!(out
            .phase1
            .params
            .get("vit.patch_proj.w")
            .unwrap()
            .value
            .bit_eq(&init.params.get("vit.patch_proj.w").unwrap().value));
        assert!(!out
            .phase2
            .params
            .get("vit.patch_proj.w")
            .unwrap()
            .value
            .bit_eq(&init.params.get("vit.patch_proj.w").unwrap().value));
        // Round trip through the checkpoint file format.
        let dir = std::env::temp_dir().join("imtext-pretrain-test");
        std::fs::create_dir_all(&dir).unwrap();
        for (name, ckpt) in [("p1.ckpt", &out.phase1), ("p2.ckpt", &out.phase2)] {
            let path = dir.join(name);
            ckpt.save(&path).unwrap();
            let back = Checkpoint::load(&path).unwrap();
            assert!(back.params.bit_eq(&ckpt.params));
            assert!(back.extra.contains_key("opt.step"));
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn pretraining_is_deterministic() {
        let tok = Tokenizer::new();
        let run = || {
            let (records, store) = tiny_corpus(&[14]);
            let mut set = TrainSet::load(records, &tok, 64).unwrap();
            let model = tiny_model(5);
            let phase = |name: &str| PhaseConfig {
                name: name.into(),
                resolution: 14,
                frozen_prefixes: if name == "phase1" { vec!["vit.".to_string()] } else { vec![] },
                mixture: MixtureSpec::pretrain(),
                steps: 2,
                batch_size: 2,
                schedule: Schedule::warmup_inv_sqrt(2, 0.01),
                dropout: 0.05,
            };
            run_pretraining(model, &mut set, &store, &phase("phase1"), &phase("phase2"), 7).unwrap()
        };
        let a = run();
        let b = run();
        assert!(a.phase2.params.bit_eq(&b.phase2.params));
        assert_eq!(a.metrics, b.metrics);
    }

    #[test]
    fn phase_resolution_ordering_enforced() {
        let tok = Tokenizer::new();
        let (records, store) = tiny_corpus(&[14, 28]);
        let mut set = TrainSet::load(records, &tok, 64).unwrap();
        let model = Model::init(tiny_cfg(28), 5).unwrap();
        let mk = |res: usize| PhaseConfig {
            name: "p".into(),
            resolution: res,
            frozen_prefixes: vec![],
            mixture: MixtureSpec::pretrain(),
            steps: 1,
            batch_size: 1,
            schedule: Schedule::warmup_inv_sqrt(1, 0.01),
            dropout: 0.0,
        };
        assert!(run_pretraining(model, &mut set, &store, &mk(28), &mk(14), 0).is_err());
    }

    #[test]
    fn finetune_presets_resolve() {
        let (sched, steps, dropout) = resolve_preset("coco-like", 100).unwrap();
        assert_eq!(steps, 200);
        assert_eq!(sched.warmup_steps, 10);
        assert_eq!(sched.total_steps, 200);
        assert!((sched.peak_lr - 3e-5).abs() < 1e-18);
        assert_eq!(dropout, 0.1);
        let (sched, steps, _) = resolve_preset("vqa-like", 1).unwrap();
        assert_eq!(steps, 5000);
        assert!((sched.peak_lr - 1e-4).abs() < 1e-18);
        assert_eq!(sched.warmup_steps, 1000);
        let err = resolve_preset("unknown", 1).unwrap_err().to_string();
        assert!(err.contains("coco-like") && err.contains("vqa-like"), "{err}");
        assert!(resolve_preset("coco-like", 0).is_err());
    }

    #[test]
    fn finetune_runs_and_checkpoints() {
        let tok = Tokenizer::new();
        let (records, store) = tiny_corpus(&[14]);
        let mut set = TrainSet::load(records, &tok, 64).unwrap();
        let model = tiny_model(5);
        let (ckpt, metrics) =
            run_finetune(model, &mut set, &store, "vqa-like", 2500, 2, 14, 31).unwrap();
        assert_eq!(metrics.len(), 2);
        assert_eq!(ckpt.step, 2);
        assert!(metrics.iter().all(|m| m.phase == "finetune-vqa-like"));
    }

    #[test]
    fn metrics_rows_serialize_with_all_fields() {
        let row = StepMetrics { step: 3, lr: 0.01, loss: 2.5, tokens_seen: 120, phase: "phase1".into() };
        let json = serde_json::to_string(&row).unwrap();
        for key in ["step", "lr", "loss", "tokens_seen", "phase"] {
            assert!(json.contains(key));
        }
        let back: StepMetrics = serde_json::from_str(&json).unwrap();
        assert_eq!(back, row);
    }
}
