//! Corpus builder: procedural scenes are quality-filtered, near-deduplicated
//! against the held-out eval images, assigned one task each from the weighted
//! mixture, and written out as a jsonl record stream plus lossless PNG images
//! and a manifest of per-task/per-language counts.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::dedup::{ahash64, keep_non_duplicates, DEDUP_THRESHOLD};
use crate::error::{Error, Result};
use crate::filter::{keep_indices, pair_score};
use crate::resize::bilinear_resize_grid;
use crate::scene::{alt_text, render_scene, SceneSpec, LANGUAGES};
use crate::tasks::{gen_example, gen_vqa, sample_mixture, validate_example, MixtureSpec, Task, TaskText};
use crate::tensor::Tensor;

// ── Seed streams ────────────────────────────────────────────────────────────

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

const STREAM_TRAIN: u64 = 0;
const STREAM_EVAL_CAP: u64 = 1;
const STREAM_EVAL_VQA: u64 = 2;
const STREAM_TASKS: u64 = 3;
const TASK_TEXT_TAG: u64 = 0xA5A5_5A5A_0F0F_F0F0;

/// Scene seed for (root seed, stream, index): streams and indices map to
/// distinct seeds because splitmix64 is a bijection.
pub fn scene_seed(root: u64, stream: u64, index: u64) -> u64 {
    splitmix64(root ^ splitmix64((stream << 40).wrapping_add(index)))
}

// ── Record types ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub seed: u64,
    pub task: Task,
    pub language: String,
    pub input_text: String,
    pub target_text: String,
    pub image_ref: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub image_ref: String,
    pub input_text: String,
    pub gold: String,
    pub task: Task,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub seed: u64,
    pub num_scenes: usize,
    pub resolution: usize,
    pub keep_fraction: f64,
    pub records: usize,
    pub filtered_out: usize,
    pub dedup_removed: usize,
    pub eval_records_per_split: usize,
    pub per_task: BTreeMap<String, usize>,
    pub per_language: BTreeMap<String, usize>,
}

#[derive(Debug, Clone)]
pub struct CorpusConfig {
    pub seed: u64,
    pub num_scenes: usize,
    pub resolution: usize,
    pub keep_fraction: f64,
    pub eval_records: usize,
    pub threads: usize,
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let field = |f: &str, d: String| Error::InvalidConfig { field: f.into(), detail: d };
        if self.num_scenes == 0 {
            return Err(field("corpus.num_scenes", "must be at least 1".into()));
        }
        if self.resolution < 8 {
            return Err(field(
                "corpus.resolution",
                format!("{} is below the 8px dedup-hash minimum", self.resolution),
            ));
        }
        if !(self.keep_fraction > 0.0 && self.keep_fraction <= 1.0) {
            return Err(field(
                "corpus.keep_fraction",
                format!("{} outside (0,1]", self.keep_fraction),
            ));
        }
        if self.eval_records == 0 {
            return Err(field("corpus.eval_records", "must be at least 1".into()));
        }
        if self.threads == 0 {
            return Err(field("corpus.threads", "must be at least 1".into()));
        }
        Ok(())
    }
}

/// Everything the builder produces, before any file I/O.
#[derive(Debug, Clone, PartialEq)]
pub struct BuiltCorpus {
    pub manifest: CorpusManifest,
    pub records: Vec<CorpusRecord>,
    pub eval_caption: Vec<EvalRecord>,
    pub eval_vqa: Vec<EvalRecord>,
    /// Scene specs backing `records`, index-aligned.
    pub scenes: Vec<SceneSpec>,
    /// Scene specs backing the two eval splits, caption first.
    pub eval_scenes: Vec<SceneSpec>,
}

// ── Rendering ───────────────────────────────────────────────────────────────

/// Render every scene at `resolution`. With `threads > 1` the work is split
/// into contiguous chunks; output order is index order regardless of
/// scheduling, so the result is scheduling-independent.
pub fn render_all(specs: &[SceneSpec], resolution: usize, threads: usize) -> Result<Vec<Tensor>> {
    if threads <= 1 || specs.len() <= 1 {
        return specs.iter().map(|s| render_scene(s, resolution)).collect();
    }
    let chunk = specs.len().div_ceil(threads);
    let mut out: Vec<Option<Result<Tensor>>> = (0..specs.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        for (spec_chunk, out_chunk) in specs.chunks(chunk).zip(out.chunks_mut(chunk)) {
            scope.spawn(move || {
                for (sp, slot) in spec_chunk.iter().zip(out_chunk.iter_mut()) {
                    *slot = Some(render_scene(sp, resolution));
                }
            });
        }
    });
    out.into_iter().map(|o| o.expect("every slot rendered")).collect()
}

// ── Building ────────────────────────────────────────────────────────────────

fn image_ref_for(seed: u64) -> String {
    format!("images/{seed:016x}.png")
}

/// Task-text RNG tied to the scene seed alone, so an example's text depends
/// only on (scene, task), not on corpus position.
fn example_rng(scene_seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(scene_seed ^ TASK_TEXT_TAG))
}

pub fn build_corpus(cfg: &CorpusConfig) -> Result<BuiltCorpus> {
    cfg.validate()?;

    // Held-out eval scenes come from their own seed streams.
    let eval_cap_scenes: Vec<SceneSpec> = (0..cfg.eval_records)
        .map(|i| SceneSpec::generate(scene_seed(cfg.seed, STREAM_EVAL_CAP, i as u64)))
        .collect();
    let eval_vqa_scenes: Vec<SceneSpec> = (0..cfg.eval_records)
        .map(|i| SceneSpec::generate(scene_seed(cfg.seed, STREAM_EVAL_VQA, i as u64)))
        .collect();

    // Candidate training scenes, quality-filtered on image/caption cosine.
    let candidates: Vec<SceneSpec> = (0..cfg.num_scenes)
        .map(|i| SceneSpec::generate(scene_seed(cfg.seed, STREAM_TRAIN, i as u64)))
        .collect();
    let scores: Vec<f64> = candidates.iter().map(|s| pair_score(s, &alt_text(s))).collect();
    let kept = keep_indices(&scores, cfg.keep_fraction)?;
    let filtered_out = candidates.len() - kept.len();
    let survivors: Vec<SceneSpec> = kept.into_iter().map(|i| candidates[i].clone()).collect();

    // Near-dedup against the eval images.
    let eval_scenes: Vec<SceneSpec> =
        eval_cap_scenes.iter().chain(&eval_vqa_scenes).cloned().collect();
    let eval_images = render_all(&eval_scenes, cfg.resolution, cfg.threads)?;
    let eval_hashes: Vec<u64> =
        eval_images.iter().map(ahash64).collect::<Result<_>>()?;
    let survivor_images = render_all(&survivors, cfg.resolution, cfg.threads)?;
    let survivor_hashes: Vec<u64> =
        survivor_images.iter().map(ahash64).collect::<Result<_>>()?;
    let non_dup = keep_non_duplicates(&survivor_hashes, &eval_hashes, DEDUP_THRESHOLD);
    let dedup_removed = survivors.len() - non_dup.len();
    let scenes: Vec<SceneSpec> = non_dup.into_iter().map(|i| survivors[i].clone()).collect();

    // One example per scene; tasks from the weighted mixture. OCR needs
    // glyphs, so glyphless scenes drawn for OCR fall back to captioning.
    let mixture = MixtureSpec::pretrain();
    let mut task_rng = ChaCha8Rng::seed_from_u64(scene_seed(cfg.seed, STREAM_TASKS, 0));
    let mut records = Vec::with_capacity(scenes.len());
    for scene in &scenes {
        let drawn = sample_mixture(&mixture, &mut task_rng);
        let task = if drawn == Task::Ocr && scene.glyphs.is_empty() { Task::Cap } else { drawn };
        let text = gen_example(scene, task, &mut example_rng(scene.seed), cfg.resolution)?;
        validate_example(scene, task, &text, cfg.resolution)?;
        records.push(CorpusRecord {
            seed: scene.seed,
            task,
            language: LANGUAGES[scene.language].to_string(),
            input_text: text.input,
            target_text: text.target,
            image_ref: image_ref_for(scene.seed),
        });
    }

    let eval_caption: Vec<EvalRecord> = eval_cap_scenes
        .iter()
        .enumerate()
        .map(|(i, scene)| {
            let lang = LANGUAGES[scene.language];
            EvalRecord {
                id: format!("cap-{i:05}"),
                image_ref: image_ref_for(scene.seed),
                input_text: format!("Generate the alt_text in {lang} at 0: <extra_id_0>"),
                gold: alt_text(scene),
                task: Task::Cap,
            }
        })
        .collect();
    let eval_vqa: Vec<EvalRecord> = eval_vqa_scenes
        .iter()
        .enumerate()
        .map(|(i, scene)| {
            let text: TaskText = gen_vqa(scene, &mut example_rng(scene.seed))?;
            Ok(EvalRecord {
                id: format!("vqa-{i:05}"),
                image_ref: image_ref_for(scene.seed),
                input_text: text.input,
                gold: text.target,
                task: Task::Vqa,
            })
        })
        .collect::<Result<_>>()?;

    let mut per_task = BTreeMap::new();
    let mut per_language = BTreeMap::new();
    for r in &records {
        *per_task.entry(r.task.name().to_string()).or_insert(0) += 1;
        *per_language.entry(r.language.clone()).or_insert(0) += 1;
    }
    let manifest = CorpusManifest {
        seed: cfg.seed,
        num_scenes: cfg.num_scenes,
        resolution: cfg.resolution,
        keep_fraction: cfg.keep_fraction,
        records: records.len(),
        filtered_out,
        dedup_removed,
        eval_records_per_split: cfg.eval_records,
        per_task,
        per_language,
    };
    Ok(BuiltCorpus { manifest, records, eval_caption, eval_vqa, scenes, eval_scenes })
}

// ── File I/O ────────────────────────────────────────────────────────────────

/// Save as 8-bit RGB PNG (values clamped to [0,1] and rounded to 1/255).
pub fn save_png(path: &Path, image: &Tensor) -> Result<()> {
    let dims = image.shape();
    if dims.len() != 3 || dims[2] != 3 {
        return Err(Error::InvalidArg {
            op: "save_png",
            detail: format!("expected [h,w,3], got {dims:?}"),
        });
    }
    let (h, w) = (dims[0], dims[1]);
    let bytes: Vec<u8> =
        image.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let buf = image::RgbImage::from_raw(w as u32, h as u32, bytes)
        .expect("byte buffer sized from tensor dims");
    buf.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::InvalidArg { op: "save_png", detail: other.to_string() },
    })
}

pub fn load_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::InvalidArg { op: "load_png", detail: other.to_string() },
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f64> = img.into_raw().into_iter().map(|b| b as f64 / 255.0).collect();
    Tensor::from_vec(vec![h, w, 3], data)
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    for row in rows {
        let line = serde_json::to_string(row)?;
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    std::io::BufReader::new(file)
        .lines()
        .filter(|l| !matches!(l, Ok(s) if s.trim().is_empty()))
        .map(|l| {
            let line = l.map_err(|e| Error::io(path, e))?;
            Ok(serde_json::from_str(&line)?)
        })
        .collect()
}

/// Build the corpus and write `corpus.jsonl`, `eval_caption.jsonl`,
/// `eval_vqa.jsonl`, `manifest.json`, and every referenced PNG under
/// `out_dir`.
pub fn write_corpus(cfg: &CorpusConfig, out_dir: &Path) -> Result<CorpusManifest> {
    let built = build_corpus(cfg)?;
    let images_dir = out_dir.join("images");
    std::fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;

    let all_scenes: Vec<&SceneSpec> = built.scenes.iter().chain(&built.eval_scenes).collect();
    let specs: Vec<SceneSpec> = all_scenes.iter().map(|s| (*s).clone()).collect();
    let images = render_all(&specs, cfg.resolution, cfg.threads)?;
    for (scene, img) in specs.iter().zip(&images) {
        save_png(&out_dir.join(image_ref_for(scene.seed)), img)?;
    }

    write_jsonl(&out_dir.join("corpus.jsonl"), &built.records)?;
    write_jsonl(&out_dir.join("eval_caption.jsonl"), &built.eval_caption)?;
    write_jsonl(&out_dir.join("eval_vqa.jsonl"), &built.eval_vqa)?;
    let manifest_path = out_dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&built.manifest)?;
    std::fs::write(&manifest_path, json + "\n").map_err(|e| Error::io(&manifest_path, e))?;
    Ok(built.manifest)
}

// ── Image store ─────────────────────────────────────────────────────────────

/// Loads referenced images from a corpus directory, caching per-resolution
/// resizes. A store can also be preloaded in memory for tests.
pub struct ImageStore {
    root: PathBuf,
    cache: std::cell::RefCell<std::collections::HashMap<(String, usize), Tensor>>,
}

impl ImageStore {
    pub fn open(root: impl Into<PathBuf>) -> ImageStore {
        ImageStore { root: root.into(), cache: Default::default() }
    }

    /// Pre-populate an entry (used by in-memory tests; `resolution` must
    /// match the tensor's height/width).
    pub fn preload(&self, image_ref: &str, image: Tensor) {
        let res = image.shape()[0];
        self.cache.borrow_mut().insert((image_ref.to_string(), res), image);
    }

    pub fn get(&self, image_ref: &str, resolution: usize) -> Result<Tensor> {
        let key = (image_ref.to_string(), resolution);
        if let Some(t) = self.cache.borrow().get(&key) {
            return Ok(t.clone());
        }
        let base_key = (image_ref.to_string(), 0);
        let cached = self.cache.borrow().get(&base_key).cloned();
        let base = match cached {
            Some(t) => t,
            None => {
                let t = load_png(&self.root.join(image_ref))?;
                self.cache.borrow_mut().insert(base_key, t.clone());
                t
            }
        };
        let resized = if base.shape()[0] == resolution && base.shape()[1] == resolution {
            base
        } else {
            bilinear_resize_grid(&base, resolution, resolution)?
        };
        self.cache.borrow_mut().insert(key, resized.clone());
        Ok(resized)
    }
}

// ── Tests ───────────────────────────────────────────────────────────────────
