//! `imtext`: build synthetic corpora, pre-train, fine-tune, soup, generate,
//! classify, and evaluate — every stage a pure function of (config, seed,
//! input files) when run single-threaded.

mod runconfig;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use imtext_core::checkpoint::Checkpoint;
use imtext_core::corpus::{load_png, read_jsonl, write_corpus, CorpusRecord, EvalRecord, ImageStore};
use imtext_core::error::{Error, ErrorCategory, Result};
use imtext_core::eval::{evaluate, zero_shot_classify, DecodeMode, CLASSIFY_PROMPT};
use imtext_core::model::generate::{beam, greedy};
use imtext_core::model::Model;
use imtext_core::resize::bilinear_resize_grid;
use imtext_core::soup::soup;
use imtext_core::tokenizer::Tokenizer;
use imtext_core::trainer::{run_finetune, run_pretraining, StepMetrics, TrainSet};

use runconfig::RunConfig;

#[derive(Parser)]
#[command(name = "imtext", version, about = "Image-and-text to text pipeline")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Config file; unset fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate scenes, filter, dedup against eval splits, write the corpus.
    BuildCorpus {
        #[command(flatten)]
        common: Common,
        /// Override the config's render thread count.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Two-phase pre-training on a built corpus.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Corpus directory (default: the config's corpus dir).
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Fine-tune a checkpoint with a named preset.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Starting checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Preset name (default: the config's finetune preset).
        #[arg(long)]
        preset: Option<String>,
        /// Divide the preset's step count (and warmup) by this.
        #[arg(long)]
        steps_divisor: Option<usize>,
        /// Training resolution (default: the config's finetune resolution).
        #[arg(long)]
        resolution: Option<usize>,
    },
    /// Average two or more checkpoints with identical manifests.
    Soup {
        /// Input checkpoints (at least two).
        #[arg(long, num_args = 2.., required = true)]
        inputs: Vec<PathBuf>,
        /// Output checkpoint path.
        #[arg(long)]
        out_file: PathBuf,
    },
    /// Decode text for one image and prompt.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input PNG; resized to the model's resolution if needed.
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        prompt: String,
        /// Beam width (default: greedy).
        #[arg(long)]
        beam: Option<usize>,
        /// Maximum generated tokens (default: the model's text budget).
        #[arg(long)]
        max_len: Option<usize>,
    },
    /// Rank class names by decoder log-probability for one image.
    Classify {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Comma-separated class names.
        #[arg(long, value_delimiter = ',', required = true)]
        classes: Vec<String>,
        /// Scoring prompt.
        #[arg(long, default_value = CLASSIFY_PROMPT)]
        prompt: String,
        /// Candidate template; `{}` is replaced by the class name.
        #[arg(long, default_value = "{}")]
        template: String,
    },
    /// Score a checkpoint on built eval splits.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Splits to score (default: the config's eval splits).
        #[arg(long)]
        split: Vec<String>,
        /// Beam width (default: greedy).
        #[arg(long)]
        beam: Option<usize>,
    },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    match dispatch(cli.cmd) {
        Ok(()) => {}
        Err(e) => {
            let (label, code) = match e.category() {
                ErrorCategory::MissingArtifact => ("missing-artifact", 2),
                ErrorCategory::InvalidConfig => ("invalid-config", 3),
                ErrorCategory::Numeric => ("numeric", 4),
                ErrorCategory::Runtime => ("runtime", 1),
            };
            eprintln!("error[{label}]: {e}");
            std::process::exit(code);
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::BuildCorpus { common, threads } => cmd_build_corpus(&common, threads),
        Cmd::Pretrain { common, corpus } => cmd_pretrain(&common, corpus),
        Cmd::Finetune { common, corpus, checkpoint, preset, steps_divisor, resolution } => {
            cmd_finetune(&common, corpus, &checkpoint, preset, steps_divisor, resolution)
        }
        Cmd::Soup { inputs, out_file } => cmd_soup(&inputs, &out_file),
        Cmd::Generate { checkpoint, image, prompt, beam, max_len } => {
            cmd_generate(&checkpoint, &image, &prompt, beam, max_len)
        }
        Cmd::Classify { checkpoint, image, classes, prompt, template } => {
            cmd_classify(&checkpoint, &image, &classes, &prompt, &template)
        }
        Cmd::Evaluate { common, corpus, checkpoint, split, beam } => {
            cmd_evaluate(&common, corpus, &checkpoint, &split, beam)
        }
    }
}

fn corpus_dir(cfg: &RunConfig, flag: Option<PathBuf>) -> PathBuf {
    flag.unwrap_or_else(|| cfg.corpus.resolved_dir(&cfg.output_dir))
}

fn require_dir(dir: &Path) -> Result<()> {
    if !dir.is_dir() {
        return Err(Error::MissingArtifact { path: dir.display().to_string() });
    }
    Ok(())
}

fn load_model(path: &Path) -> Result<(Model, Checkpoint)> {
    let ckpt = Checkpoint::load(path)?;
    let model = Model { cfg: ckpt.config.clone(), params: ckpt.params.clone() };
    Ok((model, ckpt))
}

fn load_train_set(dir: &Path, max_text_len: usize) -> Result<TrainSet> {
    require_dir(dir)?;
    let records: Vec<CorpusRecord> = read_jsonl(&dir.join("corpus.jsonl"))?;
    TrainSet::load(records, &Tokenizer::new(), max_text_len)
}

fn write_metrics_rows(path: &Path, rows: &[StepMetrics]) -> Result<()> {
    imtext_core::corpus::write_jsonl(path, rows)
}

fn decode_mode(beam_width: Option<usize>) -> DecodeMode {
    match beam_width {
        Some(k) => DecodeMode::Beam(k),
        None => DecodeMode::Greedy,
    }
}

fn load_image_at(path: &Path, resolution: usize) -> Result<imtext_core::Tensor> {
    let image = load_png(path)?;
    if image.shape()[0] == resolution && image.shape()[1] == resolution {
        Ok(image)
    } else {
        bilinear_resize_grid(&image, resolution, resolution)
    }
}

fn cmd_build_corpus(common: &Common, threads: Option<usize>) -> Result<()> {
    let cfg = common.load()?;
    let mut corpus_cfg = cfg.corpus.to_corpus_config(cfg.seed);
    if let Some(threads) = threads {
        corpus_cfg.threads = threads;
    }
    corpus_cfg.validate()?;
    let dir = cfg.corpus.resolved_dir(&cfg.output_dir);
    let manifest = write_corpus(&corpus_cfg, &dir)?;
    cfg.write_effective(&cfg.output_dir)?;
    println!(
        "corpus: {} records ({} filtered out, {} near-duplicates removed), \
         {} eval records per split, at {}",
        manifest.records,
        manifest.filtered_out,
        manifest.dedup_removed,
        manifest.eval_records_per_split,
        dir.display()
    );
    Ok(())
}

fn cmd_pretrain(common: &Common, corpus: Option<PathBuf>) -> Result<()> {
    let cfg = common.load()?;
    let dir = corpus_dir(&cfg, corpus);
    let model_cfg = cfg.model.resolve()?;
    let mut set = load_train_set(&dir, model_cfg.encdec.max_text_len)?;
    let store = ImageStore::open(&dir);
    let model = Model::init(model_cfg, cfg.seed)?;
    let phase1 = cfg.phases[0].to_phase_config(0)?;
    let phase2 = cfg.phases[1].to_phase_config(1)?;
    let out = run_pretraining(model, &mut set, &store, &phase1, &phase2, cfg.seed)?;

    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    out.phase1.save(&cfg.output_dir.join("phase1.ckpt"))?;
    out.phase2.save(&cfg.output_dir.join("phase2.ckpt"))?;
    write_metrics_rows(&cfg.output_dir.join("pretrain-metrics.jsonl"), &out.metrics)?;
    cfg.write_effective(&cfg.output_dir)?;
    let last = out.metrics.last().expect("phases have at least one step");
    println!(
        "pretrain: {} steps, final loss {:.6}, checkpoints at {}",
        last.step,
        last.loss,
        cfg.output_dir.display()
    );
    Ok(())
}

fn cmd_finetune(
    common: &Common,
    corpus: Option<PathBuf>,
    checkpoint: &Path,
    preset: Option<String>,
    steps_divisor: Option<usize>,
    resolution: Option<usize>,
) -> Result<()> {
    let cfg = common.load()?;
    let dir = corpus_dir(&cfg, corpus);
    let (model, _) = load_model(checkpoint)?;
    let mut set = load_train_set(&dir, model.cfg.encdec.max_text_len)?;
    let store = ImageStore::open(&dir);
    let preset = preset.unwrap_or_else(|| cfg.finetune.preset.clone());
    let divisor = steps_divisor.unwrap_or(cfg.finetune.steps_divisor);
    let resolution = resolution.unwrap_or(cfg.finetune.resolution);
    let (ckpt, metrics) = run_finetune(
        model,
        &mut set,
        &store,
        &preset,
        divisor,
        cfg.finetune.batch_size,
        resolution,
        cfg.seed,
    )?;

    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    ckpt.save(&cfg.output_dir.join("finetune.ckpt"))?;
    write_metrics_rows(&cfg.output_dir.join("finetune-metrics.jsonl"), &metrics)?;
    cfg.write_effective(&cfg.output_dir)?;
    let last = metrics.last().expect("finetune runs at least 2 steps");
    println!(
        "finetune[{preset}]: {} steps, final loss {:.6}, checkpoint at {}",
        last.step,
        last.loss,
        cfg.output_dir.join("finetune.ckpt").display()
    );
    Ok(())
}

fn cmd_soup(inputs: &[PathBuf], out_file: &Path) -> Result<()> {
    let checkpoints: Vec<Checkpoint> =
        inputs.iter().map(|p| Checkpoint::load(p)).collect::<Result<_>>()?;
    for (i, ckpt) in checkpoints.iter().enumerate().skip(1) {
        if ckpt.config != checkpoints[0].config {
            return Err(Error::InvalidArg {
                op: "soup",
                detail: format!(
                    "checkpoint {} has a different model config than {}",
                    inputs[i].display(),
                    inputs[0].display()
                ),
            });
        }
    }
    let sets: Vec<&imtext_core::model::ParamSet> =
        checkpoints.iter().map(|c| &c.params).collect();
    let averaged = soup(&sets)?;
    let step = checkpoints.iter().map(|c| c.step).max().unwrap_or(0);
    let out = Checkpoint::new(checkpoints[0].config.clone(), step, averaged);
    if let Some(parent) = out_file.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    out.save(out_file)?;
    println!("soup: averaged {} checkpoints into {}", inputs.len(), out_file.display());
    Ok(())
}

fn cmd_generate(
    checkpoint: &Path,
    image: &Path,
    prompt: &str,
    beam_width: Option<usize>,
    max_len: Option<usize>,
) -> Result<()> {
    let (model, _) = load_model(checkpoint)?;
    let image = load_image_at(image, model.cfg.vit.resolution)?;
    let tok = Tokenizer::new();
    let prompt_tokens = tok.tokenize(prompt);
    let max_len = max_len.unwrap_or(model.cfg.encdec.max_text_len - 1);
    let tokens = match beam_width {
        Some(k) => beam(&model, &image, &prompt_tokens, k, max_len)?,
        None => greedy(&model, &image, &prompt_tokens, max_len)?,
    };
    println!("{}", tok.detokenize(&tokens));
    Ok(())
}

fn cmd_classify(
    checkpoint: &Path,
    image: &Path,
    classes: &[String],
    prompt: &str,
    template: &str,
) -> Result<()> {
    let (model, _) = load_model(checkpoint)?;
    let image = load_image_at(image, model.cfg.vit.resolution)?;
    let ranked = zero_shot_classify(&model, &image, classes, prompt, template)?;
    for (name, score) in ranked {
        println!("{name}\t{score:.6}");
    }
    Ok(())
}

fn cmd_evaluate(
    common: &Common,
    corpus: Option<PathBuf>,
    checkpoint: &Path,
    splits: &[String],
    beam_width: Option<usize>,
) -> Result<()> {
    let cfg = common.load()?;
    let dir = corpus_dir(&cfg, corpus);
    require_dir(&dir)?;
    let (model, _) = load_model(checkpoint)?;
    let store = ImageStore::open(&dir);
    let splits: Vec<String> =
        if splits.is_empty() { cfg.eval.splits.clone() } else { splits.to_vec() };
    let beam_width = beam_width.or(cfg.eval.beam);
    let mode = decode_mode(beam_width);
    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    for split in &splits {
        if split != "caption" && split != "vqa" {
            return Err(Error::InvalidConfig {
                field: "eval.splits".into(),
                detail: format!("unknown split {split:?}; known: caption, vqa"),
            });
        }
        let records: Vec<EvalRecord> = read_jsonl(&dir.join(format!("eval_{split}.jsonl")))?;
        let outcome = evaluate(&model, &store, &records, mode, cfg.seed)?;
        let metrics_path = cfg.output_dir.join(format!("metrics-{split}.json"));
        let json = serde_json::to_string_pretty(&outcome.metrics)?;
        std::fs::write(&metrics_path, json + "\n").map_err(|e| Error::io(&metrics_path, e))?;
        imtext_core::corpus::write_jsonl(
            &cfg.output_dir.join(format!("predictions-{split}.jsonl")),
            &outcome.predictions,
        )?;
        println!(
            "evaluate[{split}]: {} = {:.6} over {} records ({})",
            outcome.metrics.metric_name,
            outcome.metrics.value,
            outcome.metrics.n_records,
            outcome.metrics.decode_mode
        );
    }
    cfg.write_effective(&cfg.output_dir)?;
    Ok(())
}
