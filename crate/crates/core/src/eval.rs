//! Open-vocabulary generative evaluation: normalized exact-match accuracy
//! for question answering, consensus n-gram scoring for captions, and
//! decoder-scored zero-shot classification with top-k accuracy.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::cider::{cider_score, CiderConfig};
use crate::corpus::{EvalRecord, ImageStore};
use crate::error::{Error, Result};
use crate::model::generate::{beam, greedy, score_candidate};
use crate::model::Model;
use crate::tasks::Task;
use crate::tensor::Tensor;
use crate::tokenizer::Tokenizer;

/// Canonical answer form: lowercase, whitespace collapsed to single spaces,
/// trailing periods removed. Idempotent.
pub fn normalize_answer(s: &str) -> String {
    let collapsed = s.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ");
    collapsed.trim_end_matches('.').trim_end().to_string()
}

/// Fraction of predictions whose normalized form appears in the normalized
/// gold set for that record.
pub fn exact_match_accuracy(preds: &[String], golds: &[Vec<String>]) -> Result<f64> {
    if preds.len() != golds.len() {
        return Err(Error::ShapeMismatch {
            op: "exact_match",
            detail: format!("{} predictions vs {} gold sets", preds.len(), golds.len()),
        });
    }
    if preds.is_empty() {
        return Err(Error::Degenerate { op: "exact_match", detail: "no records".into() });
    }
    let hits = preds
        .iter()
        .zip(golds)
        .filter(|(p, gs)| {
            let p = normalize_answer(p);
            gs.iter().any(|g| normalize_answer(g) == p)
        })
        .count();
    Ok(hits as f64 / preds.len() as f64)
}

// ── Decoding-backed evaluation ──────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeMode {
    Greedy,
    Beam(usize),
}

impl DecodeMode {
    pub fn label(&self) -> String {
        match self {
            DecodeMode::Greedy => "greedy".to_string(),
            DecodeMode::Beam(k) => format!("beam{k}"),
        }
    }

    pub fn run(&self, model: &Model, image: &Tensor, prompt: &[u32], max_len: usize) -> Result<Vec<u32>> {
        match self {
            DecodeMode::Greedy => greedy(model, image, prompt, max_len),
            DecodeMode::Beam(k) => beam(model, image, prompt, *k, max_len),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub task: String,
    pub metric_name: String,
    pub value: f64,
    pub n_records: usize,
    pub decode_mode: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub id: String,
    pub prediction: String,
    pub gold: String,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    pub metrics: Metrics,
    pub predictions: Vec<PredictionRow>,
}

fn eval_task_name(task: Task) -> Result<&'static str> {
    match task {
        Task::Vqa => Ok("vqa"),
        Task::Cap => Ok("caption"),
        _ => Err(Error::InvalidArg {
            op: "evaluate",
            detail: format!("records of task {} have no evaluation protocol", task.name()),
        }),
    }
}

/// Score records against any predictor (the model-backed path, or an oracle
/// in tests): exact match for question answering, the consensus caption
/// metric (reported scale) for captions.
pub fn evaluate_with(
    records: &[EvalRecord],
    mut predict: impl FnMut(&EvalRecord) -> Result<String>,
    decode_mode: &str,
    seed: u64,
) -> Result<EvalOutcome> {
    if records.is_empty() {
        return Err(Error::Degenerate { op: "evaluate", detail: "no records".into() });
    }
    let task = records[0].task;
    if records.iter().any(|r| r.task != task) {
        return Err(Error::InvalidArg {
            op: "evaluate",
            detail: "records mix tasks; evaluate one task at a time".into(),
        });
    }
    let task_name = eval_task_name(task)?;

    let mut predictions = Vec::with_capacity(records.len());
    let mut preds = Vec::with_capacity(records.len());
    let mut golds = Vec::with_capacity(records.len());
    for record in records {
        let pred = predict(record)?;
        predictions.push(PredictionRow {
            id: record.id.clone(),
            prediction: pred.clone(),
            gold: record.gold.clone(),
            correct: normalize_answer(&pred) == normalize_answer(&record.gold),
        });
        preds.push(pred);
        golds.push(vec![record.gold.clone()]);
    }

    let (metric_name, value) = match task {
        Task::Vqa => ("exact_match", exact_match_accuracy(&preds, &golds)?),
        Task::Cap => ("cider", cider_score(&preds, &golds, &CiderConfig::default())?),
        _ => unreachable!(),
    };
    Ok(EvalOutcome {
        metrics: Metrics {
            task: task_name.to_string(),
            metric_name: metric_name.to_string(),
            value,
            n_records: records.len(),
            decode_mode: decode_mode.to_string(),
            seed,
        },
        predictions,
    })
}

/// Decode each record with the model and score.
pub fn evaluate(
    model: &Model,
    store: &ImageStore,
    records: &[EvalRecord],
    mode: DecodeMode,
    seed: u64,
) -> Result<EvalOutcome> {
    let tok = Tokenizer::new();
    let resolution = model.cfg.vit.resolution;
    let max_len = model.cfg.encdec.max_text_len - 1;
    evaluate_with(
        records,
        |record| {
            let prompt = tok.tokenize(&record.input_text);
            let image = store.get(&record.image_ref, resolution)?;
            let tokens = mode.run(model, &image, &prompt, max_len)?;
            Ok(tok.detokenize(&tokens))
        },
        &mode.label(),
        seed,
    )
}

// ── Zero-shot classification ────────────────────────────────────────────────

/// Default classification prompt: the captioning template for the first
/// alt-text segment in English.
pub const CLASSIFY_PROMPT: &str = "Generate the alt_text in en at 0: <extra_id_0>";

/// Rank classes by decoder log-probability of the candidate string built
/// from `candidate_template` (its `{}` replaced by the class name), scored
/// against the fixed prompt. Ties break lexicographically by class name.
pub fn zero_shot_classify(
    model: &Model,
    image: &Tensor,
    class_names: &[String],
    prompt: &str,
    candidate_template: &str,
) -> Result<Vec<(String, f64)>> {
    if class_names.is_empty() {
        return Err(Error::InvalidArg { op: "classify", detail: "no class names".into() });
    }
    let distinct: BTreeSet<&String> = class_names.iter().collect();
    if distinct.len() != class_names.len() {
        return Err(Error::InvalidArg {
            op: "classify",
            detail: "duplicate class names".into(),
        });
    }
    if !candidate_template.contains("{}") {
        return Err(Error::InvalidArg {
            op: "classify",
            detail: format!("candidate template {candidate_template:?} has no {{}} slot"),
        });
    }
    let tok = Tokenizer::new();
    let prompt_tokens = tok.tokenize(prompt);
    let mut ranked = Vec::with_capacity(class_names.len());
    for name in class_names {
        let candidate = candidate_template.replace("{}", name);
        let tokens = tok.encode_target(&candidate);
        let score = score_candidate(model, image, &prompt_tokens, &tokens)?;
        ranked.push((name.clone(), score));
    }
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(ranked)
}

/// Fraction of items whose gold class appears in the top `k` of its ranking.
pub fn top_k_accuracy(rankings: &[Vec<(String, f64)>], golds: &[String], k: usize) -> Result<f64> {
    if rankings.len() != golds.len() {
        return Err(Error::ShapeMismatch {
            op: "top_k",
            detail: format!("{} rankings vs {} golds", rankings.len(), golds.len()),
        });
    }
    if rankings.is_empty() || k == 0 {
        return Err(Error::Degenerate { op: "top_k", detail: "no rankings or k = 0".into() });
    }
    let hits = rankings
        .iter()
        .zip(golds)
        .filter(|(r, g)| r.iter().take(k).any(|(name, _)| name == *g))
        .count();
    Ok(hits as f64 / rankings.len() as f64)
}

pub struct ClassifyOutcome {
    pub top1: Metrics,
    pub top5: Metrics,
    pub predictions: Vec<PredictionRow>,
}

/// Classify each (image, gold class) item over a fixed class list and report
/// top-1 and top-5 accuracy.
pub fn evaluate_classify(
    model: &Model,
    store: &ImageStore,
    items: &[(String, String)],
    class_names: &[String],
    prompt: &str,
    candidate_template: &str,
    seed: u64,
) -> Result<ClassifyOutcome> {
    if items.is_empty() {
        return Err(Error::Degenerate { op: "classify", detail: "no items".into() });
    }
    let resolution = model.cfg.vit.resolution;
    let mut rankings = Vec::with_capacity(items.len());
    let mut golds = Vec::with_capacity(items.len());
    let mut predictions = Vec::with_capacity(items.len());
    for (i, (image_ref, gold)) in items.iter().enumerate() {
        let image = store.get(image_ref, resolution)?;
        let ranked = zero_shot_classify(model, &image, class_names, prompt, candidate_template)?;
        let top = ranked[0].0.clone();
        predictions.push(PredictionRow {
            id: format!("cls-{i:05}"),
            prediction: top.clone(),
            gold: gold.clone(),
            correct: top == *gold,
        });
        rankings.push(ranked);
        golds.push(gold.clone());
    }
    let mk = |metric_name: &str, value: f64| Metrics {
        task: "classify".to_string(),
        metric_name: metric_name.to_string(),
        value,
        n_records: items.len(),
        decode_mode: "score".to_string(),
        seed,
    };
    let top1 = top_k_accuracy(&rankings, &golds, 1)?;
    let top5 = top_k_accuracy(&rankings, &golds, 5.min(class_names.len()))?;
    Ok(ClassifyOutcome { top1: mk("top1", top1), top5: mk("top5", top5), predictions })
}

// ── Tests ───────────────────────────────────────────────────────────────────
