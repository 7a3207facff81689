//! Consensus-based caption scoring: clipped TF-IDF n-gram cosine similarity
//! with a gaussian length penalty, averaged over n-gram orders and reference
//! sets. Document frequencies come from the reference corpus itself, so a
//! single-document corpus is rejected as degenerate.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::eval::normalize_answer;

#[derive(Debug, Clone, PartialEq)]
pub struct CiderConfig {
    pub max_n: usize,
    pub sigma: f64,
    /// Multiplier applied to the raw [0,10] score for reporting.
    pub report_scale: f64,
}

impl Default for CiderConfig {
    fn default() -> CiderConfig {
        CiderConfig { max_n: 4, sigma: 6.0, report_scale: 100.0 }
    }
}

impl CiderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_n == 0 {
            return Err(Error::InvalidConfig {
                field: "cider.max_n".into(),
                detail: "must be at least 1".into(),
            });
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidConfig {
                field: "cider.sigma".into(),
                detail: format!("{} not a positive real", self.sigma),
            });
        }
        if !(self.report_scale > 0.0 && self.report_scale.is_finite()) {
            return Err(Error::InvalidConfig {
                field: "cider.report_scale".into(),
                detail: format!("{} not a positive real", self.report_scale),
            });
        }
        Ok(())
    }
}

fn tokenize(s: &str) -> Vec<String> {
    normalize_answer(s).split_whitespace().map(str::to_string).collect()
}

type NgramMap = BTreeMap<Vec<String>, f64>;

fn ngram_counts(tokens: &[String], max_n: usize) -> Vec<NgramMap> {
    (1..=max_n)
        .map(|n| {
            let mut m = NgramMap::new();
            if tokens.len() >= n {
                for w in tokens.windows(n) {
                    *m.entry(w.to_vec()).or_insert(0.0) += 1.0;
                }
            }
            m
        })
        .collect()
}

struct TfIdf {
    vecs: Vec<NgramMap>,
    normsq: Vec<f64>,
    len: usize,
}

fn tfidf(tokens: &[String], df: &[NgramMap], n_docs: f64, max_n: usize) -> TfIdf {
    let mut vecs = Vec::with_capacity(max_n);
    let mut normsq = Vec::with_capacity(max_n);
    for (n, counts) in ngram_counts(tokens, max_n).into_iter().enumerate() {
        let mut vec = NgramMap::new();
        let mut nsq = 0.0;
        for (gram, count) in counts {
            let idf = n_docs.ln() - df[n].get(&gram).copied().unwrap_or(0.0).max(1.0).ln();
            let w = count * idf;
            nsq += w * w;
            vec.insert(gram, w);
        }
        vecs.push(vec);
        normsq.push(nsq);
    }
    TfIdf { vecs, normsq, len: tokens.len() }
}

/// Mean over n of clipped-cosine × length penalty. Self-similarity is
/// exactly 1: numerator and both squared norms accumulate the identical
/// term sequence, and IEEE sqrt(x·x) == x.
fn similarity(c: &TfIdf, r: &TfIdf, cfg: &CiderConfig) -> f64 {
    let delta = c.len as f64 - r.len as f64;
    let penalty = (-(delta * delta) / (2.0 * cfg.sigma * cfg.sigma)).exp();
    let mut total = 0.0;
    for n in 0..cfg.max_n {
        if c.normsq[n] == 0.0 || r.normsq[n] == 0.0 {
            continue;
        }
        let mut num = 0.0;
        for (gram, &cw) in &c.vecs[n] {
            if let Some(&rw) = r.vecs[n].get(gram) {
                num += cw.min(rw) * rw;
            }
        }
        total += num / (c.normsq[n] * r.normsq[n]).sqrt() * penalty;
    }
    total / cfg.max_n as f64
}

/// Corpus-level score on the raw [0, 10] scale: per candidate, similarity
/// against each of its references averaged, ×10; then the mean over
/// candidates. `references[i]` is the reference set for `candidates[i]`.
pub fn cider_score_raw(
    candidates: &[String],
    references: &[Vec<String>],
    cfg: &CiderConfig,
) -> Result<f64> {
    cfg.validate()?;
    if candidates.len() != references.len() {
        return Err(Error::ShapeMismatch {
            op: "cider",
            detail: format!("{} candidates vs {} reference sets", candidates.len(), references.len()),
        });
    }
    if references.len() < 2 {
        return Err(Error::Degenerate {
            op: "cider",
            detail: format!(
                "corpus has {} document(s); IDF over a corpus of fewer than 2 documents \
                 collapses to ln(1) = 0, zeroing every weight",
                references.len()
            ),
        });
    }
    for (i, refs) in references.iter().enumerate() {
        if refs.is_empty() {
            return Err(Error::InvalidArg {
                op: "cider",
                detail: format!("reference set {i} is empty"),
            });
        }
    }

    let n_docs = references.len() as f64;
    let ref_tokens: Vec<Vec<Vec<String>>> = references
        .iter()
        .map(|refs| refs.iter().map(|r| tokenize(r)).collect())
        .collect();

    // Document frequency: the number of images whose reference set contains
    // the n-gram at least once.
    let mut df: Vec<NgramMap> = vec![NgramMap::new(); cfg.max_n];
    for refs in &ref_tokens {
        let mut seen: Vec<BTreeSet<Vec<String>>> = vec![BTreeSet::new(); cfg.max_n];
        for toks in refs {
            for (n, counts) in ngram_counts(toks, cfg.max_n).into_iter().enumerate() {
                seen[n].extend(counts.into_keys());
            }
        }
        for (n, set) in seen.into_iter().enumerate() {
            for gram in set {
                *df[n].entry(gram).or_insert(0.0) += 1.0;
            }
        }
    }

    let mut total = 0.0;
    for (cand, refs) in candidates.iter().zip(&ref_tokens) {
        let c = tfidf(&tokenize(cand), &df, n_docs, cfg.max_n);
        let mut per_ref = 0.0;
        for toks in refs {
            let r = tfidf(toks, &df, n_docs, cfg.max_n);
            per_ref += similarity(&c, &r, cfg);
        }
        total += 10.0 * per_ref / refs.len() as f64;
    }
    Ok(total / candidates.len() as f64)
}

/// Raw score times the reporting multiplier (default ×100 of [0, 10]).
pub fn cider_score(
    candidates: &[String],
    references: &[Vec<String>],
    cfg: &CiderConfig,
) -> Result<f64> {
    Ok(cider_score_raw(candidates, references, cfg)? * cfg.report_scale)
}

// ── Tests ───────────────────────────────────────────────────────────────────
