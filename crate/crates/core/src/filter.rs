//! Pair-quality filtering: deterministic toy embeddings for images and
//! captions in a shared 64-bin concept space, cosine scoring, and top-k
//! selection that keeps exactly the best-scoring fraction of records.

use crate::error::{Error, Result};
use crate::scene::{cipher_word, SceneSpec, CANVAS, CLASSES, COLORS};

pub const EMBED_BINS: usize = 64;

/// FNV-1a, folded into a bin index.
fn bin_of(word: &str) -> usize {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in word.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    (h % EMBED_BINS as u64) as usize
}

fn l2_normalize(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in &mut v {
            *x /= norm;
        }
    }
    v
}

/// Color/shape histogram of the scene: each object deposits its (ciphered)
/// color and class words, weighted by box area. Words are ciphered into the
/// scene's language so the histogram lives in the same lexical space as the
/// scene's captions.
pub fn image_embedding(scene: &SceneSpec) -> Vec<f64> {
    let mut bins = vec![0.0; EMBED_BINS];
    for o in &scene.objects {
        let area = (o.bbox.ymax - o.bbox.ymin) * (o.bbox.xmax - o.bbox.xmin) / (CANVAS * CANVAS);
        bins[bin_of(&cipher_word(scene.language, CLASSES[o.class]))] += area;
        bins[bin_of(&cipher_word(scene.language, COLORS[o.color].0))] += area;
    }
    l2_normalize(bins)
}

/// Hashed bag-of-words.
pub fn text_embedding(text: &str) -> Vec<f64> {
    let mut bins = vec![0.0; EMBED_BINS];
    for w in text.split_whitespace() {
        bins[bin_of(w)] += 1.0;
    }
    l2_normalize(bins)
}

pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::InvalidArg {
            op: "cosine",
            detail: format!("length mismatch {} vs {}", u.len(), v.len()),
        });
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu: f64 = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Ok(0.0);
    }
    Ok(dot / (nu * nv))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredPair {
    pub image_embedding: Vec<f64>,
    pub text_embedding: Vec<f64>,
    pub score: f64,
}

impl ScoredPair {
    pub fn new(image_embedding: Vec<f64>, text_embedding: Vec<f64>) -> Result<ScoredPair> {
        let score = cosine(&image_embedding, &text_embedding)?;
        Ok(ScoredPair { image_embedding, text_embedding, score })
    }
}

/// Cosine between a scene and a caption in the shared concept space.
pub fn pair_score(scene: &SceneSpec, caption: &str) -> f64 {
    cosine(&image_embedding(scene), &text_embedding(caption)).expect("embeddings share length")
}

/// Indices of the exactly `ceil(keep_fraction·N)` best-scoring records, in
/// original input order. Ties keep the earlier record.
pub fn keep_indices(scores: &[f64], keep_fraction: f64) -> Result<Vec<usize>> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::InvalidArg {
            op: "keep_indices",
            detail: format!("keep_fraction {keep_fraction} outside (0,1]"),
        });
    }
    if scores.is_empty() {
        return Ok(Vec::new());
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite { op: "keep_indices" });
    }
    let keep = (keep_fraction * scores.len() as f64).ceil() as usize;
    let keep = keep.min(scores.len());
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b].total_cmp(&scores[a]).then_with(|| a.cmp(&b))
    });
    let mut kept: Vec<usize> = order.into_iter().take(keep).collect();
    kept.sort_unstable();
    Ok(kept)
}

// ── Tests ───────────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{alt_text, BBox, ObjectSpec};

    fn one_object_scene(class: usize, color: usize, language: usize) -> SceneSpec {
        SceneSpec {
            objects: vec![ObjectSpec {
                class,
                color,
                bbox: BBox::new(20.0, 20.0, 120.0, 120.0),
            }],
            glyphs: vec![],
            language,
            seed: 0,
        }
    }

    #[test]
    fn hundred_records_keep_exactly_ten() {
        let scores: Vec<f64> = (0..100).map(|i| i as f64 / 100.0).collect();
        let kept = keep_indices(&scores, 0.10).unwrap();
        assert_eq!(kept.len(), 10);
        assert_eq!(kept, (90..100).collect::<Vec<_>>());
    }

    #[test]
    fn ceiling_governs_survivor_count() {
        let kept = keep_indices(&vec![0.5; 11], 0.10).unwrap();
        assert_eq!(kept.len(), 2);
        let kept = keep_indices(&[0.5], 0.10).unwrap();
        assert_eq!(kept, vec![0]);
    }

    #[test]
    fn equal_scores_keep_earliest_records() {
        let kept = keep_indices(&vec![0.7; 30], 0.10).unwrap();
        assert_eq!(kept, vec![0, 1, 2]);
    }

    #[test]
    fn matched_caption_outranks_shuffled() {
        let red_ball = one_object_scene(0, 0, 0);
        let blue_cube = one_object_scene(1, 2, 0);
        let cap_ball = alt_text(&red_ball);
        let cap_cube = alt_text(&blue_cube);
        let matched = pair_score(&red_ball, &cap_ball);
        let crossed = pair_score(&red_ball, &cap_cube);
        assert!(
            matched > crossed,
            "matched {matched} should beat crossed {crossed}"
        );
    }

    #[test]
    fn score_matches_recomputed_cosine() {
        for seed in 0..20 {
            let scene = SceneSpec::generate(seed);
            let img = image_embedding(&scene);
            let txt = text_embedding(&alt_text(&scene));
            let pair = ScoredPair::new(img.clone(), txt.clone()).unwrap();
            let dot: f64 = img.iter().zip(&txt).map(|(a, b)| a * b).sum();
            let nu = img.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nv = txt.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((pair.score - dot / (nu * nv)).abs() < 1e-12);
            assert!((-1.0..=1.0).contains(&pair.score));
        }
    }

    #[test]
    fn embeddings_are_unit_length() {
        for seed in 0..20 {
            let scene = SceneSpec::generate(seed);
            let img = image_embedding(&scene);
            assert!((img.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() < 1e-12);
            let txt = text_embedding(&alt_text(&scene));
            assert!((txt.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn filtering_is_monotone_in_score() {
        let scores: Vec<f64> = vec![0.9, 0.1, 0.8, 0.3, 0.7, 0.2, 0.6, 0.4, 0.5, 0.05];
        let kept = keep_indices(&scores, 0.3).unwrap();
        for &i in &kept {
            let mut raised = scores.clone();
            raised[i] += 0.5;
            let again = keep_indices(&raised, 0.3).unwrap();
            assert!(again.contains(&i), "raising score of {i} evicted it");
        }
    }

    #[test]
    fn empty_input_and_bad_fraction() {
        assert_eq!(keep_indices(&[], 0.10).unwrap(), Vec::<usize>::new());
        assert!(keep_indices(&[0.5], 0.0).is_err());
        assert!(keep_indices(&[0.5], 1.5).is_err());
        assert!(keep_indices(&[f64::NAN], 0.5).is_err());
    }

    #[test]
    fn cosine_edge_cases() {
        assert!(cosine(&[1.0], &[1.0, 2.0]).is_err());
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!((cosine(&[1.0, 0.0], &[1.0, 0.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((cosine(&[1.0, 0.0], &[-1.0, 0.0]).unwrap() + 1.0).abs() < 1e-15);
    }
}
