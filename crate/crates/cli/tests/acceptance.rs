//! Acceptance gate: one test per shipping criterion. Each test prints a
//! single `ACCEPTANCE NN <name>: PASS` line with its measured runtime and
//! fails if it exceeds its pinned time budget. Oracles here are independent
//! of the library's internals: finite differences, exhaustive enumeration,
//! hand-computed values, and byte comparison of rerun artifacts.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use imtext_core::cider::{cider_score, cider_score_raw, CiderConfig};
use imtext_core::dedup::{ahash64, hamming, keep_non_duplicates, DEDUP_THRESHOLD};
use imtext_core::eval::{top_k_accuracy, zero_shot_classify, CLASSIFY_PROMPT};
use imtext_core::fdiff::{finite_difference_at, rel_err};
use imtext_core::filter::keep_indices;
use imtext_core::model::generate::{beam, greedy, prefix_log_prob, score_candidate};
use imtext_core::model::{EncDecConfig, Model, ModelConfig, ParamSet, ViTConfig, EOS_ID, PAD_ID};
use imtext_core::resize::bilinear_resize_grid;
use imtext_core::scene::{
    alt_text, render_scene, BBox, ObjectSpec, SceneSpec, CANVAS, CLASSES, COLORS,
};
use imtext_core::schedule::Schedule;
use imtext_core::soup::soup;
use imtext_core::tasks::{
    detection_target, gen_example, gen_span_corruption, parse_detection, sample_mixture,
    splice_back, MixtureSpec, Task,
};
use imtext_core::tokenizer::Tokenizer;
use imtext_core::trainer::{train_step, TrainExample};
use imtext_core::adafactor::Adafactor;
use imtext_core::Tensor;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn pass(num: u32, name: &str, started: Instant, budget_secs: f64, detail: &str) {
    let secs = started.elapsed().as_secs_f64();
    assert!(
        secs < budget_secs,
        "criterion {num} ({name}) blew its {budget_secs}s budget: took {secs:.1}s"
    );
    println!("ACCEPTANCE {num:02} {name}: PASS ({secs:.2}s{}{detail})", if detail.is_empty() { "" } else { "; " });
}

fn local_log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_z = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|x| x - log_z).collect()
}

/// Vocab-4 model small enough for exhaustive output enumeration.
fn tiny4_model(seed: u64) -> Model {
    let cfg = ModelConfig {
        vit: ViTConfig { width: 16, depth: 1, mlp_dim: 32, heads: 2, patch_size: 7, resolution: 14 },
        encdec: EncDecConfig {
            d_model: 16,
            enc_layers: 1,
            dec_layers: 1,
            heads: 2,
            ffn_dim: 32,
            vocab_size: 4,
            max_text_len: 8,
            num_sentinels: 0,
            rel_buckets: 8,
            rel_max_distance: 16,
        },
    };
    Model::init(cfg, seed).unwrap()
}

fn tiny4_image(seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(vec![14, 14, 3], 0.5, &mut rng)
}

/// Every complete decoder output at `max_len`: EOS-terminated sequences plus
/// EOS-free sequences cut at the length cap. Their probabilities partition 1.
fn enumerate_outputs(max_len: usize, vocab: u32) -> Vec<Vec<u32>> {
    let mut out: Vec<Vec<u32>> = vec![];
    let mut frontier: Vec<Vec<u32>> = vec![vec![]];
    for _ in 0..max_len {
        let mut next = vec![];
        for f in frontier {
            for t in 0..vocab {
                let mut s = f.clone();
                s.push(t);
                if t == EOS_ID || s.len() == max_len {
                    out.push(s);
                } else {
                    next.push(s);
                }
            }
        }
        frontier = next;
    }
    out
}

// ── 1. Gradient fidelity ────────────────────────────────────────────────────

#[test]
fn c01_gradient_fidelity() {
    let t0 = Instant::now();
    let cfg = ModelConfig::toy(512);
    let model = Model::init(cfg.clone(), 11).unwrap();
    let image = render_scene(&SceneSpec::generate(77), 56).unwrap();
    let prompt: Vec<u32> = vec![200, 301, 5, 499];
    let targets: Vec<u32> = vec![250, 133, 77, EOS_ID];

    let mut fwd = model.forward().unwrap();
    let (loss_var, _) = fwd.loss_sum(&image, &prompt, &targets).unwrap();
    let grads = fwd.tape.backward_seeded(loss_var, 1.0).unwrap();

    let cfg_f = cfg.clone();
    let prompt_f = prompt.clone();
    let targets_f = targets.clone();
    let image_f = image.clone();
    let f = move |ps: &ParamSet| {
        let m = Model { cfg: cfg_f.clone(), params: ps.clone() };
        let mut fwd = m.forward()?;
        let (v, _) = fwd.loss_sum(&image_f, &prompt_f, &targets_f)?;
        Ok(fwd.tape.value(v).data()[0])
    };

    let entries: Vec<(String, usize)> = model
        .params
        .iter()
        .map(|(name, p)| (name.to_string(), p.value.data().len()))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut coords: BTreeSet<(usize, usize)> = BTreeSet::new();
    while coords.len() < 200 {
        let e = rng.gen_range(0..entries.len());
        let idx = rng.gen_range(0..entries[e].1);
        coords.insert((e, idx));
    }

    let mut max_rel = 0.0f64;
    for &(e, idx) in &coords {
        let (name, _) = &entries[e];
        let analytic = grads
            .get(name.as_str())
            .unwrap_or_else(|| panic!("no gradient for {name}"))
            .data()[idx];
        let fd = finite_difference_at(&f, &model.params, name, idx, 1e-6).unwrap();
        let rel = rel_err(analytic, fd);
        assert!(
            rel < 1e-5,
            "{name}[{idx}]: analytic {analytic:.3e} vs fd {fd:.3e} (rel {rel:.3e})"
        );
        max_rel = max_rel.max(rel);
    }
    pass(1, "gradient-fidelity", t0, 120.0, &format!("{} coords, max rel err {max_rel:.2e}", coords.len()));
}

// ── 2. Freezing invariant ───────────────────────────────────────────────────

#[test]
fn c02_freezing_invariant() {
    let t0 = Instant::now();
    let mut model = tiny4_model(21);
    model.params.freeze_by_prefix(&["vit.".to_string()]);
    let before = model.params.clone();

    let image = tiny4_image(22);
    let batch = vec![TrainExample { image, prompt: vec![2, 3], target: vec![2, 3, EOS_ID] }];
    let mut opt = Adafactor::new();
    for step in 0..100 {
        train_step(&mut model, &mut opt, &batch, 0.01, 0.0, 1_000 + step).unwrap();
    }

    let mut vit_count = 0usize;
    let mut encdec_changed = 0usize;
    for (name, p) in model.params.iter() {
        let init = &before.get(name).unwrap().value;
        if name.starts_with("vit.") {
            vit_count += 1;
            assert!(p.value.bit_eq(init), "frozen {name} drifted after 100 steps");
        } else if !p.value.bit_eq(init) {
            encdec_changed += 1;
        }
    }
    assert!(vit_count > 0, "no vit.* parameters found");
    assert!(encdec_changed > 0, "no encdec.* parameter changed in 100 steps");
    pass(2, "freezing-invariant", t0, 60.0, &format!("{vit_count} vit tensors frozen, {encdec_changed} encdec tensors updated"));
}

// ── 3. Mixture fidelity ─────────────────────────────────────────────────────

#[test]
fn c03_mixture_fidelity() {
    let t0 = Instant::now();
    let weights: [(Task, f64); 8] = [
        (Task::Span, 100.0),
        (Task::SplitCap, 1000.0),
        (Task::Ocr, 100.0),
        (Task::Cap, 100.0),
        (Task::Vqa, 100.0),
        (Task::Vqg, 100.0),
        (Task::Oa, 50.0),
        (Task::Det, 16.0),
    ];
    let total: f64 = weights.iter().map(|w| w.1).sum();
    assert_eq!(total, 1566.0);

    let mix = MixtureSpec::pretrain();
    for &(task, w) in &weights {
        assert!(
            (mix.probability(task) - w / total).abs() < 1e-12,
            "{} probability off", task.name()
        );
    }

    let n = 1_566_000usize;
    let mut rng = ChaCha8Rng::seed_from_u64(1566);
    let mut counts: BTreeMap<&'static str, usize> = BTreeMap::new();
    for _ in 0..n {
        *counts.entry(sample_mixture(&mix, &mut rng).name()).or_insert(0) += 1;
    }
    let mut max_dev = 0.0f64;
    for &(task, w) in &weights {
        let freq = *counts.get(task.name()).unwrap_or(&0) as f64 / n as f64;
        let dev = (freq - w / total).abs();
        max_dev = max_dev.max(dev);
        assert!(dev < 0.005, "{}: freq {freq:.4} vs expected {:.4}", task.name(), w / total);
    }
    pass(3, "mixture-fidelity", t0, 60.0, &format!("{n} draws, max deviation {max_dev:.2e}"));
}

// ── 4. Positional resize ────────────────────────────────────────────────────

#[test]
fn c04_positional_resize() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);

    let same = Tensor::randn(vec![5, 7, 4], 1.0, &mut rng);
    assert!(bilinear_resize_grid(&same, 5, 7).unwrap().bit_eq(&same), "same-size resize not identity");

    let four = Tensor::randn(vec![4, 4, 2], 1.0, &mut rng);
    let eight = bilinear_resize_grid(&four, 8, 8).unwrap();
    for c in 0..2 {
        for (oy, ox, iy, ix) in [(0, 0, 0, 0), (0, 7, 0, 3), (7, 0, 3, 0), (7, 7, 3, 3)] {
            let got = eight.data()[(oy * 8 + ox) * 2 + c];
            let want = four.data()[(iy * 4 + ix) * 2 + c];
            assert!(got == want, "corner ({oy},{ox}) channel {c}: {got} != {want}");
        }
    }

    let two = Tensor::from_vec(vec![2, 2, 1], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
    let three = bilinear_resize_grid(&two, 3, 3).unwrap();
    let want = [0.0, 0.5, 1.0, 1.0, 1.5, 2.0, 2.0, 2.5, 3.0];
    assert_eq!(three.data(), &want, "2x2 -> 3x3 differs from the hand-computed grid");

    pass(4, "positional-resize", t0, 1.0, "");
}

// ── 5. Souping algebra ──────────────────────────────────────────────────────

#[test]
fn c05_soup_algebra() {
    let t0 = Instant::now();
    let x = Model::init(tiny4_model(0).cfg, 9).unwrap().params;
    let self_soup = soup(&[&x, &x]).unwrap();
    for (name, p) in x.iter() {
        assert!(self_soup.get(name).unwrap().value.bit_eq(&p.value), "soup(x,x) != x at {name}");
    }

    let a = Model::init(tiny4_model(0).cfg, 1).unwrap().params;
    let b = Model::init(tiny4_model(0).cfg, 2).unwrap().params;
    let ab = soup(&[&a, &b]).unwrap();
    let ba = soup(&[&b, &a]).unwrap();
    for (name, p) in ab.iter() {
        assert!(ba.get(name).unwrap().value.bit_eq(&p.value), "soup not commutative at {name}");
    }

    let mut zeros = a.clone();
    let mut twos = a.clone();
    for (name, p) in a.iter() {
        let shape = p.value.shape().to_vec();
        let len = p.value.data().len();
        zeros.set_value(name, Tensor::zeros(shape.clone())).unwrap();
        twos.set_value(name, Tensor::from_vec(shape, vec![2.0; len]).unwrap()).unwrap();
    }
    let mid = soup(&[&zeros, &twos]).unwrap();
    for (name, p) in mid.iter() {
        assert!(p.value.data().iter().all(|&v| v == 1.0), "soup(0,2) != 1 at {name}");
    }
    pass(5, "soup-algebra", t0, 1.0, "");
}

// ── 6. Overfit smoke test ───────────────────────────────────────────────────

fn token_accuracy(model: &Model, examples: &[TrainExample]) -> f64 {
    let mut hit = 0usize;
    let mut total = 0usize;
    for ex in examples {
        let mut fwd = model.forward().unwrap();
        let enc = fwd.encode(&ex.image, &ex.prompt).unwrap();
        let logits = fwd.prefix_logits(&enc, &ex.target[..ex.target.len() - 1]).unwrap();
        let t = fwd.tape.value(logits);
        let v = t.shape()[1];
        for (i, &gold) in ex.target.iter().enumerate() {
            if gold == PAD_ID {
                continue;
            }
            let row = &t.data()[i * v..(i + 1) * v];
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0 as u32;
            total += 1;
            if pred == gold {
                hit += 1;
            }
        }
    }
    hit as f64 / total as f64
}

#[test]
fn c06_overfit_smoke() {
    let t0 = Instant::now();
    let cfg = ModelConfig {
        vit: ViTConfig { width: 32, depth: 1, mlp_dim: 64, heads: 2, patch_size: 14, resolution: 56 },
        encdec: EncDecConfig {
            d_model: 32,
            enc_layers: 1,
            dec_layers: 1,
            heads: 2,
            ffn_dim: 64,
            vocab_size: 2048,
            max_text_len: 64,
            num_sentinels: 100,
            rel_buckets: 16,
            rel_max_distance: 32,
        },
    };
    let mut model = Model::init(cfg, 6).unwrap();
    let tok = Tokenizer::new();

    let mut examples: Vec<TrainExample> = Vec::new();
    let mut task_counts: BTreeMap<&'static str, usize> = BTreeMap::new();
    let mut i = 0u64;
    while examples.len() < 128 {
        let scene = SceneSpec::generate(40_000 + i);
        let mut task = Task::ALL[i as usize % Task::ALL.len()];
        if task == Task::Ocr && scene.glyphs.is_empty() {
            task = Task::Cap;
        }
        i += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(90_000 + i);
        let tt = match gen_example(&scene, task, &mut rng, 56) {
            Ok(tt) => tt,
            Err(_) => continue,
        };
        let prompt = tok.tokenize(&tt.input);
        let target = tok.encode_target(&tt.target);
        if prompt.len() + 1 > 64 || target.len() + 1 > 64 || target.is_empty() {
            continue;
        }
        *task_counts.entry(task.name()).or_insert(0) += 1;
        examples.push(TrainExample { image: render_scene(&scene, 56).unwrap(), prompt, target });
    }
    assert!(task_counts.len() >= 7, "expected a broad task mix, got {task_counts:?}");

    let sched = Schedule::warmup_inv_sqrt(100, 0.02);
    let mut opt = Adafactor::new();
    let mut reached_at = None;
    let mut acc = 0.0;
    for step in 0..2000usize {
        let batch: Vec<TrainExample> =
            (0..32).map(|j| examples[(step * 32 + j) % examples.len()].clone()).collect();
        let lr = sched.lr_at_step(step + 1);
        train_step(&mut model, &mut opt, &batch, lr, 0.0, 7_000 + step as u64).unwrap();
        if (step + 1) % 25 == 0 && step + 1 >= 50 {
            acc = token_accuracy(&model, &examples);
            if acc >= 0.99 {
                reached_at = Some(step + 1);
                break;
            }
        }
    }
    let steps = reached_at.unwrap_or_else(|| {
        panic!("token accuracy only reached {acc:.4} after 2000 steps")
    });
    pass(6, "overfit-smoke", t0, 600.0, &format!("{:.2}% at step {steps}", acc * 100.0));
}

// ── 7. Generation correctness ───────────────────────────────────────────────

#[test]
fn c07_beam_equals_exhaustive() {
    let t0 = Instant::now();
    for seed in 0..10u64 {
        let model = tiny4_model(seed);
        let image = tiny4_image(seed + 300);
        let prompt = [2u32, 3];
        let space = enumerate_outputs(2, 4);
        assert_eq!(space.len(), 13);
        let mut best: Option<(Vec<u32>, f64)> = None;
        for cand in space {
            let lp = prefix_log_prob(&model, &image, &prompt, &cand).unwrap();
            let take = match &best {
                None => true,
                Some((bt, bl)) => lp > *bl || (lp == *bl && cand < *bt),
            };
            if take {
                best = Some((cand, lp));
            }
        }
        let got = beam(&model, &image, &prompt, 16, 2).unwrap();
        assert_eq!(got, best.unwrap().0, "beam(16) != exhaustive argmax at seed {seed}");

        let g = greedy(&model, &image, &prompt, 6).unwrap();
        let b1 = beam(&model, &image, &prompt, 1, 6).unwrap();
        assert_eq!(g, b1, "beam(1) != greedy at seed {seed}");
    }
    pass(7, "generation-correctness", t0, 60.0, "10 models, 13-sequence space");
}

// ── 8. Scoring normalization ────────────────────────────────────────────────

#[test]
fn c08_score_normalization() {
    let t0 = Instant::now();
    let mut worst = 0.0f64;
    for seed in 0..10u64 {
        let model = tiny4_model(seed + 40);
        let image = tiny4_image(seed + 400);
        let prompt = [3u32];
        let mut mass = 0.0;
        for cand in enumerate_outputs(2, 4) {
            let lp = if cand.last() == Some(&EOS_ID) {
                score_candidate(&model, &image, &prompt, &cand).unwrap()
            } else {
                prefix_log_prob(&model, &image, &prompt, &cand).unwrap()
            };
            mass += lp.exp();
        }
        worst = worst.max((mass - 1.0).abs());
        assert!((mass - 1.0).abs() < 1e-9, "seed {seed}: total mass {mass}");
    }
    pass(8, "score-normalization", t0, 60.0, &format!("max |mass-1| = {worst:.2e}"));
}

// ── 9. Span corruption ──────────────────────────────────────────────────────

#[test]
fn c09_span_corruption() {
    let t0 = Instant::now();
    let pool: Vec<String> = (0..24).map(|i| format!("word{i:02}")).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for case in 0..1000u64 {
        let n = rng.gen_range(40..=80usize);
        let words: Vec<&str> = (0..n).map(|_| pool[rng.gen_range(0..pool.len())].as_str()).collect();
        let text = words.join(" ");

        let mut grng = ChaCha8Rng::seed_from_u64(5_000 + case);
        let tt = gen_span_corruption(&text, 0.15, 3.0, &mut grng).unwrap();

        let kept = tt
            .input
            .split_whitespace()
            .filter(|w| !w.starts_with("<extra_id_"))
            .count();
        let frac = (n - kept) as f64 / n as f64;
        assert!(
            (0.075..=0.225).contains(&frac),
            "case {case}: corrupted fraction {frac:.3} outside [0.075, 0.225]"
        );

        let input_sentinels = tt.input.split_whitespace().filter(|w| w.starts_with("<extra_id_")).count();
        let target_sentinels = tt.target.split_whitespace().filter(|w| w.starts_with("<extra_id_")).count();
        assert_eq!(input_sentinels, target_sentinels, "case {case}: sentinel mismatch");

        assert_eq!(splice_back(&tt), text, "case {case}: splice-back not exact");
    }
    pass(9, "span-corruption", t0, 60.0, "1000 texts");
}

// ── 10. Detection round-trip ────────────────────────────────────────────────

#[test]
fn c10_detection_roundtrip() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    for res in [112usize, 224] {
        let scale = res as f64 / CANVAS;
        let step = res as f64 / 1000.0;
        for case in 0..500u64 {
            let ymin = rng.gen_range(0.0..CANVAS - 2.0);
            let xmin = rng.gen_range(0.0..CANVAS - 2.0);
            let ymax = rng.gen_range(ymin + 1.0..CANVAS);
            let xmax = rng.gen_range(xmin + 1.0..CANVAS);
            let class = rng.gen_range(0..CLASSES.len());
            let color = rng.gen_range(0..COLORS.len());
            let scene = SceneSpec {
                objects: vec![ObjectSpec { class, color, bbox: BBox::new(ymin, xmin, ymax, xmax) }],
                glyphs: vec![],
                language: 0,
                seed: case,
            };
            let target = detection_target(&scene, res);
            for tokstr in target.split_whitespace() {
                if let Ok(q) = tokstr.parse::<i64>() {
                    assert!((0..=999).contains(&q), "coord {q} outside [0,999] in {target:?}");
                }
            }
            let parsed = parse_detection(&target, res).unwrap();
            assert_eq!(parsed.len(), 1);
            let (py, px, py2, px2, name) = parsed[0].clone();
            assert_eq!(name, CLASSES[class]);
            for (got, want) in [(py, ymin), (px, xmin), (py2, ymax), (px2, xmax)] {
                assert!(
                    (got - want * scale).abs() <= step + 1e-9,
                    "res {res} case {case}: {got} vs {} (step {step})", want * scale
                );
            }
        }
    }
    pass(10, "detection-roundtrip", t0, 1.0, "1000 boxes at res 112 and 224");
}

// ── 11. Filtering and near-dedup ────────────────────────────────────────────

/// 16x16 image whose 2x2 pixel blocks are uniform 0.9 (mask bit set) or 0.1,
/// laid out so its hash is exactly `mask`: cell margins (0.4) dwarf any mean
/// shift from flipping up to four cells (4 * 0.8 / 64 = 0.05).
fn blocky_image(mask: u64) -> Tensor {
    let (h, w) = (16usize, 16usize);
    let mut data = vec![0.0; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            let cell = (y / 2) * 8 + x / 2;
            let v = if mask >> (63 - cell) & 1 == 1 { 0.9 } else { 0.1 };
            let base = (y * w + x) * 3;
            data[base] = v;
            data[base + 1] = v;
            data[base + 2] = v;
        }
    }
    Tensor::from_vec(vec![h, w, 3], data).unwrap()
}

fn balanced_mask(rng: &mut ChaCha8Rng) -> u64 {
    loop {
        let m: u64 = rng.gen();
        if (26..=38).contains(&m.count_ones()) {
            return m;
        }
    }
}

#[test]
fn c11_filter_and_dedup() {
    let t0 = Instant::now();

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for n in [200usize, 173] {
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let kept = keep_indices(&scores, 0.1).unwrap();
        let want = (0.1 * n as f64).ceil() as usize;
        assert_eq!(kept.len(), want, "keep_indices kept {} of {n}, want ceil = {want}", kept.len());
        let min_kept = kept.iter().map(|&i| scores[i]).fold(f64::INFINITY, f64::min);
        let max_dropped = (0..n)
            .filter(|i| !kept.contains(i))
            .map(|i| scores[i])
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(min_kept >= max_dropped, "a dropped score beat a kept one");
    }

    let eval_masks: Vec<u64> = (0..5).map(|_| balanced_mask(&mut rng)).collect();
    let mut corpus_masks: Vec<u64> = Vec::new();
    let mut planted: BTreeSet<usize> = BTreeSet::new();
    for (i, &em) in eval_masks.iter().enumerate() {
        let flips = i % 5;
        let mut m = em;
        let mut flipped = BTreeSet::new();
        while flipped.len() < flips {
            let bit = rng.gen_range(0..64u32);
            if flipped.insert(bit) {
                m ^= 1u64 << bit;
            }
        }
        planted.insert(corpus_masks.len());
        corpus_masks.push(m);
    }
    let mut clean_count = 0usize;
    while clean_count < 20 {
        let m = balanced_mask(&mut rng);
        if eval_masks.iter().all(|&e| hamming(m, e) > 8) {
            corpus_masks.push(m);
            clean_count += 1;
        }
    }

    let eval_hashes: Vec<u64> = eval_masks.iter().map(|&m| ahash64(&blocky_image(m)).unwrap()).collect();
    assert_eq!(eval_hashes, eval_masks, "image synthesis does not reproduce its hash");
    let corpus_hashes: Vec<u64> =
        corpus_masks.iter().map(|&m| ahash64(&blocky_image(m)).unwrap()).collect();

    let kept = keep_non_duplicates(&corpus_hashes, &eval_hashes, DEDUP_THRESHOLD);
    let want: Vec<usize> = (0..corpus_masks.len()).filter(|i| !planted.contains(i)).collect();
    assert_eq!(kept, want, "dedup kept/removed the wrong records");

    let clean_hashes: Vec<u64> = corpus_hashes[5..].to_vec();
    let all: Vec<usize> = (0..clean_hashes.len()).collect();
    assert_eq!(
        keep_non_duplicates(&clean_hashes, &eval_hashes, DEDUP_THRESHOLD),
        all,
        "dedup removed records from a disjoint corpus"
    );

    pass(11, "filter-and-dedup", t0, 60.0, "5 planted duplicates removed, 20 clean kept");
}

// ── 12. CIDEr oracle ────────────────────────────────────────────────────────

#[test]
fn c12_cider_oracle() {
    let t0 = Instant::now();
    let cfg = CiderConfig::default();

    let cands = vec!["a b c d".to_string(), "e f g h".to_string()];
    let refs = vec![vec!["a b c d".to_string()], vec!["e f g h".to_string()]];
    let raw = cider_score_raw(&cands, &refs, &cfg).unwrap();
    assert_eq!(raw, 10.0, "disjoint-vocabulary self-match must be exactly 10.0, got {raw}");
    assert_eq!(cider_score(&cands, &refs, &cfg).unwrap(), 1000.0);

    let miss = vec!["p q r s".to_string(), "e f g h".to_string()];
    let part = cider_score_raw(&miss, &refs, &cfg).unwrap();
    assert_eq!(part, 5.0, "zero-overlap candidate must score exactly 0, got corpus mean {part}");

    pass(12, "cider-oracle", t0, 1.0, "");
}

// ── 13. Zero-shot protocol ──────────────────────────────────────────────────

fn color_scene(color: usize, seed: u64) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = rng.gen_range(60.0..110.0);
    let w = rng.gen_range(60.0..110.0);
    let ymin = rng.gen_range(4.0..CANVAS - 4.0 - h);
    let xmin = rng.gen_range(4.0..CANVAS - 4.0 - w);
    SceneSpec {
        objects: vec![ObjectSpec { class: 0, color, bbox: BBox::new(ymin, xmin, ymin + h, xmin + w) }],
        glyphs: vec![],
        language: 0,
        seed,
    }
}

#[test]
fn c13_zero_shot_protocol() {
    let t0 = Instant::now();
    let cfg = ModelConfig {
        vit: ViTConfig { width: 32, depth: 1, mlp_dim: 64, heads: 2, patch_size: 14, resolution: 28 },
        encdec: EncDecConfig {
            d_model: 32,
            enc_layers: 1,
            dec_layers: 1,
            heads: 2,
            ffn_dim: 64,
            vocab_size: 2048,
            max_text_len: 64,
            num_sentinels: 100,
            rel_buckets: 16,
            rel_max_distance: 32,
        },
    };
    let mut model = Model::init(cfg, 13).unwrap();
    let tok = Tokenizer::new();
    let prompt_tokens = tok.tokenize(CLASSIFY_PROMPT);

    let names: Vec<String> = COLORS.iter().map(|c| c.0.to_string()).collect();
    assert_eq!(names.len(), 8);

    let mut train: Vec<TrainExample> = Vec::new();
    for color in 0..8usize {
        for k in 0..10u64 {
            let spec = color_scene(color, 600 + color as u64 * 100 + k);
            let caption = alt_text(&spec);
            assert_eq!(caption, format!("a {} ball", names[color]));
            train.push(TrainExample {
                image: render_scene(&spec, 28).unwrap(),
                prompt: prompt_tokens.clone(),
                target: tok.encode_target(&caption),
            });
        }
    }

    // Full-batch steps: per-token gradient noise buries the image-to-word
    // coupling signal at this scale, so average over the whole train set.
    let sched = Schedule::warmup_inv_sqrt(50, 0.02);
    let mut opt = Adafactor::new();
    for step in 0..800usize {
        let (loss, _) = train_step(
            &mut model,
            &mut opt,
            &train,
            sched.lr_at_step(step + 1),
            0.0,
            13_000 + step as u64,
        )
        .unwrap();
        assert!(loss.is_finite());
        if (step + 1) % 50 == 0 && token_accuracy(&model, &train) > 0.999 {
            break;
        }
    }

    let mut rankings = Vec::new();
    let mut golds = Vec::new();
    let mut images = Vec::new();
    for color in 0..8usize {
        for k in 0..3u64 {
            let spec = color_scene(color, 9_900 + color as u64 * 10 + k);
            let image = render_scene(&spec, 28).unwrap();
            rankings.push(zero_shot_classify(&model, &image, &names, CLASSIFY_PROMPT, "a {} ball").unwrap());
            golds.push(names[color].clone());
            images.push(image);
        }
    }
    let top1 = top_k_accuracy(&rankings, &golds, 1).unwrap();
    assert!(top1 >= 0.30, "zero-shot top-1 {top1:.3} below the 0.30 bar (chance 0.125)");

    // Adding a constant to every logit row must not change any ranking.
    for shift in [7.3f64, -3.1] {
        for (image, base) in images.iter().zip(&rankings) {
            let mut fwd = model.forward().unwrap();
            let enc = fwd.encode(image, &prompt_tokens).unwrap();
            let mut shifted: Vec<(String, f64)> = Vec::new();
            for name in &names {
                let cand = tok.encode_target(&format!("a {name} ball"));
                let logits = fwd.prefix_logits(&enc, &cand[..cand.len() - 1]).unwrap();
                let t = fwd.tape.value(logits);
                let v = t.shape()[1];
                let mut score = 0.0;
                for (i, &tokid) in cand.iter().enumerate() {
                    let row: Vec<f64> = t.data()[i * v..(i + 1) * v].iter().map(|x| x + shift).collect();
                    score += local_log_softmax(&row)[tokid as usize];
                }
                shifted.push((name.clone(), score));
            }
            shifted.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            let base_order: Vec<&String> = base.iter().map(|(n, _)| n).collect();
            let shift_order: Vec<&String> = shifted.iter().map(|(n, _)| n).collect();
            assert_eq!(base_order, shift_order, "ranking changed under logit shift {shift}");
        }
    }

    pass(13, "zero-shot-protocol", t0, 900.0, &format!("top-1 {:.1}% over 24 held-out scenes", top1 * 100.0));
}

// ── 14. End-to-end determinism ──────────────────────────────────────────────

fn run_cli(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_imtext"))
        .args(args)
        .output()
        .expect("failed to spawn imtext");
    assert!(
        out.status.success(),
        "imtext {args:?} failed\nstdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) {
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            collect_files(root, &path, out);
        } else {
            out.push(path.strip_prefix(root).unwrap().to_path_buf());
        }
    }
}

fn run_pipeline(dir: &Path) {
    let d = dir.to_str().unwrap();
    let ckpt2 = dir.join("phase2.ckpt");
    let ckptf = dir.join("finetune.ckpt");
    run_cli(&["build-corpus", "--out", d, "--seed", "4242", "--threads", "1"]);
    run_cli(&["pretrain", "--out", d, "--seed", "4242"]);
    run_cli(&["finetune", "--out", d, "--seed", "4242", "--checkpoint", ckpt2.to_str().unwrap()]);
    run_cli(&["evaluate", "--out", d, "--seed", "4242", "--checkpoint", ckptf.to_str().unwrap()]);
}

#[test]
fn c14_pipeline_determinism() {
    let t0 = Instant::now();
    let base = std::env::temp_dir().join(format!("imtext-accept-{}", std::process::id()));
    let run_a = base.join("a");
    let run_b = base.join("b");
    for dir in [&run_a, &run_b] {
        if dir.exists() {
            std::fs::remove_dir_all(dir).unwrap();
        }
        std::fs::create_dir_all(dir).unwrap();
    }

    run_pipeline(&run_a);
    run_pipeline(&run_b);

    let mut files_a = Vec::new();
    let mut files_b = Vec::new();
    collect_files(&run_a, &run_a, &mut files_a);
    collect_files(&run_b, &run_b, &mut files_b);
    files_a.sort();
    files_b.sort();
    assert_eq!(files_a, files_b, "the two runs produced different file sets");

    let mut compared = 0usize;
    for rel in &files_a {
        // The effective-config echo embeds the output directory path itself;
        // every produced artifact must match byte for byte.
        if rel.file_name().map(|n| n == "effective-config.json").unwrap_or(false) {
            continue;
        }
        let a = std::fs::read(run_a.join(rel)).unwrap();
        let b = std::fs::read(run_b.join(rel)).unwrap();
        assert_eq!(a, b, "artifact differs between reruns: {}", rel.display());
        compared += 1;
    }
    for required in [
        "pretrain-metrics.jsonl",
        "finetune-metrics.jsonl",
        "metrics-caption.json",
        "metrics-vqa.json",
        "phase1.ckpt",
        "phase2.ckpt",
        "finetune.ckpt",
    ] {
        assert!(
            files_a.iter().any(|p| p.ends_with(required)),
            "pipeline produced no {required}"
        );
    }

    std::fs::remove_dir_all(&base).ok();
    pass(14, "pipeline-determinism", t0, 1800.0, &format!("{compared} artifacts byte-identical"));
}
