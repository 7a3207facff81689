//! The eight pre-training task templates, the weighted task mixture, and a
//! validator that recomputes every target from scene ground truth — the
//! corpus is self-labeling, so a generated example that fails validation is
//! a generator bug, never a labeling ambiguity.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{
    alt_text, cipher_text, decipher_text, quantize_coord, story, SceneSpec, CANVAS, CLASSES,
    COLORS, LANGUAGES,
};
use crate::tokenizer::sentinel_text;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Span,
    SplitCap,
    Ocr,
    Cap,
    Vqa,
    Vqg,
    Oa,
    Det,
}

impl Task {
    pub const ALL: [Task; 8] = [
        Task::Span,
        Task::SplitCap,
        Task::Ocr,
        Task::Cap,
        Task::Vqa,
        Task::Vqg,
        Task::Oa,
        Task::Det,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Task::Span => "span",
            Task::SplitCap => "split_cap",
            Task::Ocr => "ocr",
            Task::Cap => "cap",
            Task::Vqa => "vqa",
            Task::Vqg => "vqg",
            Task::Oa => "oa",
            Task::Det => "det",
        }
    }
}

/// Per-task sampling weights (the published table counts, in millions).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub weights: Vec<(Task, u64)>,
}

impl MixtureSpec {
    /// The full pre-training mixture; weights sum to 1566.
    pub fn pretrain() -> MixtureSpec {
        MixtureSpec {
            weights: vec![
                (Task::Span, 100),
                (Task::SplitCap, 1000),
                (Task::Ocr, 100),
                (Task::Cap, 100),
                (Task::Vqa, 100),
                (Task::Vqg, 100),
                (Task::Oa, 50),
                (Task::Det, 16),
            ],
        }
    }

    /// Equal weights over a task subset (the high-resolution phase uses
    /// {ocr, cap, vqa}).
    pub fn uniform(tasks: &[Task]) -> MixtureSpec {
        MixtureSpec { weights: tasks.iter().map(|&t| (t, 1)).collect() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.is_empty() {
            return Err(Error::InvalidConfig {
                field: "mixture.weights".into(),
                detail: "empty mixture".into(),
            });
        }
        for &(t, w) in &self.weights {
            if w == 0 {
                return Err(Error::InvalidConfig {
                    field: "mixture.weights".into(),
                    detail: format!("weight for {} must be positive", t.name()),
                });
            }
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.weights.iter().map(|&(_, w)| w).sum()
    }

    pub fn probability(&self, task: Task) -> f64 {
        let w = self.weights.iter().find(|&&(t, _)| t == task).map_or(0, |&(_, w)| w);
        w as f64 / self.total() as f64
    }

    /// The mixture restricted to tasks that actually have records, weights
    /// renormalized implicitly by sampling.
    pub fn restrict(&self, available: &[Task]) -> Result<MixtureSpec> {
        let weights: Vec<(Task, u64)> =
            self.weights.iter().copied().filter(|(t, _)| available.contains(t)).collect();
        let m = MixtureSpec { weights };
        m.validate().map_err(|_| Error::InvalidConfig {
            field: "mixture.weights".into(),
            detail: "no mixture task has records".into(),
        })?;
        Ok(m)
    }
}

pub fn sample_mixture(mix: &MixtureSpec, rng: &mut ChaCha8Rng) -> Task {
    let mut r = rng.gen_range(0..mix.total());
    for &(t, w) in &mix.weights {
        if r < w {
            return t;
        }
        r -= w;
    }
    unreachable!("weights sum to total")
}

/// One generated prompt/target pair; the image comes from the owning scene.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskText {
    pub input: String,
    pub target: String,
}

// ── Span corruption ─────────────────────────────────────────────────────────

/// Replace ~`rate` of the words with numbered sentinels (contiguous spans of
/// mean length `mean_span`); the target lists each sentinel followed by its
/// original words. Splicing the target back into the input reconstructs the
/// text exactly.
pub fn gen_span_corruption(
    text: &str,
    rate: f64,
    mean_span: f64,
    rng: &mut ChaCha8Rng,
) -> Result<TaskText> {
    let words: Vec<&str> = text.split_whitespace().collect();
    let n = words.len();
    if n < 2 {
        return Err(Error::InvalidArg {
            op: "gen_span_corruption",
            detail: format!("need at least 2 words, got {n}"),
        });
    }
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArg {
            op: "gen_span_corruption",
            detail: format!("rate {rate} outside [0,1)"),
        });
    }
    let num_corrupt = ((rate * n as f64).round() as usize).min(n - 1);
    if num_corrupt == 0 {
        return Ok(TaskText { input: text.to_string(), target: String::new() });
    }
    let mut k = ((num_corrupt as f64 / mean_span).round() as usize).clamp(1, num_corrupt).min(100);
    // Interior gaps must hold at least one kept word each.
    while k > 1 && n - num_corrupt < k - 1 {
        k -= 1;
    }
    let lengths = random_composition(num_corrupt, k, rng);
    let mut gaps = vec![0usize; k + 1];
    for g in gaps.iter_mut().take(k).skip(1) {
        *g = 1;
    }
    let free = (n - num_corrupt) - (k - 1);
    for _ in 0..free {
        gaps[rng.gen_range(0..k + 1)] += 1;
    }

    let mut input: Vec<String> = Vec::new();
    let mut target: Vec<String> = Vec::new();
    let mut pos = 0;
    for (i, &len) in lengths.iter().enumerate() {
        for _ in 0..gaps[i] {
            input.push(words[pos].to_string());
            pos += 1;
        }
        let s = sentinel_text(i as u32);
        input.push(s.clone());
        target.push(s);
        for _ in 0..len {
            target.push(words[pos].to_string());
            pos += 1;
        }
    }
    for _ in 0..gaps[k] {
        input.push(words[pos].to_string());
        pos += 1;
    }
    debug_assert_eq!(pos, n);
    Ok(TaskText { input: input.join(" "), target: target.join(" ") })
}

/// Uniformly random composition of `m` into `k` positive parts.
fn random_composition(m: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    debug_assert!(1 <= k && k <= m);
    let mut cuts: Vec<usize> = (1..m).collect();
    cuts.shuffle(rng);
    let mut chosen: Vec<usize> = cuts.into_iter().take(k - 1).collect();
    chosen.sort_unstable();
    chosen.push(m);
    let mut prev = 0;
    chosen
        .into_iter()
        .map(|c| {
            let l = c - prev;
            prev = c;
            l
        })
        .collect()
}

/// Replace each sentinel in a corrupted input with its target span; inverse
/// of `gen_span_corruption`.
pub fn splice_back(corrupted: &TaskText) -> String {
    let mut spans: Vec<Vec<&str>> = Vec::new();
    for w in corrupted.target.split_whitespace() {
        if w.starts_with("<extra_id_") {
            spans.push(Vec::new());
        } else if let Some(last) = spans.last_mut() {
            last.push(w);
        }
    }
    let mut out: Vec<&str> = Vec::new();
    let mut next = 0;
    for w in corrupted.input.split_whitespace() {
        if w.starts_with("<extra_id_") {
            if let Some(span) = spans.get(next) {
                out.extend(span);
            }
            next += 1;
        } else {
            out.push(w);
        }
    }
    out.join(" ")
}

// ── Captioning templates ────────────────────────────────────────────────────

pub fn gen_split_cap(alt: &str, lang: &str, rng: &mut ChaCha8Rng) -> Result<TaskText> {
    let words: Vec<&str> = alt.split_whitespace().collect();
    if words.len() < 2 {
        return Err(Error::InvalidArg {
            op: "gen_split_cap",
            detail: "caption has fewer than 2 words; use the plain caption task".into(),
        });
    }
    let split = rng.gen_range(1..words.len());
    let cap1 = words[..split].join(" ");
    let cap2 = words[split..].join(" ");
    Ok(TaskText {
        input: format!("Generate the alt_text in {lang} at {split}: {cap1} <extra_id_0>"),
        target: cap2,
    })
}

pub fn gen_caption(alt: &str, lang: &str) -> Result<TaskText> {
    if alt.split_whitespace().next().is_none() {
        return Err(Error::InvalidArg { op: "gen_caption", detail: "empty caption".into() });
    }
    Ok(TaskText {
        input: format!("Generate the alt_text in {lang} at 0: <extra_id_0>"),
        target: alt.to_string(),
    })
}

// ── OCR ─────────────────────────────────────────────────────────────────────

pub fn gen_ocr(scene: &SceneSpec) -> Result<TaskText> {
    if scene.glyphs.is_empty() {
        return Err(Error::InvalidArg { op: "gen_ocr", detail: "scene has no glyphs".into() });
    }
    let lang = LANGUAGES[scene.language];
    let target =
        scene.glyphs_in_order().iter().map(|g| g.text.as_str()).collect::<Vec<_>>().join(" ");
    Ok(TaskText { input: format!("Generate the ocr_text in {lang}: <extra_id_0>"), target })
}

// ── VQA / VQG ───────────────────────────────────────────────────────────────

/// Present classes, deduplicated, in canonical palette order.
fn present_classes(scene: &SceneSpec) -> Vec<usize> {
    (0..CLASSES.len()).filter(|&c| scene.objects.iter().any(|o| o.class == c)).collect()
}

/// A (question, answer) pair in English. Color questions are only asked
/// about classes with exactly one instance, so the answer is unambiguous.
fn question_answer(scene: &SceneSpec, rng: &mut ChaCha8Rng) -> Result<(String, String)> {
    if scene.objects.is_empty() {
        return Err(Error::InvalidArg { op: "gen_vqa", detail: "scene has no objects".into() });
    }
    let present = present_classes(scene);
    let singletons: Vec<usize> = present
        .iter()
        .copied()
        .filter(|&c| scene.objects.iter().filter(|o| o.class == c).count() == 1)
        .collect();
    let ask_color = !singletons.is_empty() && rng.gen_bool(0.5);
    if ask_color {
        let class = singletons[rng.gen_range(0..singletons.len())];
        let obj = scene.objects.iter().find(|o| o.class == class).expect("singleton present");
        Ok((format!("what color is the {}", CLASSES[class]), COLORS[obj.color].0.to_string()))
    } else {
        let class = present[rng.gen_range(0..present.len())];
        let count = scene.objects.iter().filter(|o| o.class == class).count();
        Ok((format!("how many {}", CLASSES[class]), count.to_string()))
    }
}

/// Recompute the answer to an English question against the scene.
fn answer_question(scene: &SceneSpec, question_en: &str) -> Option<String> {
    if let Some(class_name) = question_en.strip_prefix("what color is the ") {
        let class = CLASSES.iter().position(|&c| c == class_name)?;
        let mut found: Vec<usize> = scene
            .objects
            .iter()
            .filter(|o| o.class == class)
            .map(|o| o.color)
            .collect();
        if found.len() != 1 {
            return None;
        }
        return Some(COLORS[found.remove(0)].0.to_string());
    }
    if let Some(class_name) = question_en.strip_prefix("how many ") {
        let class = CLASSES.iter().position(|&c| c == class_name)?;
        let count = scene.objects.iter().filter(|o| o.class == class).count();
        return Some(count.to_string());
    }
    None
}

/// Question in the scene's language, answer in English.
pub fn gen_vqa(scene: &SceneSpec, rng: &mut ChaCha8Rng) -> Result<TaskText> {
    let (q, a) = question_answer(scene, rng)?;
    let q_lang = cipher_text(scene.language, &q);
    Ok(TaskText { input: format!("Answer in EN: {q_lang} <extra_id_0>"), target: a })
}

/// Inverse task: given the (English) answer, produce the question in the
/// scene's language.
pub fn gen_vqg(scene: &SceneSpec, rng: &mut ChaCha8Rng) -> Result<TaskText> {
    let (q, a) = question_answer(scene, rng)?;
    let lang = LANGUAGES[scene.language];
    Ok(TaskText {
        input: format!("Generate a question in {lang} for {a}: <extra_id_0>"),
        target: cipher_text(scene.language, &q),
    })
}

// ── Object-aware QA ─────────────────────────────────────────────────────────

pub fn gen_object_aware(scene: &SceneSpec, rng: &mut ChaCha8Rng) -> Result<TaskText> {
    if scene.objects.is_empty() {
        return Err(Error::InvalidArg {
            op: "gen_object_aware",
            detail: "scene has no objects".into(),
        });
    }
    let present = present_classes(scene);
    let join = |classes: &[usize]| {
        classes.iter().map(|&c| CLASSES[c]).collect::<Vec<_>>().join(", ")
    };
    match rng.gen_range(0..4) {
        0 => Ok(TaskText {
            input: "List the objects present in the image: <extra_id_0>".into(),
            target: join(&present),
        }),
        1 => {
            let c = rng.gen_range(0..CLASSES.len());
            let yes = present.contains(&c);
            Ok(TaskText {
                input: format!("Is {} in the image? <extra_id_0>", CLASSES[c]),
                target: if yes { "Yes" } else { "No" }.into(),
            })
        }
        2 => {
            let a = rng.gen_range(0..CLASSES.len());
            let mut b = rng.gen_range(0..CLASSES.len() - 1);
            if b >= a {
                b += 1;
            }
            let yes = present.contains(&a) && present.contains(&b);
            Ok(TaskText {
                input: format!(
                    "Are {} and {} both in the image? <extra_id_0>",
                    CLASSES[a], CLASSES[b]
                ),
                target: if yes { "Yes" } else { "No" }.into(),
            })
        }
        _ => {
            let size = rng.gen_range(2..=4);
            let mut pool: Vec<usize> = (0..CLASSES.len()).collect();
            pool.shuffle(rng);
            let asked: Vec<usize> = pool.into_iter().take(size).collect();
            let mut hits: Vec<usize> =
                asked.iter().copied().filter(|c| present.contains(c)).collect();
            hits.sort_unstable();
            let target = if hits.is_empty() { "none".into() } else { join(&hits) };
            Ok(TaskText {
                input: format!("Which of {} are in the image? <extra_id_0>", join(&asked)),
                target,
            })
        }
    }
}

// ── Detection ───────────────────────────────────────────────────────────────

/// Prompt lists the present classes plus 1–3 absent distractors in shuffled
/// order; the target emits each object's quantized box and class in reading
/// order. Class labels stay English (they are annotation-space labels).
pub fn gen_detection(scene: &SceneSpec, rng: &mut ChaCha8Rng, resolution: usize) -> Result<TaskText> {
    if scene.objects.is_empty() {
        return Err(Error::InvalidArg { op: "gen_detection", detail: "scene has no objects".into() });
    }
    let present = present_classes(scene);
    let mut absent: Vec<usize> = (0..CLASSES.len()).filter(|c| !present.contains(c)).collect();
    absent.shuffle(rng);
    let n_neg = rng.gen_range(1..=3).min(absent.len());
    let mut prompt_classes: Vec<usize> = present.iter().copied().chain(absent.into_iter().take(n_neg)).collect();
    prompt_classes.shuffle(rng);
    let class_list =
        prompt_classes.iter().map(|&c| CLASSES[c]).collect::<Vec<_>>().join(" and ");
    Ok(TaskText {
        input: format!("detect {class_list}"),
        target: detection_target(scene, resolution),
    })
}

/// The quantized detection string for a scene at a resolution.
pub fn detection_target(scene: &SceneSpec, resolution: usize) -> String {
    let scale = resolution as f64 / CANVAS;
    scene
        .objects_in_order()
        .iter()
        .map(|o| {
            let b = &o.bbox;
            format!(
                "{} {} {} {} {}",
                quantize_coord(b.ymin * scale, resolution),
                quantize_coord(b.xmin * scale, resolution),
                quantize_coord(b.ymax * scale, resolution),
                quantize_coord(b.xmax * scale, resolution),
                CLASSES[o.class]
            )
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Parse a detection target back to pixel boxes at the given resolution.
pub fn parse_detection(target: &str, resolution: usize) -> Result<Vec<(f64, f64, f64, f64, String)>> {
    let toks: Vec<&str> = target.split_whitespace().collect();
    if toks.len() % 5 != 0 {
        return Err(Error::InvalidArg {
            op: "parse_detection",
            detail: format!("token count {} not a multiple of 5", toks.len()),
        });
    }
    let step = resolution as f64 / 1000.0;
    toks.chunks(5)
        .map(|c| {
            let mut coords = [0.0; 4];
            for (i, t) in c[..4].iter().enumerate() {
                let q: u32 = t.parse().map_err(|_| Error::InvalidArg {
                    op: "parse_detection",
                    detail: format!("bad coordinate token {t:?}"),
                })?;
                if q > 999 {
                    return Err(Error::InvalidArg {
                        op: "parse_detection",
                        detail: format!("coordinate {q} out of 0..=999"),
                    });
                }
                coords[i] = q as f64 * step;
            }
            Ok((coords[0], coords[1], coords[2], coords[3], c[4].to_string()))
        })
        .collect()
}

// ── Dispatch and validation ─────────────────────────────────────────────────

pub const SPAN_RATE: f64 = 0.15;
pub const SPAN_MEAN_LEN: f64 = 3.0;

/// Generate the text pair for a task on a scene. Detection quantizes at
/// `resolution`; the other tasks ignore it.
pub fn gen_example(
    scene: &SceneSpec,
    task: Task,
    rng: &mut ChaCha8Rng,
    resolution: usize,
) -> Result<TaskText> {
    let lang = LANGUAGES[scene.language];
    match task {
        Task::Span => gen_span_corruption(&story(scene), SPAN_RATE, SPAN_MEAN_LEN, rng),
        Task::SplitCap => gen_split_cap(&alt_text(scene), lang, rng),
        Task::Cap => gen_caption(&alt_text(scene), lang),
        Task::Ocr => gen_ocr(scene),
        Task::Vqa => gen_vqa(scene, rng),
        Task::Vqg => gen_vqg(scene, rng),
        Task::Oa => gen_object_aware(scene, rng),
        Task::Det => gen_detection(scene, rng, resolution),
    }
}

fn mismatch(task: Task, detail: String) -> Error {
    Error::InvalidArg { op: "validate_example", detail: format!("{}: {detail}", task.name()) }
}

/// Recompute the target from scene ground truth and require a byte-for-byte
/// match (span corruption is checked by exact splice-back instead, since its
/// layout is sampled).
pub fn validate_example(
    scene: &SceneSpec,
    task: Task,
    text: &TaskText,
    resolution: usize,
) -> Result<()> {
    // Every template except span corruption (several sentinels) and
    // detection (none) ends in a single <extra_id_0> placeholder.
    if task != Task::Span && task != Task::Det {
        let n = text.input.matches("<extra_id_").count();
        if n != 1 {
            return Err(mismatch(task, format!("expected exactly 1 sentinel in input, got {n}")));
        }
    }
    let lang = LANGUAGES[scene.language];
    match task {
        Task::Span => {
            let orig = story(scene);
            let spliced = splice_back(text);
            if spliced != orig {
                return Err(mismatch(task, format!("splice-back {spliced:?} != story {orig:?}")));
            }
            Ok(())
        }
        Task::SplitCap => {
            let alt = alt_text(scene);
            let words: Vec<&str> = alt.split_whitespace().collect();
            let rest = text
                .input
                .strip_prefix(&format!("Generate the alt_text in {lang} at "))
                .ok_or_else(|| mismatch(task, "bad prompt prefix".into()))?;
            let (pos_str, _) =
                rest.split_once(':').ok_or_else(|| mismatch(task, "no split position".into()))?;
            let pos: usize =
                pos_str.parse().map_err(|_| mismatch(task, format!("bad position {pos_str:?}")))?;
            if pos == 0 || pos >= words.len() {
                return Err(mismatch(task, format!("split {pos} outside 1..{}", words.len())));
            }
            let expect = format!(
                "Generate the alt_text in {lang} at {pos}: {} <extra_id_0>",
                words[..pos].join(" ")
            );
            if text.input != expect || text.target != words[pos..].join(" ") {
                return Err(mismatch(task, "prompt or target does not match the caption".into()));
            }
            Ok(())
        }
        Task::Cap => {
            let expect = format!("Generate the alt_text in {lang} at 0: <extra_id_0>");
            if text.input != expect {
                return Err(mismatch(task, format!("prompt {:?} != {expect:?}", text.input)));
            }
            if text.target != alt_text(scene) {
                return Err(mismatch(task, "target is not the scene caption".into()));
            }
            Ok(())
        }
        Task::Ocr => {
            let expect = gen_ocr(scene)?;
            if *text != expect {
                return Err(mismatch(task, "prompt or target does not match the glyphs".into()));
            }
            Ok(())
        }
        Task::Vqa => {
            let q_lang = text
                .input
                .strip_prefix("Answer in EN: ")
                .and_then(|s| s.strip_suffix(" <extra_id_0>"))
                .ok_or_else(|| mismatch(task, "bad prompt shape".into()))?;
            let q_en = decipher_text(scene.language, q_lang);
            let want = answer_question(scene, &q_en)
                .ok_or_else(|| mismatch(task, format!("unanswerable question {q_en:?}")))?;
            if text.target != want {
                return Err(mismatch(task, format!("answer {:?} != {want:?}", text.target)));
            }
            Ok(())
        }
        Task::Vqg => {
            let rest = text
                .input
                .strip_prefix(&format!("Generate a question in {lang} for "))
                .and_then(|s| s.strip_suffix(" <extra_id_0>"))
                .ok_or_else(|| mismatch(task, "bad prompt shape".into()))?;
            let answer = rest
                .strip_suffix(':')
                .ok_or_else(|| mismatch(task, "answer missing trailing colon".into()))?;
            let q_en = decipher_text(scene.language, &text.target);
            let want = answer_question(scene, &q_en)
                .ok_or_else(|| mismatch(task, format!("unanswerable question {q_en:?}")))?;
            if want != answer {
                return Err(mismatch(task, format!("question answers {want:?}, not {answer:?}")));
            }
            Ok(())
        }
        Task::Oa => validate_object_aware(scene, text).map_err(|d| mismatch(task, d)),
        Task::Det => {
            let preamble = text
                .input
                .strip_prefix("detect ")
                .ok_or_else(|| mismatch(task, "prompt does not start with detect".into()))?;
            let asked: Vec<&str> = preamble.split(" and ").collect();
            for c in &asked {
                if !CLASSES.contains(c) {
                    return Err(mismatch(task, format!("unknown class {c:?} in prompt")));
                }
            }
            for &c in &present_classes(scene) {
                if !asked.contains(&CLASSES[c]) {
                    return Err(mismatch(task, format!("present class {} not asked", CLASSES[c])));
                }
            }
            let want = detection_target(scene, resolution);
            if text.target != want {
                return Err(mismatch(task, format!("target {:?} != {want:?}", text.target)));
            }
            Ok(())
        }
    }
}

fn validate_object_aware(scene: &SceneSpec, text: &TaskText) -> std::result::Result<(), String> {
    let present = present_classes(scene);
    let names = |classes: &[usize]| {
        classes.iter().map(|&c| CLASSES[c]).collect::<Vec<_>>().join(", ")
    };
    let class_of = |name: &str| CLASSES.iter().position(|&c| c == name);
    if text.input == "List the objects present in the image: <extra_id_0>" {
        let want = names(&present);
        return if text.target == want {
            Ok(())
        } else {
            Err(format!("list {:?} != {want:?}", text.target))
        };
    }
    if let Some(rest) =
        text.input.strip_prefix("Is ").and_then(|s| s.strip_suffix(" in the image? <extra_id_0>"))
    {
        let c = class_of(rest).ok_or_else(|| format!("unknown class {rest:?}"))?;
        let want = if present.contains(&c) { "Yes" } else { "No" };
        return if text.target == want { Ok(()) } else { Err(format!("{:?} != {want}", text.target)) };
    }
    if let Some(rest) = text
        .input
        .strip_prefix("Are ")
        .and_then(|s| s.strip_suffix(" both in the image? <extra_id_0>"))
    {
        let (a, b) = rest.split_once(" and ").ok_or("missing conjunction")?;
        let a = class_of(a).ok_or_else(|| format!("unknown class {a:?}"))?;
        let b = class_of(b).ok_or_else(|| format!("unknown class {b:?}"))?;
        let want = if present.contains(&a) && present.contains(&b) { "Yes" } else { "No" };
        return if text.target == want { Ok(()) } else { Err(format!("{:?} != {want}", text.target)) };
    }
    if let Some(rest) = text
        .input
        .strip_prefix("Which of ")
        .and_then(|s| s.strip_suffix(" are in the image? <extra_id_0>"))
    {
        let mut hits: Vec<usize> = Vec::new();
        for name in rest.split(", ") {
            let c = class_of(name).ok_or_else(|| format!("unknown class {name:?}"))?;
            if present.contains(&c) {
                hits.push(c);
            }
        }
        hits.sort_unstable();
        hits.dedup();
        let want = if hits.is_empty() { "none".to_string() } else { names(&hits) };
        return if text.target == want { Ok(()) } else { Err(format!("{:?} != {want:?}", text.target)) };
    }
    Err(format!("unrecognized prompt {:?}", text.input))
}

// ── Tests ───────────────────────────────────────────────────────────────────
