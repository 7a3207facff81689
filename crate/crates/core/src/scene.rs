//! Procedural scenes: the ground truth every task target is derived from.
//!
//! A `SceneSpec` is a pure function of its seed, and rendering is a pure
//! function of (spec, resolution), so the whole corpus is reproducible and
//! self-labeling. Boxes live in a fixed 224-unit canvas space and are scaled
//! at render time.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CLASSES: [&str; 16] = [
    "ball", "cube", "cone", "ring", "frame", "diamond", "cross", "bar", "post", "wedge", "dot",
    "tile", "stripe", "grid", "moon", "star",
];

pub const COLORS: [(&str, [f64; 3]); 8] = [
    ("red", [0.85, 0.10, 0.10]),
    ("green", [0.10, 0.70, 0.15]),
    ("blue", [0.12, 0.25, 0.85]),
    ("yellow", [0.92, 0.85, 0.10]),
    ("purple", [0.55, 0.15, 0.70]),
    ("orange", [0.95, 0.55, 0.08]),
    ("teal", [0.05, 0.60, 0.60]),
    ("pink", [0.95, 0.55, 0.70]),
];

/// Language 0 is plain English; the rest are word-level Caesar ciphers of it,
/// shifted by the language index, so multilingual templates are exercised
/// with a closed vocabulary.
pub const LANGUAGES: [&str; 8] = ["en", "fr", "de", "es", "it", "pt", "nl", "sv"];

/// Closed set of strings the glyph renderer can draw.
pub const GLYPH_STRINGS: [&str; 40] = [
    "STOP", "EXIT", "OPEN", "SALE", "MENU", "TAXI", "CAFE", "SHOP", "EAST", "WEST", "GATE",
    "ZONE", "PARK", "FAST", "SLOW", "NORTH", "SOUTH", "MAIN", "CITY", "ROAD", "A1", "B2", "C3",
    "D4", "E5", "F6", "G7", "H8", "J9", "K0", "QX", "WZ", "RY", "TV", "NM", "PL", "17", "42",
    "88", "365",
];

pub const CANVAS: f64 = 224.0;
pub const BACKGROUND: f64 = 0.92;

/// Shift a lowercase word by the language's cipher; uppercase, digits, and
/// punctuation pass through, so glyphs and numerals are language-invariant.
pub fn cipher_word(language: usize, word: &str) -> String {
    let shift = (language % LANGUAGES.len()) as u8;
    word.chars()
        .map(|c| {
            if c.is_ascii_lowercase() {
                (((c as u8 - b'a' + shift) % 26) + b'a') as char
            } else {
                c
            }
        })
        .collect()
}

/// Word-by-word cipher of a space-separated text.
pub fn cipher_text(language: usize, text: &str) -> String {
    text.split_whitespace().map(|w| cipher_word(language, w)).collect::<Vec<_>>().join(" ")
}

/// Inverse of `cipher_text`.
pub fn decipher_text(language: usize, text: &str) -> String {
    let shift = (language % LANGUAGES.len()) as u8;
    let inverse = ((26 - shift) % 26) as usize;
    // Reuse the forward cipher with the complementary shift; only the
    // shift amount matters, not the language identity.
    text.split_whitespace()
        .map(|w| {
            w.chars()
                .map(|c| {
                    if c.is_ascii_lowercase() {
                        (((c as u8 - b'a' + inverse as u8) % 26) + b'a') as char
                    } else {
                        c
                    }
                })
                .collect::<String>()
        })
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub ymin: f64,
    pub xmin: f64,
    pub ymax: f64,
    pub xmax: f64,
}

impl BBox {
    pub fn new(ymin: f64, xmin: f64, ymax: f64, xmax: f64) -> BBox {
        BBox { ymin, xmin, ymax, xmax }
    }

    fn check(&self, bound: f64) -> Result<()> {
        let ok = self.ymin >= 0.0
            && self.xmin >= 0.0
            && self.ymin < self.ymax
            && self.xmin < self.xmax
            && self.ymax <= bound
            && self.xmax <= bound
            && [self.ymin, self.xmin, self.ymax, self.xmax].iter().all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArg {
                op: "scene",
                detail: format!("box {self:?} out of bounds 0..{bound} or degenerate"),
            })
        }
    }

    fn center(&self) -> (f64, f64) {
        ((self.ymin + self.ymax) / 2.0, (self.xmin + self.xmax) / 2.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectSpec {
    pub class: usize,
    pub color: usize,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlyphSpec {
    pub text: String,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub objects: Vec<ObjectSpec>,
    pub glyphs: Vec<GlyphSpec>,
    pub language: usize,
    pub seed: u64,
}

impl SceneSpec {
    /// The scene is a pure function of the seed: one to four objects, up to
    /// two glyph plates, one of the eight languages.
    pub fn generate(seed: u64) -> SceneSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let language = rng.gen_range(0..LANGUAGES.len());
        let n_objects = rng.gen_range(1..=4);
        let objects = (0..n_objects)
            .map(|_| {
                let class = rng.gen_range(0..CLASSES.len());
                let color = rng.gen_range(0..COLORS.len());
                let h = rng.gen_range(36.0..96.0);
                let w = rng.gen_range(36.0..96.0);
                let ymin = rng.gen_range(4.0..CANVAS - 4.0 - h);
                let xmin = rng.gen_range(4.0..CANVAS - 4.0 - w);
                ObjectSpec { class, color, bbox: BBox::new(ymin, xmin, ymin + h, xmin + w) }
            })
            .collect();
        let n_glyphs = rng.gen_range(0..=2);
        let glyphs = (0..n_glyphs)
            .map(|_| {
                let text = GLYPH_STRINGS[rng.gen_range(0..GLYPH_STRINGS.len())].to_string();
                let w = 14.0 * text.len() as f64 + 8.0;
                let h = 24.0;
                let ymin = rng.gen_range(4.0..CANVAS - 4.0 - h);
                let xmin = rng.gen_range(4.0..CANVAS - 4.0 - w);
                GlyphSpec { text, bbox: BBox::new(ymin, xmin, ymin + h, xmin + w) }
            })
            .collect();
        SceneSpec { objects, glyphs, language, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.language >= LANGUAGES.len() {
            return Err(Error::InvalidArg {
                op: "scene",
                detail: format!("language index {} out of range", self.language),
            });
        }
        for o in &self.objects {
            o.bbox.check(CANVAS)?;
            if o.class >= CLASSES.len() || o.color >= COLORS.len() {
                return Err(Error::InvalidArg {
                    op: "scene",
                    detail: format!("class {} / color {} out of palette", o.class, o.color),
                });
            }
        }
        for g in &self.glyphs {
            g.bbox.check(CANVAS)?;
            if g.text.is_empty() {
                return Err(Error::InvalidArg { op: "scene", detail: "empty glyph text".into() });
            }
        }
        Ok(())
    }

    /// Objects in reading order (ymin, then xmin): the canonical order for
    /// captions, stories, and detection targets.
    pub fn objects_in_order(&self) -> Vec<&ObjectSpec> {
        let mut v: Vec<&ObjectSpec> = self.objects.iter().collect();
        v.sort_by(|a, b| {
            a.bbox.ymin.total_cmp(&b.bbox.ymin).then(a.bbox.xmin.total_cmp(&b.bbox.xmin))
        });
        v
    }

    /// Glyphs in reading order (ymin, then xmin).
    pub fn glyphs_in_order(&self) -> Vec<&GlyphSpec> {
        let mut v: Vec<&GlyphSpec> = self.glyphs.iter().collect();
        v.sort_by(|a, b| {
            a.bbox.ymin.total_cmp(&b.bbox.ymin).then(a.bbox.xmin.total_cmp(&b.bbox.xmin))
        });
        v
    }
}

/// Deterministic alt-text in the scene's language: objects in reading order,
/// joined with "near".
pub fn alt_text(spec: &SceneSpec) -> String {
    let mut parts: Vec<String> = Vec::new();
    for (i, o) in spec.objects_in_order().iter().enumerate() {
        if i > 0 {
            parts.push("near".into());
        }
        parts.push("a".into());
        parts.push(COLORS[o.color].0.into());
        parts.push(CLASSES[o.class].into());
    }
    cipher_text(spec.language, &parts.join(" "))
}

/// Coarse 3x3 location of a box center, as two story words.
pub fn region_words(bbox: &BBox) -> (&'static str, &'static str) {
    let (cy, cx) = bbox.center();
    let third = |c: f64| ((c / CANVAS * 3.0).floor() as usize).min(2);
    let v = ["top", "middle", "bottom"][third(cy)];
    let h = ["left", "center", "right"][third(cx)];
    (v, h)
}

/// Deterministic long-form description in the scene's language; the span
/// corruption corpus is built from these.
pub fn story(spec: &SceneSpec) -> String {
    let mut s = format!("the image shows {} objects .", spec.objects.len());
    for o in spec.objects_in_order() {
        let (v, h) = region_words(&o.bbox);
        s.push_str(&format!(
            " there is a {} {} in the {v} {h} of the image .",
            COLORS[o.color].0, CLASSES[o.class]
        ));
    }
    for g in spec.glyphs_in_order() {
        s.push_str(&format!(" the text {} appears in the image .", g.text));
    }
    cipher_text(spec.language, &s)
}

/// Detection coordinate bin in 0..=999 for a pixel coordinate at the given
/// resolution. The epsilon keeps exact rational bins (e.g. 22.4/112) from
/// landing one below their value after rounding.
pub fn quantize_coord(p: f64, resolution: usize) -> u32 {
    let q = (p / resolution as f64 * 1000.0 + 1e-9).floor();
    q.clamp(0.0, 999.0) as u32
}

// ── Rendering ───────────────────────────────────────────────────────────────

/// Class-specific fill predicate over box-normalized coordinates (u right,
/// v down, both in [0,1]).
fn shape_hit(class: usize, u: f64, v: f64) -> bool {
    let x = 2.0 * u - 1.0;
    let y = 2.0 * v - 1.0;
    let fract = |t: f64| t - t.floor();
    match class {
        0 => x * x + y * y <= 1.0,                                   // ball
        1 => true,                                                   // cube
        2 => x.abs() <= v,                                           // cone
        3 => (0.25..=1.0).contains(&(x * x + y * y)),                // ring
        4 => u.min(1.0 - u).min(v.min(1.0 - v)) <= 0.15,             // frame
        5 => x.abs() + y.abs() <= 1.0,                               // diamond
        6 => x.abs() <= 0.33 || y.abs() <= 0.33,                     // cross
        7 => y.abs() <= 0.33,                                        // bar
        8 => x.abs() <= 0.33,                                        // post
        9 => v >= u,                                                 // wedge
        10 => x * x + y * y <= 0.25,                                 // dot
        11 => ((u * 2.0).floor() + (v * 2.0).floor()) as i64 % 2 == 0, // tile
        12 => fract((u + v) * 3.0) < 0.5,                            // stripe
        13 => fract(u * 3.0) < 0.2 || fract(v * 3.0) < 0.2,          // grid
        14 => x * x + y * y <= 1.0 && (x - 0.6) * (x - 0.6) + y * y >= 0.49, // moon
        15 => (x * y).abs() <= 0.12,                                 // star
        _ => false,
    }
}

/// 3x5 block glyph font over the characters GLYPH_STRINGS uses.
fn font_rows(c: char) -> [u8; 5] {
    match c {
        'A' => [0b010, 0b101, 0b111, 0b101, 0b101],
        'B' => [0b110, 0b101, 0b110, 0b101, 0b110],
        'C' => [0b011, 0b100, 0b100, 0b100, 0b011],
        'D' => [0b110, 0b101, 0b101, 0b101, 0b110],
        'E' => [0b111, 0b100, 0b110, 0b100, 0b111],
        'F' => [0b111, 0b100, 0b110, 0b100, 0b100],
        'G' => [0b011, 0b100, 0b101, 0b101, 0b011],
        'H' => [0b101, 0b101, 0b111, 0b101, 0b101],
        'I' => [0b111, 0b010, 0b010, 0b010, 0b111],
        'J' => [0b001, 0b001, 0b001, 0b101, 0b010],
        'K' => [0b101, 0b110, 0b100, 0b110, 0b101],
        'L' => [0b100, 0b100, 0b100, 0b100, 0b111],
        'M' => [0b101, 0b111, 0b111, 0b101, 0b101],
        'N' => [0b110, 0b101, 0b101, 0b101, 0b101],
        'O' => [0b010, 0b101, 0b101, 0b101, 0b010],
        'P' => [0b110, 0b101, 0b110, 0b100, 0b100],
        'Q' => [0b010, 0b101, 0b101, 0b110, 0b011],
        'R' => [0b110, 0b101, 0b110, 0b110, 0b101],
        'S' => [0b011, 0b100, 0b010, 0b001, 0b110],
        'T' => [0b111, 0b010, 0b010, 0b010, 0b010],
        'U' => [0b101, 0b101, 0b101, 0b101, 0b111],
        'V' => [0b101, 0b101, 0b101, 0b101, 0b010],
        'W' => [0b101, 0b101, 0b111, 0b111, 0b101],
        'X' => [0b101, 0b101, 0b010, 0b101, 0b101],
        'Y' => [0b101, 0b101, 0b010, 0b010, 0b010],
        'Z' => [0b111, 0b001, 0b010, 0b100, 0b111],
        '0' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '2' => [0b111, 0b001, 0b111, 0b100, 0b111],
        '3' => [0b111, 0b001, 0b111, 0b001, 0b111],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
        '5' => [0b111, 0b100, 0b111, 0b001, 0b111],
        '6' => [0b111, 0b100, 0b111, 0b101, 0b111],
        '7' => [0b111, 0b001, 0b001, 0b001, 0b001],
        '8' => [0b111, 0b101, 0b111, 0b101, 0b111],
        '9' => [0b111, 0b101, 0b111, 0b001, 0b111],
        _ => [0; 5],
    }
}

/// Rasterize a scene to `[resolution, resolution, 3]` values in [0,1].
/// Objects draw in spec order (later over earlier), glyph plates on top.
pub fn render_scene(spec: &SceneSpec, resolution: usize) -> Result<Tensor> {
    spec.validate()?;
    if resolution == 0 {
        return Err(Error::InvalidArg { op: "render_scene", detail: "resolution 0".into() });
    }
    let r = resolution;
    let scale = r as f64 / CANVAS;
    let mut data = vec![BACKGROUND; r * r * 3];

    // Pixel index range covering a canvas-space interval.
    let px_range = |lo: f64, hi: f64| -> (usize, usize) {
        let a = (lo * scale).floor().max(0.0) as usize;
        let b = ((hi * scale).ceil() as usize).min(r);
        (a, b)
    };

    for o in &spec.objects {
        let rgb = COLORS[o.color].1;
        let (y0, y1) = px_range(o.bbox.ymin, o.bbox.ymax);
        let (x0, x1) = px_range(o.bbox.xmin, o.bbox.xmax);
        let bh = o.bbox.ymax - o.bbox.ymin;
        let bw = o.bbox.xmax - o.bbox.xmin;
        for y in y0..y1 {
            let cy = (y as f64 + 0.5) / scale;
            let v = (cy - o.bbox.ymin) / bh;
            if !(0.0..=1.0).contains(&v) {
                continue;
            }
            for x in x0..x1 {
                let cx = (x as f64 + 0.5) / scale;
                let u = (cx - o.bbox.xmin) / bw;
                if (0.0..=1.0).contains(&u) && shape_hit(o.class, u, v) {
                    let base = (y * r + x) * 3;
                    data[base..base + 3].copy_from_slice(&rgb);
                }
            }
        }
    }

    for g in &spec.glyphs {
        let chars: Vec<char> = g.text.chars().collect();
        let (y0, y1) = px_range(g.bbox.ymin, g.bbox.ymax);
        let (x0, x1) = px_range(g.bbox.xmin, g.bbox.xmax);
        let bh = g.bbox.ymax - g.bbox.ymin;
        let bw = g.bbox.xmax - g.bbox.xmin;
        for y in y0..y1 {
            let cy = (y as f64 + 0.5) / scale;
            let v = (cy - g.bbox.ymin) / bh;
            if !(0.0..=1.0).contains(&v) {
                continue;
            }
            for x in x0..x1 {
                let cx = (x as f64 + 0.5) / scale;
                let u = (cx - g.bbox.xmin) / bw;
                if !(0.0..=1.0).contains(&u) {
                    continue;
                }
                let cell = (u * chars.len() as f64).min(chars.len() as f64 - 1e-9);
                let ci = cell.floor() as usize;
                let uu = cell - ci as f64;
                // Inner margin around each 3x5 character block.
                let lit = (0.12..0.88).contains(&uu) && (0.12..0.88).contains(&v) && {
                    let col = (((uu - 0.12) / 0.76 * 3.0).floor() as usize).min(2);
                    let row = (((v - 0.12) / 0.76 * 5.0).floor() as usize).min(4);
                    font_rows(chars[ci])[row] >> (2 - col) & 1 == 1
                };
                let shade = if lit { 0.05 } else { 0.99 };
                let base = (y * r + x) * 3;
                data[base..base + 3].copy_from_slice(&[shade, shade, shade]);
            }
        }
    }

    Tensor::from_vec(vec![r, r, 3], data)
}

// ── Tests ───────────────────────────────────────────────────────────────────
