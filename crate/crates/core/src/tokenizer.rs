//! Closed-vocabulary word tokenizer with byte fallback.
//!
//! The id space is fixed: pad 0, eos 1, one hundred sentinel slots, 256 raw
//! bytes, then every word the corpus generators can emit. Any other word
//! falls back to its bytes, with the adjoining spaces encoded explicitly so
//! decoding needs no guessing — `detokenize(tokenize(s)) == s` for every
//! single-space-separated string.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::model::config::{EOS_ID, PAD_ID};
use crate::scene::{cipher_word, CLASSES, COLORS, GLYPH_STRINGS, LANGUAGES};

pub const NUM_SENTINELS: u32 = 100;
const SENTINEL_BASE: u32 = 2;
const BYTE_BASE: u32 = SENTINEL_BASE + NUM_SENTINELS;
const WORD_BASE: u32 = BYTE_BASE + 256;

/// Default model vocabulary size; the closed word set must fit under it.
pub const DEFAULT_VOCAB: usize = 2048;

/// Words shared by captions and stories; these get a ciphered copy per
/// language so every language's text stays in-vocabulary.
const CONTENT_WORDS: &[&str] = &[
    "a", "the", "near", "there", "is", "in", "image", "shows", "objects", "of", "top", "bottom",
    "middle", "left", "right", "center", "text", "appears", "what", "color", "how", "many",
];

/// English-only template scaffolding and answer words.
const TEMPLATE_WORDS: &[&str] = &[
    "Generate", "the", "alt_text", "in", "at", "ocr_text", "Answer", "a", "question", "for",
    "detect", "and", "List", "objects", "present", "image:", "Is", "Are", "both", "Which", "of",
    "are", "image?", "Yes", "No", "none", "EN:",
];

pub struct Tokenizer {
    words: Vec<String>,
    lookup: HashMap<String, u32>,
}

impl Tokenizer {
    pub fn new() -> Tokenizer {
        let mut tok = Tokenizer { words: Vec::new(), lookup: HashMap::new() };
        for k in 0..NUM_SENTINELS {
            // Reserved surface forms; present in the map so templates hit
            // the single reserved id, but not re-added to `words`.
            tok.lookup.insert(sentinel_text(k), SENTINEL_BASE + k);
        }
        for n in 0..1000 {
            tok.add(&n.to_string());
        }
        for n in 0..=40 {
            tok.add(&format!("{n}:"));
        }
        let mut content: Vec<String> = Vec::new();
        for c in CLASSES {
            content.push(c.to_string());
        }
        for (c, _) in COLORS {
            content.push(c.to_string());
        }
        for w in CONTENT_WORDS {
            content.push(w.to_string());
        }
        content.push(".".to_string());
        for lang in 0..LANGUAGES.len() {
            for w in &content {
                tok.add(&cipher_word(lang, w));
            }
        }
        for w in TEMPLATE_WORDS {
            tok.add(w);
        }
        for lang in LANGUAGES {
            tok.add(lang);
        }
        for lang in LANGUAGES {
            tok.add(&format!("{lang}:"));
        }
        for (c, _) in COLORS {
            tok.add(&format!("{c}:"));
        }
        for c in CLASSES {
            tok.add(&format!("{c},"));
        }
        for g in GLYPH_STRINGS {
            tok.add(g);
        }
        assert!(
            WORD_BASE as usize + tok.words.len() <= DEFAULT_VOCAB,
            "closed word set overflows the default vocabulary"
        );
        tok
    }

    fn add(&mut self, word: &str) {
        if !self.lookup.contains_key(word) {
            let id = WORD_BASE + self.words.len() as u32;
            self.words.push(word.to_string());
            self.lookup.insert(word.to_string(), id);
        }
    }

    /// Ids in use, including unassigned headroom up to the model vocabulary.
    pub fn vocab_size(&self) -> usize {
        DEFAULT_VOCAB
    }

    pub fn sentinel(k: u32) -> u32 {
        assert!(k < NUM_SENTINELS, "sentinel index out of range");
        SENTINEL_BASE + k
    }

    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        let words: Vec<&str> = text.split_whitespace().collect();
        let mut ids = Vec::new();
        let mut prev_was_bytes = false;
        for (i, w) in words.iter().enumerate() {
            match self.lookup.get(*w) {
                Some(&id) => {
                    ids.push(id);
                    prev_was_bytes = false;
                }
                None => {
                    // Byte fallback: spell out the separating spaces so the
                    // decoder never has to infer them.
                    if i > 0 && !prev_was_bytes {
                        ids.push(BYTE_BASE + b' ' as u32);
                    }
                    for &b in w.as_bytes() {
                        ids.push(BYTE_BASE + b as u32);
                    }
                    if i + 1 < words.len() {
                        ids.push(BYTE_BASE + b' ' as u32);
                    }
                    prev_was_bytes = true;
                }
            }
        }
        ids
    }

    /// Tokenize and append EOS: the form every training target takes.
    pub fn encode_target(&self, text: &str) -> Vec<u32> {
        let mut ids = self.tokenize(text);
        ids.push(EOS_ID);
        ids
    }

    /// Inverse of `tokenize`. PAD is skipped, EOS ends decoding, and ids in
    /// the unassigned headroom render as nothing.
    pub fn detokenize(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        let mut bytes: Vec<u8> = Vec::new();
        let mut last_was_word = false;
        for &id in ids {
            if id == EOS_ID {
                break;
            }
            if id == PAD_ID {
                continue;
            }
            if (BYTE_BASE..WORD_BASE).contains(&id) {
                bytes.push((id - BYTE_BASE) as u8);
                last_was_word = false;
                continue;
            }
            if !bytes.is_empty() {
                out.push_str(&String::from_utf8_lossy(&bytes));
                bytes.clear();
            }
            let piece = self.id_text(id);
            if last_was_word {
                out.push(' ');
            }
            out.push_str(&piece);
            last_was_word = true;
        }
        if !bytes.is_empty() {
            out.push_str(&String::from_utf8_lossy(&bytes));
        }
        out
    }

    fn id_text(&self, id: u32) -> String {
        if (SENTINEL_BASE..BYTE_BASE).contains(&id) {
            return sentinel_text(id - SENTINEL_BASE);
        }
        match self.words.get((id - WORD_BASE) as usize) {
            Some(w) => w.clone(),
            None => String::new(),
        }
    }
}

impl Default for Tokenizer {
    fn default() -> Self {
        Tokenizer::new()
    }
}

pub fn sentinel_text(k: u32) -> String {
    format!("<extra_id_{k}>")
}

/// Ensures a tokenized id sequence is addressable by a model vocabulary.
pub fn check_fits(ids: &[u32], vocab_size: usize) -> Result<()> {
    match ids.iter().find(|&&id| id as usize >= vocab_size) {
        Some(&id) => Err(Error::InvalidArg {
            op: "tokenize",
            detail: format!("token id {id} exceeds vocab size {vocab_size}"),
        }),
        None => Ok(()),
    }
}

// ── Tests ───────────────────────────────────────────────────────────────────
