//! Per-token character index sequences and hand-crafted binary word flags.

use crate::corpus::{Vocabularies, PAD_ID};

/// Fixed-length character index sequence for one token, zero-padded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CharEncoding {
    pub ids: Vec<usize>,
    pub true_len: usize,
}

/// Encodes a token's characters against the char vocabulary. Characters
/// beyond `max_char_len` are truncated; unseen characters map to the
/// unknown index.
pub fn char_encode(token: &str, vocab: &Vocabularies, max_char_len: usize) -> CharEncoding {
    assert!(max_char_len >= 1, "max_char_len must be >= 1");
    let mut ids = vec![PAD_ID; max_char_len];
    let mut true_len = 0;
    for (i, c) in token.chars().take(max_char_len).enumerate() {
        ids[i] = vocab.chars.id(c);
        true_len = i + 1;
    }
    CharEncoding { ids, true_len }
}

pub const FLAG_COUNT: usize = 6;

/// Six binary surface-form features of a token.
///
/// Order: is_numeric, starts_lowercase, starts_uppercase, all_uppercase,
/// contains_digit, contains_punctuation. `all_uppercase` is set only when
/// every character is an uppercase letter, so `U.S.` does not qualify.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WordFlags(pub [u8; FLAG_COUNT]);

impl WordFlags {
    pub fn as_f64(&self) -> [f64; FLAG_COUNT] {
        let mut out = [0.0; FLAG_COUNT];
        for (o, &b) in out.iter_mut().zip(&self.0) {
            *o = b as f64;
        }
        out
    }
}

fn is_punct(c: char) -> bool {
    !c.is_alphanumeric() && !c.is_whitespace() && !c.is_control()
}

/// Computes the six word flags. `token` must be non-empty.
pub fn word_flags(token: &str) -> WordFlags {
    assert!(!token.is_empty(), "word_flags requires a non-empty token");
    let first = token.chars().next().unwrap();
    let is_numeric = token.chars().all(|c| c.is_numeric());
    let starts_lowercase = first.is_lowercase();
    let starts_uppercase = first.is_uppercase();
    let all_uppercase = token.chars().all(|c| c.is_uppercase());
    let contains_digit = token.chars().any(|c| c.is_numeric());
    let contains_punct = token.chars().any(is_punct);
    WordFlags([
        is_numeric as u8,
        starts_lowercase as u8,
        starts_uppercase as u8,
        all_uppercase as u8,
        contains_digit as u8,
        contains_punct as u8,
    ])
}
