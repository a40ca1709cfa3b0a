//! Fixed word-level vocabulary for the synthetic captions.

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const MASK: usize = 2;
pub const UNK: usize = 3;
pub const SPECIAL_TOKENS: usize = 4;

pub const WORDS: &[&str] = &[
    "a", "an", "the", "and", "of", "on", "next", "to", "above", "below", "left", "right",
    "red", "green", "blue", "yellow", "magenta", "cyan", "white", "gray", "black", "orange",
    "circle", "square", "triangle", "shape", "background", "small", "large", "with",
];

/// Id of a lower-case word, `UNK` when it is not in the vocabulary.
pub fn word_id(word: &str) -> usize {
    WORDS
        .iter()
        .position(|w| *w == word)
        .map(|i| i + SPECIAL_TOKENS)
        .unwrap_or(UNK)
}

pub fn id_word(id: usize) -> &'static str {
    match id {
        PAD => "[PAD]",
        CLS => "[CLS]",
        MASK => "[MASK]",
        UNK => "[UNK]",
        i if i - SPECIAL_TOKENS < WORDS.len() => WORDS[i - SPECIAL_TOKENS],
        _ => "[UNK]",
    }
}

/// Whitespace tokenisation with a leading CLS; fails when the caption has
/// more than `max_words` words or an id would not fit `vocab_size`.
pub fn tokenize(caption: &str, max_words: usize, vocab_size: usize) -> Result<Vec<usize>> {
    let mut ids = vec![CLS];
    for w in caption.split_whitespace() {
        ids.push(word_id(&w.to_lowercase()));
    }
    if ids.len() - 1 > max_words {
        return Err(Error::Input(format!(
            "caption has {} words, more than {max_words}: {caption:?}",
            ids.len() - 1
        )));
    }
    if let Some(&bad) = ids.iter().find(|&&i| i >= vocab_size) {
        return Err(Error::Config(format!("token id {bad} exceeds vocab_size {vocab_size}")));
    }
    Ok(ids)
}

pub fn detokenize(ids: &[usize]) -> String {
    ids.iter()
        .filter(|&&i| i != CLS && i != PAD)
        .map(|&i| id_word(i))
        .collect::<Vec<_>>()
        .join(" ")
}
