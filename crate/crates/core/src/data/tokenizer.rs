use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::lexicon::{COPY_TASK, FILL};
use super::Catalog;

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";
pub const NONE: &str = "none";

pub const PAD_ID: usize = 0;
pub const BOS_ID: usize = 1;
pub const EOS_ID: usize = 2;
pub const UNK_ID: usize = 3;

pub fn separator(i: usize) -> String {
    format!("[s_{i}]")
}

pub fn is_separator(token: &str) -> bool {
    separator_index(token).is_some()
}

/// `Some(i)` for the token `[s_i]`.
pub fn separator_index(token: &str) -> Option<usize> {
    let inner = token.strip_prefix("[s_")?.strip_suffix(']')?;
    if inner.is_empty() || !inner.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    inner.parse().ok()
}

/// Closed word-level vocabulary. Text is split on whitespace; words outside
/// the vocabulary map to `<unk>`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Tokenizer {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    max_separator: usize,
}

impl From<Vec<String>> for Tokenizer {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        let max_separator = tokens.iter().filter_map(|t| separator_index(t)).max().unwrap_or(0);
        Self {
            tokens,
            index,
            max_separator,
        }
    }
}

impl From<Tokenizer> for Vec<String> {
    fn from(t: Tokenizer) -> Self {
        t.tokens
    }
}

impl Tokenizer {
    /// Specials, separators `[s_0]..[s_max_slots]`, then `words` in first-seen order.
    pub fn new<I, S>(max_slots: usize, words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut tokens: Vec<String> = [PAD, BOS, EOS, UNK, NONE, FILL, COPY_TASK].iter().map(|s| s.to_string()).collect();
        tokens.extend((0..=max_slots).map(separator));
        let mut t = Self::from(tokens);
        for w in words {
            for piece in w.as_ref().split_whitespace() {
                t.push(piece);
            }
        }
        t
    }

    /// Vocabulary of the built-in catalog; see [`Catalog::tokenizer`].
    pub fn standard() -> Self {
        Catalog::standard().tokenizer()
    }

    /// Adds `word` if absent and returns its id.
    pub fn push(&mut self, word: &str) -> usize {
        if let Some(&id) = self.index.get(word) {
            return id;
        }
        let id = self.tokens.len();
        self.tokens.push(word.to_string());
        self.index.insert(word.to_string(), id);
        if let Some(i) = separator_index(word) {
            self.max_separator = self.max_separator.max(i);
        }
        id
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn max_separator(&self) -> usize {
        self.max_separator
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    /// True when every whitespace-separated word of `text` is in the vocabulary.
    pub fn covers(&self, text: &str) -> bool {
        text.split_whitespace().all(|w| self.contains(w))
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|w| self.id(w).unwrap_or(UNK_ID)).collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.token(i).unwrap_or(UNK)).collect::<Vec<_>>().join(" ")
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}
