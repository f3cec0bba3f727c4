use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Closed word-level vocabulary. Text is lowercased and split on
/// whitespace; `.` and `,` become tokens of their own. There is no
/// unknown-word token: out-of-vocabulary words are an error.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl From<Vec<String>> for Vocab {
    fn from(words: Vec<String>) -> Self {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        Vocab { words, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.words
    }
}

pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for raw in text.split_whitespace() {
        let lower = raw.to_lowercase();
        let trimmed = lower.trim_end_matches(['.', ',']);
        if !trimmed.is_empty() {
            out.push(trimmed.to_string());
        }
        for c in lower[trimmed.len()..].chars() {
            out.push(c.to_string());
        }
    }
    out
}

impl Vocab {
    /// Builds a sorted vocabulary from every word in `texts`.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let words: BTreeSet<String> = texts.into_iter().flat_map(split_words).collect();
        Vocab::from(words.into_iter().collect::<Vec<_>>())
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        split_words(text)
            .into_iter()
            .map(|w| self.id(&w).ok_or(Error::UnknownToken(w)))
            .collect()
    }
}
