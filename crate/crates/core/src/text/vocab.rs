use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
const RESERVED: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"];

/// Lowercases and splits on anything that is not alphanumeric.
pub fn words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

/// Word vocabulary. Ids 0..4 are reserved; the rest follow corpus frequency
/// (descending), ties broken lexicographically.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Serialize for Vocab {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.tokens[RESERVED.len()..].serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vocab {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let words = Vec::<String>::deserialize(d)?;
        Vocab::from_words(words).map_err(serde::de::Error::custom)
    }
}

impl Vocab {
    /// Builds from an explicit ordered word list (the serialised form).
    pub fn from_words(words: Vec<String>) -> Result<Self> {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(words);
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!(
                    "duplicate vocabulary entry {t:?}"
                )));
            }
        }
        Ok(Vocab { tokens, ids })
    }

    pub fn build<S: AsRef<str>>(corpus: &[S], min_freq: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::InvalidArgument(
                "cannot build a vocabulary from an empty corpus".into(),
            ));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for line in corpus {
            for w in words(line.as_ref()) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut entries: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(w, c)| *c >= min_freq.max(1) && !RESERVED.contains(&w.as_str()))
            .collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Vocab::from_words(entries.into_iter().map(|(w, _)| w).collect())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, word: &str) -> usize {
        self.ids.get(word).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// `[CLS] words [SEP]` padded with `[PAD]` to `max_tokens`; when too long,
    /// the last kept slot holds `[SEP]`.
    pub fn tokenize(&self, text: &str, max_tokens: usize) -> Result<Vec<usize>> {
        if max_tokens < 2 {
            return Err(Error::Config(format!(
                "max_tokens must be at least 2, got {max_tokens}"
            )));
        }
        let mut ids = vec![CLS];
        ids.extend(words(text).iter().map(|w| self.id(w)).take(max_tokens - 2));
        ids.push(SEP);
        ids.resize(max_tokens, PAD);
        Ok(ids)
    }

    /// Inverse of [`Vocab::tokenize`] for in-vocabulary text.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i > SEP)
            .filter_map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn build_is_order_independent() {
        let a = Vocab::build(&["Walk forward", "walk back"], 1).unwrap();
        let b = Vocab::build(&["walk back", "Walk forward"], 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 7);
        assert_eq!(a.token(4), Some("walk"));
        assert_eq!(a.token(5), Some("back"));
        assert_eq!(a.token(6), Some("forward"));
        assert_eq!(a.id("run"), UNK);
        assert!(Vocab::build::<&str>(&[], 1).is_err());
    }

    #[test]
    fn tokenize_shapes() {
        let v = Vocab::build(&["walk, walk!"], 1).unwrap();
        assert_eq!(v.tokenize("", 5).unwrap(), vec![CLS, SEP, PAD, PAD, PAD]);
        assert_eq!(
            v.tokenize("walk walk", 6).unwrap(),
            vec![CLS, 4, 4, SEP, PAD, PAD]
        );
        let long = "walk ".repeat(100);
        let ids = v.tokenize(&long, 32).unwrap();
        assert_eq!(ids.len(), 32);
        assert_eq!(ids[31], SEP);
        assert!(ids[1..31].iter().all(|&i| i == 4));
        assert_eq!(
            v.detokenize(&v.tokenize("Walk... WALK", 8).unwrap()),
            "walk walk"
        );
    }

    #[test]
    fn serialises_as_word_array() {
        let v = Vocab::build(&["b a a"], 1).unwrap();
        let s = serde_json::to_string(&v).unwrap();
        assert_eq!(s, r#"["a","b"]"#);
        assert_eq!(serde_json::from_str::<Vocab>(&s).unwrap(), v);
    }
}
