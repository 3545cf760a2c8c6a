use std::collections::HashMap;
use std::path::Path;

use crate::error::{bail, Result};
use crate::model::{BOS, EOS, PAD, UNK};

/// Surface forms of the reserved ids.
pub const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<s>", "</s>"];

/// Token ↔ id mapping with ids 0..3 reserved for PAD, UNK, BOS and EOS.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from non-reserved tokens in id order.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, usize> = all.iter().cloned().enumerate().map(|(i, t)| (t, i)).collect();
        for t in tokens {
            let t = t.into();
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                bail!(Format, "vocabulary token {t:?} is empty or contains whitespace");
            }
            if index.insert(t.clone(), all.len()).is_some() {
                bail!(Format, "duplicate vocabulary token {t:?}");
            }
            all.push(t);
        }
        Ok(Self { tokens: all, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    /// True when only the reserved tokens are present.
    pub fn is_empty(&self) -> bool {
        self.tokens.len() == RESERVED.len()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Non-reserved tokens in id order.
    pub fn tokens(&self) -> &[String] {
        &self.tokens[RESERVED.len()..]
    }

    pub fn encode<'a>(&self, tokens: impl IntoIterator<Item = &'a str>) -> Vec<usize> {
        tokens.into_iter().map(|t| self.id(t)).collect()
    }

    /// Joins the tokens of `ids`, stopping at EOS and skipping PAD/BOS.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut out = Vec::new();
        for &id in ids {
            match id {
                EOS => break,
                PAD | BOS => continue,
                _ => out.push(self.token(id).unwrap_or(RESERVED[UNK])),
            }
        }
        out.join(" ")
    }

    /// One token per line; the reserved tokens are implicit.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        for t in self.tokens() {
            text.push_str(t);
            text.push('\n');
        }
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_tokens(text.lines())
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::Value::from(self.tokens().to_vec())
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self> {
        match v.as_array() {
            Some(items) => {
                let tokens: Option<Vec<&str>> = items.iter().map(|t| t.as_str()).collect();
                match tokens {
                    Some(t) => Self::from_tokens(t),
                    None => bail!(Format, "vocabulary entries must be strings"),
                }
            }
            None => bail!(Format, "vocabulary must be a JSON array"),
        }
    }
}

/// Keeps the most frequent tokens (ties in lexicographic order) up to
/// `max_size` entries including the reserved ones; tokens seen fewer than
/// `min_count` times are dropped.
pub fn build_vocab<S: AsRef<str>>(lines: &[S], max_size: usize, min_count: usize) -> Result<Vocabulary> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for line in lines {
        for t in line.as_ref().split_whitespace() {
            *counts.entry(t).or_default() += 1;
        }
    }
    if counts.is_empty() {
        bail!(Usage, "cannot build a vocabulary from an empty corpus");
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().filter(|&(t, c)| c >= min_count.max(1) && !RESERVED.contains(&t)).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    ranked.truncate(max_size.saturating_sub(RESERVED.len()));
    Vocabulary::from_tokens(ranked.into_iter().map(|(t, _)| t))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frequency_order_after_reserved() {
        let v = build_vocab(&["a a b"], usize::MAX, 1).unwrap();
        assert_eq!(v.id("a"), 4);
        assert_eq!(v.id("b"), 5);
        assert_eq!(v.len(), 6);
    }

    #[test]
    fn ties_are_lexicographic() {
        let v = build_vocab(&["z y x y z"], 100, 1).unwrap();
        assert_eq!(v.tokens(), ["y", "z", "x"]);
    }

    #[test]
    fn truncation_maps_rest_to_unk() {
        let v = build_vocab(&["a a b"], 5, 1).unwrap();
        assert_eq!(v.id("a"), 4);
        assert_eq!(v.id("b"), UNK);
    }

    #[test]
    fn min_count_drops_rare_tokens() {
        let v = build_vocab(&["a a b"], 100, 2).unwrap();
        assert_eq!(v.tokens(), ["a"]);
    }

    #[test]
    fn empty_corpus_is_usage_error() {
        let empty: [&str; 2] = ["", "  "];
        assert!(matches!(build_vocab(&empty, 10, 1), Err(crate::Error::Usage(_))));
    }

    #[test]
    fn save_load_round_trip() {
        let v = build_vocab(&["the cat sat on the mat"], 100, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        v.save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next(), Some("the"));
        let back = Vocabulary::load(&path).unwrap();
        assert_eq!(back, v);
        for t in v.tokens() {
            assert_eq!(back.id(t), v.id(t));
        }
        assert_eq!(Vocabulary::from_json(&v.to_json()).unwrap(), v);
    }

    #[test]
    fn decode_stops_at_eos() {
        let v = Vocabulary::from_tokens(["a", "b"]).unwrap();
        assert_eq!(v.decode(&[BOS, 4, 5, EOS, 4]), "a b");
        assert_eq!(v.decode(&[UNK]), "<unk>");
    }
}
