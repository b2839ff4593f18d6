use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::Dialog;
use crate::error::{Error, Result};

pub type TokenId = u32;

/// Special tokens, in id order. They always occupy ids `0..SPECIALS.len()`.
pub const SPECIALS: [&str; 7] = ["[PAD]", "[MASK]", "[BOS]", "[EOS]", "[SEP]", "[UNK]", "[REGION]"];

/// Lowercase whitespace tokenizer with a closed vocabulary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenizer {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Tokenizer {
    pub const PAD: TokenId = 0;
    pub const MASK: TokenId = 1;
    pub const BOS: TokenId = 2;
    pub const EOS: TokenId = 3;
    pub const SEP: TokenId = 4;
    pub const UNK: TokenId = 5;
    /// Placeholder token id for region-feature slots.
    pub const REGION: TokenId = 6;

    /// Builds a vocabulary from dialog text and detector tags.
    ///
    /// Ids are assigned specials first, then tags, then remaining corpus
    /// tokens with frequency `>= min_count`, each group sorted. Tags are
    /// kept whatever their corpus frequency.
    pub fn build(dialogs: &[Dialog], tags: &[String], min_count: usize) -> Result<Self> {
        if dialogs.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        if min_count == 0 {
            return Err(Error::Config("min_count must be >= 1".into()));
        }
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for d in dialogs {
            for text in d.context.iter().chain(std::iter::once(&d.response)) {
                for tok in split(text) {
                    if special_id(&tok).is_none() {
                        *counts.entry(tok).or_default() += 1;
                    }
                }
            }
        }
        let tag_set: BTreeSet<String> = tags.iter().map(|t| normalize_tag(t)).filter(|t| !t.is_empty()).collect();
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(tag_set.iter().cloned());
        tokens.extend(
            counts
                .into_iter()
                .filter(|(tok, c)| *c >= min_count && !tag_set.contains(tok))
                .map(|(tok, _)| tok),
        );
        Self::from_tokens(tokens)
    }

    /// Wraps an explicit id-ordered token list; specials must lead.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::Config(format!("vocabulary must start with {s} at id {i}")));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Config(format!("invalid vocabulary entry {t:?} at id {i}")));
            }
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::DuplicateId(t.clone()));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> &str {
        self.tokens.get(id as usize).map(String::as_str).unwrap_or(SPECIALS[Self::UNK as usize])
    }

    /// Lowercased whitespace split; unknown tokens map to `[UNK]`.
    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        split(text)
            .map(|t| special_id(&t).or_else(|| self.id(&t)).unwrap_or(Self::UNK))
            .collect()
    }

    /// Id of a detector tag (normalized), or `None` when out of vocabulary.
    pub fn tag_id(&self, tag: &str) -> Option<TokenId> {
        self.id(&normalize_tag(tag))
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter().map(|&i| self.token(i)).collect::<Vec<_>>().join(" ")
    }

    pub fn is_special(id: TokenId) -> bool {
        (id as usize) < SPECIALS.len()
    }

    /// Hex SHA-256 over the newline-joined vocabulary.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }

    /// Writes `vocab.txt`: one token per line, line number = id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }
}

fn split(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_lowercase)
}

fn special_id(lowered: &str) -> Option<TokenId> {
    if !lowered.starts_with('[') {
        return None;
    }
    SPECIALS
        .iter()
        .position(|s| s.eq_ignore_ascii_case(lowered))
        .map(|i| i as TokenId)
}

/// Lowercases a tag and joins multi-word tags with underscores.
pub fn normalize_tag(tag: &str) -> String {
    tag.split_whitespace().map(str::to_lowercase).collect::<Vec<_>>().join("_")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dialogs(texts: &[&str]) -> Vec<Dialog> {
        texts
            .iter()
            .enumerate()
            .map(|(i, t)| Dialog::new(format!("d{i}"), vec![t.to_string()], "x".into()).unwrap())
            .collect()
    }

    #[test]
    fn vocabulary_contains_corpus_and_tags() {
        let tok = Tokenizer::build(&dialogs(&["a b", "b c"]), &["dog".into()], 1).unwrap();
        for t in ["a", "b", "c", "dog", "[PAD]", "[MASK]", "[UNK]"] {
            assert!(tok.id(t).is_some(), "{t} missing");
        }
        assert_eq!(tok.id("[PAD]"), Some(0));
        // specials, then tags, then corpus tokens alphabetically
        assert_eq!(tok.id("dog"), Some(SPECIALS.len() as TokenId));
        assert!(tok.id("a").unwrap() < tok.id("b").unwrap());
    }

    #[test]
    fn min_count_drops_rare_tokens_but_keeps_tags() {
        let tok = Tokenizer::build(&dialogs(&["a b", "b c"]), &["dog".into()], 2).unwrap();
        assert!(tok.id("b").is_some());
        assert!(tok.id("a").is_none());
        assert!(tok.id("c").is_none());
        assert!(tok.id("dog").is_some());
    }

    #[test]
    fn rebuild_is_deterministic() {
        let d = dialogs(&["the dog ran", "a cat sat"]);
        let tags = vec!["traffic light".to_string(), "dog".into()];
        let a = Tokenizer::build(&d, &tags, 1).unwrap();
        let b = Tokenizer::build(&d, &tags, 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.hash(), b.hash());
        assert!(a.id("traffic_light").is_some());
    }

    #[test]
    fn empty_corpus_is_rejected() {
        assert!(matches!(Tokenizer::build(&[], &["dog".into()], 1), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn encode_rules() {
        let tok = Tokenizer::build(&dialogs(&["hello world"]), &[], 1).unwrap();
        assert_eq!(tok.encode("Hello WORLD"), vec![tok.id("hello").unwrap(), tok.id("world").unwrap()]);
        assert_eq!(tok.encode(""), Vec::<TokenId>::new());
        assert_eq!(tok.encode("qzx"), vec![Tokenizer::UNK]);
        assert_eq!(tok.encode("a [SEP] b")[1], Tokenizer::SEP);
    }

    #[test]
    fn vocab_file_round_trip() {
        let tok = Tokenizer::build(&dialogs(&["a b c"]), &["hot dog".into()], 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        tok.save(&path).unwrap();
        assert_eq!(Tokenizer::load(&path).unwrap(), tok);
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(ids in proptest::collection::vec(0u32..12, 0..20)) {
            let tok = Tokenizer::build(&dialogs(&["alpha beta gamma delta"]), &["dog".into()], 1).unwrap();
            let ids: Vec<TokenId> = ids.into_iter().map(|i| i % tok.len() as TokenId).collect();
            prop_assert_eq!(tok.encode(&tok.decode(&ids)), ids);
        }
    }
}
