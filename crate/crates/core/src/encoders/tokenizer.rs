use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const SOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
pub const UNK_ID: u32 = 3;
pub const MASK_ID: u32 = 4;
const SPECIALS: [&str; 5] = ["<pad>", "<sos>", "<eos>", "<unk>", "<mask>"];

/// Token ids padded to a fixed length.
///
/// `length` counts the real tokens including SOS and EOS. The global text
/// feature is read at `cls_index`, which is the EOS position as in CLIP.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    ids: Vec<u32>,
    length: usize,
}

impl TokenSequence {
    /// Validates `ids[..length]` as `SOS … EOS` with no other specials
    /// and checks trailing positions are padding.
    pub fn new(ids: Vec<u32>, length: usize, vocab_size: usize) -> Result<Self> {
        if length < 2 || length > ids.len() {
            return Err(Error::InvalidTokens(format!("length {length} invalid for {} ids", ids.len())));
        }
        if ids[0] != SOS_ID {
            return Err(Error::InvalidTokens("first id is not SOS".into()));
        }
        let eos_count = ids.iter().filter(|&&t| t == EOS_ID).count();
        if eos_count != 1 || ids[length - 1] != EOS_ID {
            return Err(Error::InvalidTokens("exactly one EOS must end the sequence".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&t| t as usize >= vocab_size) {
            return Err(Error::OutOfRange { what: "vocabulary entries", index: bad as usize, bound: vocab_size });
        }
        if ids[length..].iter().any(|&t| t != PAD_ID) {
            return Err(Error::InvalidTokens("non-padding id after EOS".into()));
        }
        Ok(Self { ids, length })
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    /// Real tokens including SOS and EOS.
    pub fn len(&self) -> usize {
        self.length
    }

    pub fn is_empty(&self) -> bool {
        self.length == 0
    }

    /// Padded length.
    pub fn padded_len(&self) -> usize {
        self.ids.len()
    }

    pub fn cls_index(&self) -> usize {
        self.length - 1
    }

    pub fn content(&self) -> &[u32] {
        &self.ids[..self.length]
    }

    pub fn valid_mask(&self) -> Vec<bool> {
        (0..self.ids.len()).map(|i| i < self.length).collect()
    }

    /// Same tokens padded (or trimmed of padding) to `len`.
    pub fn repadded(&self, len: usize) -> Result<Self> {
        if len < self.length {
            return Err(Error::InvalidTokens(format!("cannot pad {} tokens to {len}", self.length)));
        }
        let mut ids = self.ids[..self.length].to_vec();
        ids.resize(len, PAD_ID);
        Ok(Self { ids, length: self.length })
    }

    /// Copy with `positions` replaced by the MASK id.
    pub fn with_masked(&self, positions: &[usize]) -> Self {
        let mut ids = self.ids.clone();
        for &p in positions {
            ids[p] = MASK_ID;
        }
        Self { ids, length: self.length }
    }
}

/// Text to token ids. The word-level tokenizer below is the default; a BPE
/// implementation compatible with CLIP vocabularies plugs in through the
/// same trait.
pub trait Tokenizer {
    fn vocab_size(&self) -> usize;
    fn encode(&self, text: &str, max_len: usize) -> TokenSequence;
}

/// Lowercases and splits on whitespace; each punctuation character becomes
/// its own token.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_whitespace() {
            if !cur.is_empty() {
                out.push(core::mem::take(&mut cur));
            }
        } else if ch.is_ascii_punctuation() && ch != '\'' && ch != '-' {
            if !cur.is_empty() {
                out.push(core::mem::take(&mut cur));
            }
            out.push(ch.to_string());
        } else {
            cur.push(ch);
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Word-level vocabulary built from a caption corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WordTokenizer {
    #[serde(rename = "vocab")]
    words: Vec<String>,
    #[serde(skip)]
    lookup: BTreeMap<String, u32>,
}

impl WordTokenizer {
    pub fn from_corpus<'a>(captions: impl IntoIterator<Item = &'a str>) -> Self {
        let mut set = BTreeSet::new();
        for c in captions {
            set.extend(split_words(c));
        }
        let words = SPECIALS.iter().map(|s| s.to_string()).chain(set.into_iter().filter(|w| !SPECIALS.contains(&w.as_str())));
        Self::from_vocab(words.collect()).expect("specials are first")
    }

    /// `words[i]` is the token with id `i`; the first five entries must be
    /// the special tokens.
    pub fn from_vocab(words: Vec<String>) -> Result<Self> {
        if words.len() < SPECIALS.len() || words.iter().zip(SPECIALS).any(|(w, s)| w != s) {
            return Err(Error::Config("vocabulary must start with <pad> <sos> <eos> <unk> <mask>".into()));
        }
        let lookup = words.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect::<BTreeMap<_, _>>();
        if lookup.len() != words.len() {
            return Err(Error::Config("vocabulary has duplicate entries".into()));
        }
        Ok(Self { words, lookup })
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, word: &str) -> u32 {
        self.lookup.get(word).copied().unwrap_or(UNK_ID)
    }

    /// Rebuilds the lookup table after deserialization.
    pub fn reindex(self) -> Result<Self> {
        Self::from_vocab(self.words)
    }
}

impl Tokenizer for WordTokenizer {
    fn vocab_size(&self) -> usize {
        self.words.len()
    }

    /// Truncates to `max_len` keeping EOS in the final slot.
    fn encode(&self, text: &str, max_len: usize) -> TokenSequence {
        assert!(max_len >= 2, "max_len must hold SOS and EOS");
        let mut ids = Vec::with_capacity(max_len);
        ids.push(SOS_ID);
        ids.extend(split_words(text).iter().take(max_len - 2).map(|w| self.id(w)));
        ids.push(EOS_ID);
        let length = ids.len();
        ids.resize(max_len, PAD_ID);
        TokenSequence { ids, length }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn tok() -> WordTokenizer {
        WordTokenizer::from_corpus(["a man in a red shirt, blue pants.", "the woman"])
    }

    #[test]
    fn lowercase_invariance() {
        let t = tok();
        assert_eq!(t.encode("A Man", 32), t.encode("a man", 32));
    }

    #[test]
    fn truncation_keeps_eos_last() {
        let t = tok();
        let long = "a man ".repeat(100);
        let seq = t.encode(&long, 77);
        assert_eq!(seq.len(), 77);
        assert_eq!(seq.padded_len(), 77);
        assert_eq!(seq.ids()[76], EOS_ID);
        assert_eq!(seq.cls_index(), 76);
        TokenSequence::new(seq.ids().to_vec(), seq.len(), t.vocab_size()).unwrap();
    }

    #[test]
    fn empty_text_is_sos_eos() {
        let seq = tok().encode("", 32);
        assert_eq!(seq.content(), &[SOS_ID, EOS_ID]);
        assert_eq!(seq.len(), 2);
    }

    #[test]
    fn punctuation_split_and_unknown_words() {
        assert_eq!(split_words("Red shirt, blue-ish pants."), vec!["red", "shirt", ",", "blue-ish", "pants", "."]);
        let t = tok();
        assert_eq!(t.encode("zebra", 8).content(), &[SOS_ID, UNK_ID, EOS_ID]);
    }

    #[test]
    fn validation_rejects_malformed() {
        assert!(TokenSequence::new(vec![2, 1, 0], 2, 10).is_err());
        assert!(TokenSequence::new(vec![1, 2, 2], 3, 10).is_err());
        assert!(TokenSequence::new(vec![1, 9, 2], 3, 5).is_err());
        assert!(TokenSequence::new(vec![1, 2, 6], 2, 10).is_err());
    }

    #[test]
    fn vocab_serde_round_trip() {
        let t = tok();
        let json = serde_json::to_string(&t).unwrap();
        let back: WordTokenizer = serde_json::from_str::<WordTokenizer>(&json).unwrap().reindex().unwrap();
        assert_eq!(back.encode("a red shirt", 16), t.encode("a red shirt", 16));
    }
}
