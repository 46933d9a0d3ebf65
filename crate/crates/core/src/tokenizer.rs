//! Word/codepoint tokenizer with a corpus-built vocabulary.
//!
//! Text is lowercased and split into maximal alphanumeric runs; CJK
//! ideographs are emitted one codepoint per token. Punctuation is dropped.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const MASK: u32 = 1;
pub const UNK: u32 = 2;
pub const RESERVED: [&str; 3] = ["[PAD]", "[MASK]", "[UNK]"];

/// A nonempty sequence of token ids.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSequence(Vec<u32>);

impl TokenSequence {
    pub fn new(tokens: Vec<u32>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Empty("token sequence".into()));
        }
        Ok(Self(tokens))
    }

    pub fn tokens(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn check_vocab(&self, vocab_size: usize) -> Result<()> {
        match self.0.iter().find(|&&id| id as usize >= vocab_size) {
            Some(&id) => Err(Error::OutOfVocabulary { id, vocab: vocab_size }),
            None => Ok(()),
        }
    }
}

fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x3400..=0x4DBF | 0x4E00..=0x9FFF | 0xF900..=0xFAFF | 0x20000..=0x2FA1F
        | 0x3040..=0x30FF | 0xAC00..=0xD7AF)
}

/// Splits text into lowercase word and CJK-codepoint tokens.
pub fn words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut current = String::new();
    for c in text.chars() {
        if is_cjk(c) {
            if !current.is_empty() {
                out.push(std::mem::take(&mut current));
            }
            out.push(c.to_string());
        } else if c.is_alphanumeric() {
            current.extend(c.to_lowercase());
        } else if !current.is_empty() {
            out.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        out.push(current);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Builds a vocabulary from every word in `texts`, sorted so the result
    /// does not depend on corpus order.
    pub fn build<'a, I>(texts: I) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let unique: BTreeSet<String> = texts.into_iter().flat_map(words).collect();
        let all = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(unique)
            .collect();
        Self::from_words(all).expect("reserved tokens are unique and words are deduplicated")
    }

    /// Rebuilds a vocabulary from its id-ordered word list (e.g. a checkpoint).
    pub fn from_words(words: Vec<String>) -> Result<Self> {
        if words.len() < RESERVED.len() || words[..RESERVED.len()] != RESERVED {
            return Err(Error::invalid("vocabulary", "must start with [PAD], [MASK], [UNK]"));
        }
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i as u32).is_some() {
                return Err(Error::DuplicateId(w.clone()));
            }
        }
        Ok(Self { words, index })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    /// Tokenizes `text`, truncating to `max_len` tokens. Unknown words map to
    /// `[UNK]`. Fails if the text has no tokens at all.
    pub fn encode(&self, text: &str, max_len: usize) -> Result<TokenSequence> {
        let ids: Vec<u32> = words(text).iter().take(max_len).map(|w| self.id(w)).collect();
        TokenSequence::new(ids)
    }

    /// Like [`Self::encode`], with `prefix` tokens prepended before truncation.
    pub fn encode_with_prefix(&self, prefix: &str, text: &str, max_len: usize) -> Result<TokenSequence> {
        if prefix.is_empty() {
            return self.encode(text, max_len);
        }
        self.encode(&format!("{prefix} {text}"), max_len)
    }
}
