//! Pluggable tokenizers.
//!
//! The byte-level tokenizer is the default: it needs no vocabulary assets
//! and round-trips Vietnamese diacritics exactly. The whitespace tokenizer
//! exists for tests that want word-level token ids.

use std::collections::HashMap;

/// Maps text to token ids and back.
pub trait Tokenizer {
    fn encode(&self, text: &str) -> Vec<usize>;
    fn decode(&self, ids: &[usize]) -> String;
    fn vocab_size(&self) -> usize;
    fn pad_id(&self) -> usize;
    fn bos_id(&self) -> usize;
    fn eos_id(&self) -> usize;
}

/// One token per UTF-8 byte, plus PAD/BOS/EOS specials.
#[derive(Debug, Clone, Copy, Default)]
pub struct ByteTokenizer;

impl ByteTokenizer {
    pub const PAD: usize = 256;
    pub const BOS: usize = 257;
    pub const EOS: usize = 258;
    pub const VOCAB: usize = 259;
}

impl Tokenizer for ByteTokenizer {
    fn encode(&self, text: &str) -> Vec<usize> {
        text.bytes().map(usize::from).collect()
    }

    fn decode(&self, ids: &[usize]) -> String {
        let bytes: Vec<u8> = ids
            .iter()
            .filter(|&&id| id < 256)
            .map(|&id| id as u8)
            .collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }

    fn vocab_size(&self) -> usize {
        Self::VOCAB
    }

    fn pad_id(&self) -> usize {
        Self::PAD
    }

    fn bos_id(&self) -> usize {
        Self::BOS
    }

    fn eos_id(&self) -> usize {
        Self::EOS
    }
}

/// Fixed-vocabulary whitespace tokenizer. Unknown words map to UNK.
#[derive(Debug, Clone)]
pub struct WhitespaceTokenizer {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl WhitespaceTokenizer {
    pub const PAD: usize = 0;
    pub const BOS: usize = 1;
    pub const EOS: usize = 2;
    pub const UNK: usize = 3;
    const SPECIALS: usize = 4;

    /// Vocabulary from a word list; duplicates keep their first slot.
    pub fn from_words<I: IntoIterator<Item = S>, S: Into<String>>(words: I) -> Self {
        let mut out = WhitespaceTokenizer {
            words: Vec::new(),
            index: HashMap::new(),
        };
        for w in words {
            let w = w.into();
            if !out.index.contains_key(&w) {
                let id = Self::SPECIALS + out.words.len();
                out.index.insert(w.clone(), id);
                out.words.push(w);
            }
        }
        out
    }
}

impl Tokenizer for WhitespaceTokenizer {
    fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace()
            .map(|w| self.index.get(w).copied().unwrap_or(Self::UNK))
            .collect()
    }

    fn decode(&self, ids: &[usize]) -> String {
        let words: Vec<&str> = ids
            .iter()
            .filter_map(|&id| {
                id.checked_sub(Self::SPECIALS)
                    .and_then(|i| self.words.get(i))
                    .map(String::as_str)
            })
            .collect();
        words.join(" ")
    }

    fn vocab_size(&self) -> usize {
        Self::SPECIALS + self.words.len()
    }

    fn pad_id(&self) -> usize {
        Self::PAD
    }

    fn bos_id(&self) -> usize {
        Self::BOS
    }

    fn eos_id(&self) -> usize {
        Self::EOS
    }
}
