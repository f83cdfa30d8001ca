//! Vocabularies, tokenization, and domain-labeled datasets.
//!
//! Tokenization is character-level by default (word-level splitting on
//! whitespace is also supported); there is no subword merging. Ids are dense,
//! BOS is always 0 and UNK is always 1, and trigger tokens are appended at
//! the end of the id range so existing ids never move.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::rng::Stream;
use crate::{Error, Result};

pub type TokenId = usize;

/// A sequence of token ids; every id must be valid under one vocabulary.
pub type TokenSequence = Vec<TokenId>;

pub const BOS_TOKEN: &str = "<bos>";
pub const UNK_TOKEN: &str = "<unk>";

/// Unit the tokenizer splits text into.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TokenizeMode {
    #[default]
    Char,
    Word,
}

/// Bijective token-string <-> id table with reserved sentinels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, TokenId>,
    pub bos_id: TokenId,
    pub unk_id: TokenId,
    pub trigger_ids: Vec<TokenId>,
    pub mode: TokenizeMode,
}

impl Vocabulary {
    /// Builds a vocabulary from `text`: BOS at id 0, UNK at id 1, then the
    /// `max_size - 2` most frequent units, ties broken by first occurrence.
    pub fn build(text: &str, mode: TokenizeMode, max_size: usize) -> Result<Self> {
        if text.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        // max_size 3 admits the degenerate single-unit corpus (sentinels + 1)
        if max_size < 3 {
            return Err(Error::InvalidConfig(format!(
                "max_size {max_size} < 3"
            )));
        }
        let units: Vec<String> = match mode {
            TokenizeMode::Char => text.chars().map(|c| c.to_string()).collect(),
            TokenizeMode::Word => text.split_whitespace().map(str::to_string).collect(),
        };
        if units.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        // (count, first occurrence index) per unit
        let mut stats: HashMap<&str, (usize, usize)> = HashMap::new();
        for (i, u) in units.iter().enumerate() {
            let e = stats.entry(u).or_insert((0, i));
            e.0 += 1;
        }
        let mut ranked: Vec<(&str, usize, usize)> =
            stats.into_iter().map(|(u, (c, i))| (u, c, i)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
        ranked.truncate(max_size - 2);

        let mut tokens = vec![BOS_TOKEN.to_string(), UNK_TOKEN.to_string()];
        tokens.extend(ranked.into_iter().map(|(u, _, _)| u.to_string()));
        Ok(Self::from_tokens(tokens, vec![], mode))
    }

    fn from_tokens(tokens: Vec<String>, trigger_ids: Vec<TokenId>, mode: TokenizeMode) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary {
            tokens,
            index,
            bos_id: 0,
            unk_id: 1,
            trigger_ids,
            mode,
        }
    }

    /// Returns a copy with `count` fresh trigger tokens appended at the end
    /// of the id range; existing ids are unchanged.
    pub fn with_trigger_tokens(&self, count: usize) -> Result<Self> {
        if count == 0 {
            return Err(Error::InvalidConfig("trigger count must be >= 1".into()));
        }
        let mut v = self.clone();
        let base = v.trigger_ids.len();
        for i in 0..count {
            let name = format!("<wm{}>", base + i);
            let id = v.tokens.len();
            v.tokens.push(name.clone());
            v.index.insert(name, id);
            v.trigger_ids.push(id);
        }
        Ok(v)
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn id_of(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    /// Encodes text; out-of-vocabulary units map to `unk_id`.
    pub fn encode(&self, text: &str) -> TokenSequence {
        let lookup = |u: &str| self.index.get(u).copied().unwrap_or(self.unk_id);
        match self.mode {
            TokenizeMode::Char => text
                .chars()
                .map(|c| lookup(c.encode_utf8(&mut [0u8; 4])))
                .collect(),
            TokenizeMode::Word => text.split_whitespace().map(lookup).collect(),
        }
    }

    /// Decodes ids back to text. Inverse of `encode` on in-vocabulary text.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let mut parts = Vec::with_capacity(ids.len());
        for &id in ids {
            let tok = self.token(id).ok_or(Error::TokenOutOfRange {
                id,
                vocab: self.size(),
            })?;
            parts.push(tok);
        }
        Ok(match self.mode {
            TokenizeMode::Char => parts.concat(),
            TokenizeMode::Word => parts.join(" "),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Raw {
            tokens: Vec<String>,
            bos_id: TokenId,
            unk_id: TokenId,
            #[serde(default)]
            trigger_ids: Vec<TokenId>,
            #[serde(default)]
            mode: TokenizeMode,
        }
        let raw: Raw = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if raw.bos_id != 0 || raw.unk_id != 1 {
            return Err(Error::InvalidConfig(
                "vocabulary must have bos_id=0, unk_id=1".into(),
            ));
        }
        if raw.tokens.len() < 3 {
            return Err(Error::InvalidConfig("vocabulary too small".into()));
        }
        for &t in &raw.trigger_ids {
            if t >= raw.tokens.len() {
                return Err(Error::TokenOutOfRange {
                    id: t,
                    vocab: raw.tokens.len(),
                });
            }
        }
        Ok(Self::from_tokens(raw.tokens, raw.trigger_ids, raw.mode))
    }
}

/// Dataset split tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Heldout,
}

/// A named collection of token sequences, all valid under one vocabulary.
#[derive(Debug, Clone)]
pub struct DomainDataset {
    pub name: String,
    pub sequences: Vec<TokenSequence>,
    pub split: Split,
}

impl DomainDataset {
    pub fn new(name: impl Into<String>, sequences: Vec<TokenSequence>, split: Split) -> Result<Self> {
        if sequences.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        Ok(DomainDataset {
            name: name.into(),
            sequences,
            split,
        })
    }

    /// Builds a dataset from one-document-per-line text.
    pub fn from_text(
        name: impl Into<String>,
        vocab: &Vocabulary,
        text: &str,
        split: Split,
    ) -> Result<Self> {
        let sequences: Vec<TokenSequence> = text
            .lines()
            .filter(|l| !l.is_empty())
            .map(|l| vocab.encode(l))
            .collect();
        Self::new(name, sequences, split)
    }

    /// Union of two datasets (used by the joint-watermark baseline).
    pub fn union(&self, other: &DomainDataset, name: impl Into<String>) -> DomainDataset {
        let mut sequences = self.sequences.clone();
        sequences.extend(other.sequences.iter().cloned());
        DomainDataset {
            name: name.into(),
            sequences,
            split: self.split,
        }
    }

    /// Draws `batch` windows of exactly `seq_len` ids. Sequences shorter than
    /// `seq_len` are left-padded with BOS; selection is deterministic given
    /// `rng_seed`. Only sequences of length > 1 are eligible.
    pub fn sample_batch(
        &self,
        batch: usize,
        seq_len: usize,
        bos_id: TokenId,
        rng_seed: u64,
    ) -> Result<Vec<TokenSequence>> {
        let eligible: Vec<&TokenSequence> =
            self.sequences.iter().filter(|s| s.len() > 1).collect();
        if eligible.is_empty() {
            return Err(Error::DegenerateBatch(format!(
                "dataset '{}' has no sequence of length > 1",
                self.name
            )));
        }
        if seq_len < 2 {
            return Err(Error::InvalidConfig("seq_len must be >= 2".into()));
        }
        let mut rng = Stream::new(rng_seed);
        let mut out = Vec::with_capacity(batch);
        for _ in 0..batch {
            let seq = eligible[rng.next_index(eligible.len())];
            let window: TokenSequence = if seq.len() <= seq_len {
                let mut w = vec![bos_id; seq_len - seq.len()];
                w.extend_from_slice(seq);
                w
            } else {
                let start = rng.next_index(seq.len() - seq_len + 1);
                seq[start..start + seq_len].to_vec()
            };
            out.push(window);
        }
        Ok(out)
    }
}

/// The `width` ids immediately preceding position `t` of `ids`, left-padded
/// with BOS when fewer are available. This is the single context convention
/// shared by training, generation, and detection.
pub fn padded_window(ids: &[TokenId], t: usize, width: usize, bos_id: TokenId) -> Vec<TokenId> {
    debug_assert!(t <= ids.len());
    let avail = t.min(width);
    let mut w = vec![bos_id; width - avail];
    w.extend_from_slice(&ids[t - avail..t]);
    w
}
