//! Text ingestion: a closed vocabulary, fixed-length packing and seeded
//! member / non-member / candidate splits.

pub mod io;
pub mod synthetic;

use std::collections::BTreeSet;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

/// Default packing length.
pub const DEFAULT_PACKING_LENGTH: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VocabMode {
    Byte,
    Char,
}

/// Token universe. Content tokens occupy `[0, V - 3)`, followed by PAD, MASK
/// and BOS in that order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    mode: VocabMode,
    /// Sorted alphabet for char mode; empty in byte mode.
    #[serde(default)]
    chars: Vec<char>,
}

impl Vocabulary {
    pub fn byte() -> Self {
        Vocabulary {
            mode: VocabMode::Byte,
            chars: Vec::new(),
        }
    }

    pub fn build<S: AsRef<str>>(lines: &[S], mode: VocabMode) -> Result<Self> {
        if lines.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        match mode {
            VocabMode::Byte => Ok(Self::byte()),
            VocabMode::Char => {
                let set: BTreeSet<char> = lines.iter().flat_map(|l| l.as_ref().chars()).collect();
                if set.is_empty() {
                    return Err(Error::EmptyCorpus);
                }
                Ok(Vocabulary {
                    mode,
                    chars: set.into_iter().collect(),
                })
            }
        }
    }

    pub fn mode(&self) -> VocabMode {
        self.mode
    }

    fn content_size(&self) -> usize {
        match self.mode {
            VocabMode::Byte => 256,
            VocabMode::Char => self.chars.len(),
        }
    }

    pub fn size(&self) -> usize {
        self.content_size() + 3
    }

    pub fn pad(&self) -> TokenId {
        self.content_size() as TokenId
    }

    pub fn mask(&self) -> TokenId {
        self.content_size() as TokenId + 1
    }

    pub fn bos(&self) -> TokenId {
        self.content_size() as TokenId + 2
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        id as usize >= self.content_size()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        match self.mode {
            VocabMode::Byte => Ok(text.bytes().map(TokenId::from).collect()),
            VocabMode::Char => text
                .chars()
                .map(|c| {
                    self.chars
                        .binary_search(&c)
                        .map(|i| i as TokenId)
                        .map_err(|_| Error::UnknownCharacter(c))
                })
                .collect(),
        }
    }

    /// Decodes content tokens; BOS renders as a newline, PAD and MASK as
    /// nothing. Invalid UTF-8 (a window that splits a multi-byte character)
    /// is replaced lossily.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        let bos = self.bos();
        match self.mode {
            VocabMode::Byte => {
                let bytes: Vec<u8> = ids
                    .iter()
                    .filter_map(|&id| match id {
                        0..=255 => Some(id as u8),
                        _ if id == bos => Some(b'\n'),
                        _ => None,
                    })
                    .collect();
                String::from_utf8_lossy(&bytes).into_owned()
            }
            VocabMode::Char => ids
                .iter()
                .filter_map(|&id| {
                    if id == bos {
                        Some('\n')
                    } else {
                        self.chars.get(id as usize).copied()
                    }
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitLabel {
    Member,
    Nonmember,
    Candidate,
}

impl fmt::Display for SplitLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitLabel::Member => "member",
            SplitLabel::Nonmember => "nonmember",
            SplitLabel::Candidate => "candidate",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub id: String,
    pub tokens: Vec<TokenId>,
    pub split: SplitLabel,
}

impl TokenSequence {
    pub fn new(id: impl Into<String>, tokens: Vec<TokenId>, split: SplitLabel) -> Self {
        TokenSequence {
            id: id.into(),
            tokens,
            split,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seed: u64,
    pub n_member: usize,
    pub n_nonmember: usize,
    pub packing_length: usize,
}

/// Concatenates the records, each preceded by `bos`, and cuts the stream into
/// non-overlapping windows of exactly `len` tokens. The trailing partial
/// window is dropped.
pub fn pack(records: &[Vec<TokenId>], len: usize, bos: TokenId) -> Result<Vec<TokenSequence>> {
    if len < 2 {
        return Err(Error::config(format!(
            "packing length must be >= 2, got {len}"
        )));
    }
    let total: usize = records.iter().map(|r| r.len() + 1).sum();
    let mut stream = Vec::with_capacity(total);
    for r in records {
        stream.push(bos);
        stream.extend_from_slice(r);
    }
    Ok(stream
        .chunks_exact(len)
        .enumerate()
        .map(|(i, w)| TokenSequence::new(format!("seq-{i:06}"), w.to_vec(), SplitLabel::Candidate))
        .collect())
}

/// Seeded partition into (members, non-members, candidates). Each part keeps
/// the input order of its sequences.
pub fn split(
    sequences: &[TokenSequence],
    spec: &SplitSpec,
) -> Result<(Vec<TokenSequence>, Vec<TokenSequence>, Vec<TokenSequence>)> {
    if spec.packing_length < 2 {
        return Err(Error::config("packing length must be >= 2"));
    }
    let requested = spec.n_member + spec.n_nonmember;
    if requested > sequences.len() {
        return Err(Error::InsufficientData {
            requested,
            available: sequences.len(),
        });
    }
    let mut order: Vec<usize> = (0..sequences.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));

    let mut labels = vec![SplitLabel::Candidate; sequences.len()];
    for &i in &order[..spec.n_member] {
        labels[i] = SplitLabel::Member;
    }
    for &i in &order[spec.n_member..requested] {
        labels[i] = SplitLabel::Nonmember;
    }

    let (mut mem, mut non, mut cand) = (Vec::new(), Vec::new(), Vec::new());
    for (seq, label) in sequences.iter().zip(labels) {
        let mut s = seq.clone();
        s.split = label;
        match label {
            SplitLabel::Member => mem.push(s),
            SplitLabel::Nonmember => non.push(s),
            SplitLabel::Candidate => cand.push(s),
        }
    }
    Ok((mem, non, cand))
}
