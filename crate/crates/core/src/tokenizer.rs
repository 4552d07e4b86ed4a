//! Byte-level BPE tokenizer with corpus token counting and id remapping.
//!
//! Id layout: `<pad>`, `<unk>`, `<eos>` take ids 0..3, the 256 single bytes
//! follow (`3 + byte`), then one id per learned merge in merge order.
//! Embedding pruning keeps the full merge table and adds a list of retained
//! ids; encoding then maps dropped tokens to `<unk>`.

use std::collections::HashMap;
use std::path::Path;

use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const EOS: u32 = 2;
pub const SPECIAL_NAMES: [&str; 3] = ["<pad>", "<unk>", "<eos>"];
pub const NUM_SPECIALS: usize = 3;
/// Specials plus the 256 byte tokens.
pub const BASE_VOCAB: usize = NUM_SPECIALS + 256;

pub const TOKENIZER_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct BpeTokenizer {
    /// Byte strings for the full (never pruned) id space.
    vocab: Vec<Vec<u8>>,
    merges: Vec<(u32, u32)>,
    merge_rank: HashMap<(u32, u32), u32>,
    remap: Option<TokenRemap>,
}

/// Bijection between retained old ids and dense new ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenRemap {
    old_to_new: HashMap<u32, u32>,
    new_to_old: Vec<u32>,
}

impl TokenRemap {
    /// `keep` must be strictly increasing, within `0..old_vocab`, and contain every special.
    pub fn from_keep(keep: &[u32], old_vocab: usize) -> Result<Self> {
        if keep.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Plan("kept token ids must be strictly increasing".into()));
        }
        if let Some(&last) = keep.last() {
            if last as usize >= old_vocab {
                return Err(Error::Index {
                    what: "kept token",
                    index: last as usize,
                    bound: old_vocab,
                });
            }
        }
        if keep.len() < NUM_SPECIALS || keep[..NUM_SPECIALS] != [PAD, UNK, EOS] {
            return Err(Error::Plan("special tokens must always be kept".into()));
        }
        let old_to_new = keep.iter().enumerate().map(|(new, &old)| (old, new as u32)).collect();
        Ok(Self {
            old_to_new,
            new_to_old: keep.to_vec(),
        })
    }

    pub fn identity(vocab: usize) -> Self {
        let keep: Vec<u32> = (0..vocab as u32).collect();
        Self::from_keep(&keep, vocab).expect("identity keep list is valid")
    }

    pub fn to_new(&self, old: u32) -> Option<u32> {
        self.old_to_new.get(&old).copied()
    }

    pub fn to_old(&self, new: u32) -> Option<u32> {
        self.new_to_old.get(new as usize).copied()
    }

    /// Maps old ids to new ids, sending dropped tokens to `<unk>`.
    pub fn apply(&self, ids: &[u32]) -> Vec<u32> {
        ids.iter().map(|&id| self.to_new(id).unwrap_or(UNK)).collect()
    }

    pub fn new_to_old(&self) -> &[u32] {
        &self.new_to_old
    }

    pub fn len(&self) -> usize {
        self.new_to_old.len()
    }

    pub fn is_empty(&self) -> bool {
        self.new_to_old.is_empty()
    }

    pub fn is_identity(&self) -> bool {
        self.new_to_old.iter().enumerate().all(|(i, &o)| i as u32 == o)
    }

    /// `self` followed by `next` (whose old space is `self`'s new space).
    pub fn then(&self, next: &TokenRemap) -> Result<TokenRemap> {
        let keep: Vec<u32> = next
            .new_to_old
            .iter()
            .map(|&mid| {
                self.to_old(mid).ok_or(Error::Index {
                    what: "remapped token",
                    index: mid as usize,
                    bound: self.len(),
                })
            })
            .collect::<Result<_>>()?;
        let bound = keep.last().map_or(0, |&k| k as usize + 1);
        TokenRemap::from_keep(&keep, bound)
    }
}

fn base_vocab() -> Vec<Vec<u8>> {
    let mut vocab: Vec<Vec<u8>> = SPECIAL_NAMES.iter().map(|s| s.as_bytes().to_vec()).collect();
    vocab.extend((0..=255u8).map(|b| vec![b]));
    vocab
}

fn byte_ids(text: &str) -> Vec<u32> {
    text.bytes().map(|b| NUM_SPECIALS as u32 + b as u32).collect()
}

/// Replaces every non-overlapping occurrence of `pair` (left to right) with `new_id`.
fn merge_pair(seq: &mut Vec<u32>, pair: (u32, u32), new_id: u32) {
    let mut out = Vec::with_capacity(seq.len());
    let mut i = 0;
    while i < seq.len() {
        if i + 1 < seq.len() && (seq[i], seq[i + 1]) == pair {
            out.push(new_id);
            i += 2;
        } else {
            out.push(seq[i]);
            i += 1;
        }
    }
    *seq = out;
}

impl BpeTokenizer {
    /// Tokenizer with no merges: specials plus raw bytes.
    pub fn byte_level() -> Self {
        Self::from_parts(base_vocab(), Vec::new(), None)
    }

    fn from_parts(vocab: Vec<Vec<u8>>, merges: Vec<(u32, u32)>, remap: Option<TokenRemap>) -> Self {
        let merge_rank = merges
            .iter()
            .enumerate()
            .map(|(rank, &pair)| (pair, rank as u32))
            .collect();
        Self {
            vocab,
            merges,
            merge_rank,
            remap,
        }
    }

    /// Greedy BPE: repeatedly merges the most frequent adjacent pair until
    /// `vocab_size` is reached or no pair occurs at least twice. Ties go to the
    /// pair whose (left bytes, right bytes) is lexicographically smallest.
    pub fn train<T: AsRef<str>>(corpus: &[T], vocab_size: usize) -> Result<Self> {
        if vocab_size < BASE_VOCAB {
            return Err(Error::Training(format!(
                "vocab_size {vocab_size} is below the base alphabet size {BASE_VOCAB}"
            )));
        }
        let mut seqs: Vec<Vec<u32>> = corpus
            .iter()
            .map(|s| byte_ids(s.as_ref()))
            .filter(|s| !s.is_empty())
            .collect();
        if seqs.is_empty() {
            return Err(Error::Training("corpus is empty".into()));
        }
        let mut vocab = base_vocab();
        let mut merges = Vec::new();
        while vocab.len() < vocab_size {
            let mut counts: HashMap<(u32, u32), u64> = HashMap::new();
            for seq in &seqs {
                for w in seq.windows(2) {
                    *counts.entry((w[0], w[1])).or_insert(0) += 1;
                }
            }
            let best = counts.into_iter().max_by(|(pa, ca), (pb, cb)| {
                ca.cmp(cb).then_with(|| {
                    let ka = (&vocab[pa.0 as usize], &vocab[pa.1 as usize]);
                    let kb = (&vocab[pb.0 as usize], &vocab[pb.1 as usize]);
                    // smaller byte pair wins the tie, so it must compare as "greater"
                    kb.cmp(&ka)
                })
            });
            let Some((pair, count)) = best else { break };
            if count < 2 {
                break;
            }
            let new_id = vocab.len() as u32;
            let mut bytes = vocab[pair.0 as usize].clone();
            bytes.extend_from_slice(&vocab[pair.1 as usize]);
            vocab.push(bytes);
            merges.push(pair);
            for seq in &mut seqs {
                merge_pair(seq, pair, new_id);
            }
        }
        Ok(Self::from_parts(vocab, merges, None))
    }

    /// Number of ids the model sees (after any pruning).
    pub fn vocab_size(&self) -> usize {
        match &self.remap {
            Some(r) => r.len(),
            None => self.vocab.len(),
        }
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn remap(&self) -> Option<&TokenRemap> {
        self.remap.as_ref()
    }

    /// Byte string of a (current-space) id.
    pub fn token_bytes(&self, id: u32) -> Result<&[u8]> {
        let full = match &self.remap {
            Some(r) => r.to_old(id),
            None => Some(id).filter(|&i| (i as usize) < self.vocab.len()),
        };
        full.map(|f| self.vocab[f as usize].as_slice()).ok_or(Error::Index {
            what: "token id",
            index: id as usize,
            bound: self.vocab_size(),
        })
    }

    /// Encoding in the full, unpruned id space.
    fn encode_full(&self, text: &str) -> Vec<u32> {
        let mut ids = byte_ids(text);
        loop {
            let best = ids
                .windows(2)
                .filter_map(|w| self.merge_rank.get(&(w[0], w[1])).copied())
                .min();
            let Some(rank) = best else { break };
            let pair = self.merges[rank as usize];
            merge_pair(&mut ids, pair, (BASE_VOCAB + rank as usize) as u32);
        }
        ids
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let ids = self.encode_full(text);
        match &self.remap {
            Some(r) => r.apply(&ids),
            None => ids,
        }
    }

    pub fn decode_bytes(&self, ids: &[u32]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            out.extend_from_slice(self.token_bytes(id)?);
        }
        Ok(out)
    }

    /// Concatenated token bytes; invalid UTF-8 is replaced lossily.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        Ok(String::from_utf8_lossy(&self.decode_bytes(ids)?).into_owned())
    }

    /// Count of each id over the encodings of every entry.
    pub fn token_frequency<T: AsRef<str>>(&self, dataset: &[T]) -> Vec<u64> {
        let mut counts = vec![0u64; self.vocab_size()];
        for entry in dataset {
            for id in self.encode(entry.as_ref()) {
                counts[id as usize] += 1;
            }
        }
        counts
    }

    /// Restricts the id space to the kept ids of `remap` (expressed in the current space).
    pub fn with_remap(&self, remap: &TokenRemap) -> Result<Self> {
        if remap.is_identity() && remap.len() == self.vocab_size() {
            return Ok(self.clone());
        }
        let composed = match &self.remap {
            Some(existing) => existing.then(remap)?,
            None => {
                if let Some(&last) = remap.new_to_old.last() {
                    if last as usize >= self.vocab.len() {
                        return Err(Error::Index {
                            what: "kept token",
                            index: last as usize,
                            bound: self.vocab.len(),
                        });
                    }
                }
                remap.clone()
            }
        };
        Ok(Self::from_parts(self.vocab.clone(), self.merges.clone(), Some(composed)))
    }

    // ---- serialization ------------------------------------------------------

    pub fn to_file_repr(&self) -> TokenizerFile {
        TokenizerFile {
            version: TOKENIZER_FORMAT_VERSION,
            specials: Specials {
                pad: PAD,
                unk: UNK,
                eos: EOS,
            },
            vocab: self.vocab.iter().map(|b| TokenBytes::from_bytes(b)).collect(),
            merges: self.merges.iter().map(|&(a, b)| [a, b]).collect(),
            retained: self.remap.as_ref().map(|r| r.new_to_old.clone()),
        }
    }

    pub fn from_file_repr(file: TokenizerFile) -> Result<Self> {
        let bad = |detail: String| Error::Format {
            what: "tokenizer",
            detail,
        };
        if file.version != TOKENIZER_FORMAT_VERSION {
            return Err(bad(format!("unsupported version {}", file.version)));
        }
        if file.specials != (Specials { pad: PAD, unk: UNK, eos: EOS }) {
            return Err(bad("specials must be pad=0, unk=1, eos=2".into()));
        }
        let vocab: Vec<Vec<u8>> = file
            .vocab
            .into_iter()
            .map(TokenBytes::into_bytes)
            .collect::<Result<_>>()?;
        if vocab.len() < BASE_VOCAB || vocab[..BASE_VOCAB] != base_vocab()[..] {
            return Err(bad("vocab must start with the specials and the 256 bytes".into()));
        }
        if vocab.len() != BASE_VOCAB + file.merges.len() {
            return Err(bad(format!(
                "{} vocab entries but {} merges",
                vocab.len(),
                file.merges.len()
            )));
        }
        let merges: Vec<(u32, u32)> = file.merges.iter().map(|m| (m[0], m[1])).collect();
        for (rank, &(a, b)) in merges.iter().enumerate() {
            let id = BASE_VOCAB + rank;
            if a as usize >= id || b as usize >= id {
                return Err(bad(format!("merge {rank} references a later token")));
            }
            let mut joined = vocab[a as usize].clone();
            joined.extend_from_slice(&vocab[b as usize]);
            if joined != vocab[id] {
                return Err(bad(format!("merge {rank} does not produce vocab entry {id}")));
            }
        }
        let remap = file
            .retained
            .map(|keep| TokenRemap::from_keep(&keep, vocab.len()))
            .transpose()?;
        Ok(Self::from_parts(vocab, merges, remap))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_file_repr()).expect("tokenizer serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: TokenizerFile = serde_json::from_str(text).map_err(|e| Error::Format {
            what: "tokenizer",
            detail: e.to_string(),
        })?;
        Self::from_file_repr(file)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// On-disk tokenizer document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenizerFile {
    pub version: u32,
    pub specials: Specials,
    pub vocab: Vec<TokenBytes>,
    pub merges: Vec<[u32; 2]>,
    /// Old ids kept by embedding pruning, in new-id order; `null` when unpruned.
    pub retained: Option<Vec<u32>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Specials {
    pub pad: u32,
    pub unk: u32,
    pub eos: u32,
}

/// A token's bytes: a plain JSON string when valid UTF-8, else `{"base64": "..."}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TokenBytes {
    Text(String),
    Base64 { base64: String },
}

impl TokenBytes {
    fn from_bytes(bytes: &[u8]) -> Self {
        match std::str::from_utf8(bytes) {
            Ok(s) => TokenBytes::Text(s.to_owned()),
            Err(_) => TokenBytes::Base64 {
                base64: base64::engine::general_purpose::STANDARD.encode(bytes),
            },
        }
    }

    fn into_bytes(self) -> Result<Vec<u8>> {
        match self {
            TokenBytes::Text(s) => Ok(s.into_bytes()),
            TokenBytes::Base64 { base64 } => base64::engine::general_purpose::STANDARD
                .decode(base64)
                .map_err(|e| Error::Format {
                    what: "tokenizer",
                    detail: format!("bad base64 token: {e}"),
                }),
        }
    }
}
