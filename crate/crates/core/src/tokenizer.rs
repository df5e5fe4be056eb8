//! Deterministic byte-level BPE tokenizer.
//!
//! All 256 byte values are base tokens (ids 0–255) and merged tokens occupy
//! ids 256.., so encoding is total over arbitrary bytes and
//! `decode(encode(x)) == x` always holds. There is no pre-tokenization and
//! no normalization. Two special ids, BOS and EOS, are reserved immediately
//! after the BPE vocabulary: `bos_id() == vocab_size` and
//! `eos_id() == vocab_size + 1`. They never appear in encoded text; models
//! embed `total_vocab_size() = vocab_size + 2` entries.
//!
//! Training is a pure function of (corpus bytes, vocab size): the most
//! frequent adjacent pair is merged each round, with count ties broken by
//! the lexicographically smallest (left bytes, right bytes) pair.
//!
//! # File format
//!
//! Little-endian throughout:
//!
//! ```text
//! magic   4 bytes  b"FPBT"
//! version u32      1
//! vocab_size u32
//! n_merges   u32   == vocab_size - 256
//! merges     n_merges x (u32 left, u32 right)   merge i yields id 256+i
//! vocab      vocab_size x (u32 len, len bytes)
//! ```

use std::collections::{BinaryHeap, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"FPBT";
const FORMAT_VERSION: u32 = 1;
/// Smallest trainable vocabulary: 256 byte tokens plus at least one merge.
pub const MIN_VOCAB_SIZE: usize = 257;

pub type TokenId = u32;

/// Immutable byte-level BPE model.
#[derive(Clone, Debug)]
pub struct TokenizerModel {
    vocab: Vec<Vec<u8>>,
    merges: Vec<(TokenId, TokenId)>,
    /// (left, right) -> rank; merged id is 256 + rank.
    ranks: HashMap<(TokenId, TokenId), u32>,
}

impl TokenizerModel {
    /// Number of text-token ids (bytes + merges). Dense in [0, vocab_size).
    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    /// Reserved begin-of-sequence id, just past the BPE vocabulary.
    pub fn bos_id(&self) -> TokenId {
        self.vocab.len() as TokenId
    }

    /// Reserved end-of-sequence id.
    pub fn eos_id(&self) -> TokenId {
        self.vocab.len() as TokenId + 1
    }

    /// Embedding-table size for models built on this tokenizer.
    pub fn total_vocab_size(&self) -> usize {
        self.vocab.len() + 2
    }

    pub fn merges(&self) -> &[(TokenId, TokenId)] {
        &self.merges
    }

    pub fn token_bytes(&self, id: TokenId) -> Option<&[u8]> {
        self.vocab.get(id as usize).map(|v| v.as_slice())
    }

    /// Printable rendering of one token: whitespace shown as '_', other
    /// non-printable bytes as `<0xHH>`.
    pub fn render_token(&self, id: TokenId) -> String {
        match self.token_bytes(id) {
            None if id == self.bos_id() => "<bos>".to_string(),
            None if id == self.eos_id() => "<eos>".to_string(),
            None => format!("<invalid:{id}>"),
            Some(bytes) => {
                let mut out = String::new();
                for &b in bytes {
                    match b {
                        b' ' => out.push('_'),
                        b'\n' => out.push_str("\\n"),
                        b'\t' => out.push_str("\\t"),
                        0x21..=0x7e => out.push(b as char),
                        _ => out.push_str(&format!("<0x{b:02X}>")),
                    }
                }
                out
            }
        }
    }

    /// Content hash over the serialized model, for provenance tracking.
    pub fn fingerprint(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("in-memory write");
        hasher.update(&buf);
        hasher.finalize().into()
    }
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// Train a BPE model on a document stream.
///
/// Pairs never span document boundaries. Identical (corpus, vocab_size)
/// always yields a byte-identical model.
pub fn train_bpe<D: AsRef<[u8]>>(docs: &[D], vocab_size: usize) -> Result<TokenizerModel> {
    if vocab_size < MIN_VOCAB_SIZE {
        return Err(Error::config(format!(
            "vocab_size {vocab_size} below minimum {MIN_VOCAB_SIZE}"
        )));
    }
    let mut seqs: Vec<Vec<TokenId>> = docs
        .iter()
        .map(|d| d.as_ref().iter().map(|&b| b as TokenId).collect())
        .filter(|s: &Vec<TokenId>| !s.is_empty())
        .collect();
    if seqs.is_empty() {
        return Err(Error::config("corpus is empty"));
    }

    let mut vocab: Vec<Vec<u8>> = (0u16..256).map(|b| vec![b as u8]).collect();
    let mut merges: Vec<(TokenId, TokenId)> = Vec::new();

    // Pair counts plus, per pair, the docs it has occurred in (possibly
    // stale; re-verified when the pair is merged).
    let mut counts: HashMap<(TokenId, TokenId), i64> = HashMap::new();
    let mut where_seen: HashMap<(TokenId, TokenId), Vec<u32>> = HashMap::new();
    for (doc_idx, seq) in seqs.iter().enumerate() {
        for window in seq.windows(2) {
            let pair = (window[0], window[1]);
            *counts.entry(pair).or_insert(0) += 1;
            let seen = where_seen.entry(pair).or_default();
            if seen.last() != Some(&(doc_idx as u32)) {
                seen.push(doc_idx as u32);
            }
        }
    }

    while vocab.len() < vocab_size {
        let best = counts
            .iter()
            .filter(|&(_, &c)| c > 0)
            .max_by(|&(pa, ca), &(pb, cb)| {
                ca.cmp(cb).then_with(|| {
                    // higher count wins; on ties the lexicographically
                    // smaller byte pair wins, so compare reversed
                    let ka = (&vocab[pa.0 as usize], &vocab[pa.1 as usize]);
                    let kb = (&vocab[pb.0 as usize], &vocab[pb.1 as usize]);
                    kb.cmp(&ka)
                })
            })
            .map(|(&pair, _)| pair);
        let Some(pair) = best else {
            return Err(Error::config(format!(
                "corpus exhausted after {} merges; cannot reach vocab_size {}",
                merges.len(),
                vocab_size
            )));
        };

        let new_id = vocab.len() as TokenId;
        let new_bytes = [
            vocab[pair.0 as usize].as_slice(),
            vocab[pair.1 as usize].as_slice(),
        ]
        .concat();
        vocab.push(new_bytes);
        merges.push(pair);

        let mut doc_list = where_seen.remove(&pair).unwrap_or_default();
        doc_list.dedup();
        for doc_idx in doc_list {
            apply_merge(
                &mut seqs[doc_idx as usize],
                pair,
                new_id,
                doc_idx,
                &mut counts,
                &mut where_seen,
            );
        }
        counts.remove(&pair);
    }

    let ranks = merges
        .iter()
        .enumerate()
        .map(|(rank, &pair)| (pair, rank as u32))
        .collect();
    Ok(TokenizerModel {
        vocab,
        merges,
        ranks,
    })
}

/// Replace every non-overlapping left-to-right occurrence of `pair` in one
/// sequence, keeping the global pair counts consistent.
fn apply_merge(
    seq: &mut Vec<TokenId>,
    pair: (TokenId, TokenId),
    new_id: TokenId,
    doc_idx: u32,
    counts: &mut HashMap<(TokenId, TokenId), i64>,
    where_seen: &mut HashMap<(TokenId, TokenId), Vec<u32>>,
) {
    let mut bump = |p: (TokenId, TokenId), delta: i64| {
        *counts.entry(p).or_insert(0) += delta;
        if delta > 0 {
            let seen = where_seen.entry(p).or_default();
            if seen.last() != Some(&doc_idx) {
                seen.push(doc_idx);
            }
        }
    };
    let mut write = 0usize;
    let mut read = 0usize;
    while read < seq.len() {
        if read + 1 < seq.len() && seq[read] == pair.0 && seq[read + 1] == pair.1 {
            if write > 0 {
                bump((seq[write - 1], pair.0), -1);
                bump((seq[write - 1], new_id), 1);
            }
            if read + 2 < seq.len() {
                bump((pair.1, seq[read + 2]), -1);
                bump((new_id, seq[read + 2]), 1);
            }
            bump(pair, -1);
            seq[write] = new_id;
            write += 1;
            read += 2;
        } else {
            seq[write] = seq[read];
            write += 1;
            read += 1;
        }
    }
    seq.truncate(write);
}

// ---------------------------------------------------------------------------
// Encode / decode
// ---------------------------------------------------------------------------

#[derive(PartialEq, Eq)]
struct Candidate {
    rank: u32,
    left_pos: usize,
    left: usize,
    right: usize,
    left_id: TokenId,
    right_id: TokenId,
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // BinaryHeap is a max-heap; reverse so the lowest (rank, position)
        // comes out first -> merges apply in rank order, left to right.
        other
            .rank
            .cmp(&self.rank)
            .then_with(|| other.left_pos.cmp(&self.left_pos))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl TokenizerModel {
    /// Encode raw bytes. Greedy application of merges in training order;
    /// total over arbitrary input thanks to the byte base vocabulary.
    pub fn encode(&self, text: &[u8]) -> Vec<TokenId> {
        if text.is_empty() {
            return Vec::new();
        }
        let mut ids: Vec<TokenId> = text.iter().map(|&b| b as TokenId).collect();
        let mut next: Vec<usize> = (1..=ids.len()).collect();
        let mut prev: Vec<isize> = (0..ids.len()).map(|i| i as isize - 1).collect();
        let mut alive = vec![true; ids.len()];

        let mut heap = BinaryHeap::new();
        let push = |heap: &mut BinaryHeap<Candidate>, ids: &[TokenId], l: usize, r: usize| {
            if let Some(&rank) = self.ranks.get(&(ids[l], ids[r])) {
                heap.push(Candidate {
                    rank,
                    left_pos: l,
                    left: l,
                    right: r,
                    left_id: ids[l],
                    right_id: ids[r],
                });
            }
        };
        for i in 0..ids.len() - 1 {
            push(&mut heap, &ids, i, i + 1);
        }

        while let Some(c) = heap.pop() {
            if !alive[c.left]
                || !alive[c.right]
                || next[c.left] != c.right
                || ids[c.left] != c.left_id
                || ids[c.right] != c.right_id
            {
                continue;
            }
            ids[c.left] = 256 + c.rank;
            alive[c.right] = false;
            next[c.left] = next[c.right];
            if next[c.left] < ids.len() {
                prev[next[c.left]] = c.left as isize;
            }
            if prev[c.left] >= 0 {
                push(&mut heap, &ids, prev[c.left] as usize, c.left);
            }
            if next[c.left] < ids.len() {
                push(&mut heap, &ids, c.left, next[c.left]);
            }
        }

        (0..ids.len()).filter(|&i| alive[i]).map(|i| ids[i]).collect()
    }

    pub fn encode_str(&self, text: &str) -> Vec<TokenId> {
        self.encode(text.as_bytes())
    }

    /// Decode ids back to bytes. Special ids (BOS/EOS) are out of range by
    /// design and rejected like any other invalid id.
    pub fn decode(&self, ids: &[TokenId]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            let bytes = self.token_bytes(id).ok_or_else(|| {
                Error::data(format!(
                    "token id {id} out of range (vocab_size {})",
                    self.vocab_size()
                ))
            })?;
            out.extend_from_slice(bytes);
        }
        Ok(out)
    }

    pub fn decode_to_string(&self, ids: &[TokenId]) -> Result<String> {
        let bytes = self.decode(ids)?;
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

impl TokenizerModel {
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.vocab.len() as u32).to_le_bytes())?;
        w.write_all(&(self.merges.len() as u32).to_le_bytes())?;
        for &(l, r) in &self.merges {
            w.write_all(&l.to_le_bytes())?;
            w.write_all(&r.to_le_bytes())?;
        }
        for token in &self.vocab {
            w.write_all(&(token.len() as u32).to_le_bytes())?;
            w.write_all(token)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::format("bad tokenizer magic"));
        }
        let version = read_u32(r)?;
        if version != FORMAT_VERSION {
            return Err(Error::format(format!(
                "unsupported tokenizer format version {version}"
            )));
        }
        let vocab_size = read_u32(r)? as usize;
        let n_merges = read_u32(r)? as usize;
        if vocab_size != 256 + n_merges {
            return Err(Error::format(format!(
                "inconsistent header: vocab_size {vocab_size} with {n_merges} merges"
            )));
        }
        let mut merges = Vec::with_capacity(n_merges);
        for _ in 0..n_merges {
            let l = read_u32(r)?;
            let right = read_u32(r)?;
            merges.push((l, right));
        }
        let mut vocab = Vec::with_capacity(vocab_size);
        for _ in 0..vocab_size {
            let len = read_u32(r)? as usize;
            let mut token = vec![0u8; len];
            r.read_exact(&mut token)?;
            vocab.push(token);
        }
        for (i, token) in vocab.iter().enumerate().take(256) {
            if token.as_slice() != [i as u8] {
                return Err(Error::format(format!("base token {i} is not byte {i}")));
            }
        }
        for (i, &(l, right)) in merges.iter().enumerate() {
            let id = 256 + i;
            if l as usize >= id || right as usize >= id {
                return Err(Error::format(format!("merge {i} references a later id")));
            }
            let expect = [vocab[l as usize].as_slice(), vocab[right as usize].as_slice()].concat();
            if vocab[id] != expect {
                return Err(Error::format(format!(
                    "vocab entry {id} does not match its merge"
                )));
            }
        }
        let ranks = merges
            .iter()
            .enumerate()
            .map(|(rank, &pair)| (pair, rank as u32))
            .collect();
        Ok(TokenizerModel {
            vocab,
            merges,
            ranks,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        crate::labctl::atomic_write(path, &buf)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(&mut bytes.as_slice())
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}
