//! Byte pair encoding over the DNA alphabet `{A, C, G, T, N}`.
//!
//! Training repeatedly merges the most frequent adjacent token pair into a
//! new vocabulary entry until the vocabulary reaches its target size (1001
//! by default: the unknown token, five base symbols, and learned merges) or
//! no pair occurs at least twice. Encoding applies the learned merges by
//! rank with a heap over a linked list, so a sequence of `n` bases encodes
//! in `O(n log n)` regardless of vocabulary size.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Reserved id for the unknown token; also reused as the padding id.
pub const UNKNOWN_ID: u32 = 0;
/// Base symbols, in id order starting at 1.
pub const BASE_ALPHABET: [char; 5] = ['A', 'C', 'G', 'T', 'N'];
/// Default trained vocabulary size, unknown token included.
pub const DEFAULT_VOCAB_SIZE: usize = 1001;

const UNKNOWN_TOKEN: &str = "<unk>";

/// Token ids produced by [`BpeModel::encode`]; every id is below the model's
/// vocabulary size.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// A trained merge vocabulary. Immutable once trained; safe to share across
/// threads for parallel encoding.
#[derive(Clone, Debug, PartialEq)]
pub struct BpeModel {
    /// Token strings in id order: `<unk>`, the base symbols, then merges.
    vocab: Vec<String>,
    /// Pair-merge rules in learned order, as vocabulary ids.
    merges: Vec<(u32, u32)>,
    /// (left, right) -> (rank, merged id).
    rank: HashMap<(u32, u32), (u32, u32)>,
}

impl BpeModel {
    /// Learns a merge vocabulary from a corpus of DNA strings.
    ///
    /// Ties between equally frequent pairs go to the lexicographically
    /// smallest `(left, right)` token-string pair, which makes training a
    /// pure function of the corpus.
    pub fn train<S: AsRef<str>>(corpus: &[S], target_vocab: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::InvalidInput("BPE corpus is empty".into()));
        }
        let min_vocab = 1 + BASE_ALPHABET.len();
        if target_vocab < min_vocab + 1 {
            return Err(Error::Config(format!(
                "target vocab {target_vocab} leaves no room for merges (need > {min_vocab})"
            )));
        }

        let mut vocab: Vec<String> = std::iter::once(UNKNOWN_TOKEN.to_string())
            .chain(BASE_ALPHABET.iter().map(|c| c.to_string()))
            .collect();
        let mut string_to_id: HashMap<String, u32> = vocab
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i as u32))
            .collect();
        let mut merges: Vec<(u32, u32)> = Vec::new();
        let mut rank: HashMap<(u32, u32), (u32, u32)> = HashMap::new();

        let mut seqs: Vec<Vec<u32>> = corpus
            .iter()
            .map(|s| s.as_ref().chars().map(|c| char_id(c.to_ascii_uppercase())).collect())
            .collect();

        while vocab.len() < target_vocab {
            let mut counts: HashMap<(u32, u32), u64> = HashMap::new();
            for seq in &seqs {
                for pair in seq.windows(2) {
                    if pair[0] != UNKNOWN_ID && pair[1] != UNKNOWN_ID {
                        *counts.entry((pair[0], pair[1])).or_insert(0) += 1;
                    }
                }
            }
            let mut best: Option<((u32, u32), u64)> = None;
            for (&pair, &count) in &counts {
                let better = match best {
                    None => true,
                    Some((bp, bc)) => {
                        count > bc
                            || (count == bc
                                && pair_strings(&vocab, pair) < pair_strings(&vocab, bp))
                    }
                };
                if better {
                    best = Some((pair, count));
                }
            }
            let Some((pair, count)) = best else { break };
            if count < 2 {
                break;
            }

            let merged_string = format!("{}{}", vocab[pair.0 as usize], vocab[pair.1 as usize]);
            // Distinct pairs can concatenate to the same surface string; reuse
            // the existing id so vocabulary strings stay unique.
            let new_id = match string_to_id.get(&merged_string) {
                Some(&id) => id,
                None => {
                    let id = vocab.len() as u32;
                    vocab.push(merged_string.clone());
                    string_to_id.insert(merged_string, id);
                    id
                }
            };
            rank.insert(pair, (merges.len() as u32, new_id));
            merges.push(pair);

            for seq in &mut seqs {
                apply_merge(seq, pair, new_id);
            }
        }

        Ok(Self { vocab, merges, rank })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn token_string(&self, id: u32) -> Option<&str> {
        self.vocab.get(id as usize).map(String::as_str)
    }

    /// Encodes a DNA string. Characters outside the base alphabet map to the
    /// unknown token; lower-case bases are accepted.
    pub fn encode(&self, sequence: &str) -> TokenSequence {
        let ids: Vec<u32> = sequence
            .chars()
            .map(|c| char_id(c.to_ascii_uppercase()))
            .collect();
        if ids.len() < 2 || self.merges.is_empty() {
            return TokenSequence { ids };
        }

        // Linked list over positions plus a min-heap of merge candidates
        // keyed by (rank, position): always merge the lowest-rank pair,
        // leftmost occurrence first.
        let n = ids.len();
        let mut id_at = ids;
        let mut next: Vec<usize> = (1..=n).collect();
        let mut prev: Vec<usize> = (0..n).map(|i| i.wrapping_sub(1)).collect();
        let mut alive = vec![true; n];

        use std::cmp::Reverse;
        use std::collections::BinaryHeap;
        type Candidate = Reverse<(u32, usize, u32, u32)>;
        let mut heap: BinaryHeap<Candidate> = BinaryHeap::new();
        let push = |heap: &mut BinaryHeap<Candidate>, pos: usize, a: u32, b: u32| {
            if let Some(&(r, _)) = self.rank.get(&(a, b)) {
                heap.push(Reverse((r, pos, a, b)));
            }
        };
        for i in 0..n - 1 {
            push(&mut heap, i, id_at[i], id_at[i + 1]);
        }

        while let Some(Reverse((_, pos, a, b))) = heap.pop() {
            if !alive[pos] || id_at[pos] != a {
                continue;
            }
            let right = next[pos];
            if right >= n || !alive[right] || id_at[right] != b {
                continue;
            }
            let (_, merged) = self.rank[&(a, b)];
            id_at[pos] = merged;
            alive[right] = false;
            let after = next[right];
            next[pos] = after;
            if after < n {
                prev[after] = pos;
            }
            let before = prev[pos];
            if before != usize::MAX && alive[before] {
                push(&mut heap, before, id_at[before], merged);
            }
            if after < n && alive[after] {
                push(&mut heap, pos, merged, id_at[after]);
            }
        }

        let out = (0..n).filter(|&i| alive[i]).map(|i| id_at[i]).collect();
        TokenSequence { ids: out }
    }

    /// Concatenates token strings. The unknown token decodes as `N` so the
    /// output stays inside the alphabet.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            if id == UNKNOWN_ID {
                out.push('N');
            } else {
                match self.vocab.get(id as usize) {
                    Some(tok) => out.push_str(tok),
                    None => {
                        return Err(Error::InvalidInput(format!(
                            "token id {id} out of range for vocab {}",
                            self.vocab.len()
                        )))
                    }
                }
            }
        }
        Ok(out)
    }

    /// Serializes to the text model format: `BPE v1 <vocab>` header, one
    /// token per line in id order, then `#MERGES` and one `left right`
    /// token-string pair per line in learned order.
    pub fn to_model_string(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "BPE v1 {}", self.vocab.len());
        for tok in &self.vocab {
            let _ = writeln!(out, "{tok}");
        }
        let _ = writeln!(out, "#MERGES");
        for &(l, r) in &self.merges {
            let _ = writeln!(out, "{} {}", self.vocab[l as usize], self.vocab[r as usize]);
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_model_string())?;
        Ok(())
    }

    pub fn from_model_string(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::InvalidInput("empty BPE model file".into()))?;
        let mut parts = header.split_whitespace();
        if parts.next() != Some("BPE") || parts.next() != Some("v1") {
            return Err(Error::InvalidInput(format!(
                "bad BPE model header: {header:?}"
            )));
        }
        let vocab_size: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::InvalidInput("BPE header missing vocab size".into()))?;

        let mut vocab = Vec::with_capacity(vocab_size);
        for _ in 0..vocab_size {
            let tok = lines
                .next()
                .ok_or_else(|| Error::InvalidInput("BPE model truncated in vocab".into()))?;
            vocab.push(tok.to_string());
        }
        if vocab.first().map(String::as_str) != Some(UNKNOWN_TOKEN) {
            return Err(Error::InvalidInput(
                "BPE vocab must start with the unknown token".into(),
            ));
        }
        let string_to_id: HashMap<&str, u32> = vocab
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i as u32))
            .collect();
        if string_to_id.len() != vocab.len() {
            return Err(Error::InvalidInput("duplicate token in BPE vocab".into()));
        }

        match lines.next() {
            Some("#MERGES") => {}
            other => {
                return Err(Error::InvalidInput(format!(
                    "expected #MERGES, got {other:?}"
                )))
            }
        }
        let mut merges = Vec::new();
        let mut rank = HashMap::new();
        for line in lines {
            if line.is_empty() {
                continue;
            }
            let (l, r) = line
                .split_once(' ')
                .ok_or_else(|| Error::InvalidInput(format!("bad merge line: {line:?}")))?;
            let (&li, &ri) = match (string_to_id.get(l), string_to_id.get(r)) {
                (Some(a), Some(b)) => (a, b),
                _ => {
                    return Err(Error::InvalidInput(format!(
                        "merge references unknown token: {line:?}"
                    )))
                }
            };
            let merged_string = format!("{l}{r}");
            let &merged = string_to_id.get(merged_string.as_str()).ok_or_else(|| {
                Error::InvalidInput(format!("merge result {merged_string:?} not in vocab"))
            })?;
            rank.insert((li, ri), (merges.len() as u32, merged));
            merges.push((li, ri));
        }
        Ok(Self { vocab, merges, rank })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_model_string(&text)
    }
}

fn char_id(c: char) -> u32 {
    match BASE_ALPHABET.iter().position(|&b| b == c) {
        Some(i) => (i + 1) as u32,
        None => UNKNOWN_ID,
    }
}

fn pair_strings(vocab: &[String], pair: (u32, u32)) -> (&str, &str) {
    (&vocab[pair.0 as usize], &vocab[pair.1 as usize])
}

/// Left-to-right, non-overlapping replacement of `pair` by `new_id`.
fn apply_merge(seq: &mut Vec<u32>, pair: (u32, u32), new_id: u32) {
    let mut read = 0usize;
    let mut write = 0usize;
    while read < seq.len() {
        if read + 1 < seq.len() && seq[read] == pair.0 && seq[read + 1] == pair.1 {
            seq[write] = new_id;
            read += 2;
        } else {
            seq[write] = seq[read];
            read += 1;
        }
        write += 1;
    }
    seq.truncate(write);
}
