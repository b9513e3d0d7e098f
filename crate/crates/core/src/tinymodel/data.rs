use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{contract, Result};

/// Character vocabulary: the sorted distinct characters of a corpus.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    chars: Vec<char>,
}

impl Vocab {
    pub fn from_text(text: &str) -> Self {
        let chars: BTreeSet<char> = text.chars().collect();
        Self {
            chars: chars.into_iter().collect(),
        }
    }

    pub fn from_chars(chars: Vec<char>) -> Result<Self> {
        if chars.windows(2).any(|w| w[0] >= w[1]) {
            return Err(contract("vocabulary characters must be strictly sorted"));
        }
        Ok(Self { chars })
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| {
                self.chars
                    .binary_search(&c)
                    .map_err(|_| contract(format!("character {c:?} not in vocabulary")))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().filter_map(|&i| self.chars.get(i)).collect()
    }
}

/// Encoded corpus split into a training prefix and a held-out suffix.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenStream {
    pub ids: Vec<usize>,
    /// Tokens `[0, train_end)` are training data, the rest is test data.
    pub train_end: usize,
}

impl TokenStream {
    /// Splits at `train_fraction` of the corpus.
    pub fn new(ids: Vec<usize>, vocab_size: usize, train_fraction: f64) -> Result<Self> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab_size) {
            return Err(contract(format!("token id {bad} >= vocab size {vocab_size}")));
        }
        if !(0.0..=1.0).contains(&train_fraction) {
            return Err(contract("train fraction must lie in [0, 1]"));
        }
        let train_end = (ids.len() as f64 * train_fraction).floor() as usize;
        Ok(Self { ids, train_end })
    }

    pub fn from_text(text: &str, vocab: &Vocab, train_fraction: f64) -> Result<Self> {
        Self::new(vocab.encode(text)?, vocab.len(), train_fraction)
    }

    pub fn train(&self) -> &[usize] {
        &self.ids[..self.train_end]
    }

    pub fn test(&self) -> &[usize] {
        &self.ids[self.train_end..]
    }
}

/// `c` calibration sequences of `k` tokens each.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibSet {
    pub offsets: Vec<usize>,
    pub seq_len: usize,
    pub seqs: Vec<Vec<usize>>,
}

impl CalibSet {
    pub fn len(&self) -> usize {
        self.seqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seqs.is_empty()
    }

    /// Flattened ids of sequences `range`.
    pub fn batch(&self, range: std::ops::Range<usize>) -> Vec<usize> {
        self.seqs[range].iter().flatten().copied().collect()
    }
}

/// Samples `c` distinct start offsets uniformly from `tokens`.
pub fn make_calibset(tokens: &[usize], c: usize, k: usize, seed: u64) -> Result<CalibSet> {
    if c == 0 || k == 0 {
        return Err(contract("calibration set needs c >= 1 and k >= 1"));
    }
    if tokens.len() < k {
        return Err(contract(format!("corpus of {} tokens shorter than k = {k}", tokens.len())));
    }
    let available = tokens.len() - k + 1;
    if c > available {
        return Err(contract(format!("c = {c} exceeds the {available} available offsets")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut offsets = sample(&mut rng, available, c).into_vec();
    offsets.sort_unstable();
    let seqs = offsets.iter().map(|&o| tokens[o..o + k].to_vec()).collect();
    Ok(CalibSet { offsets, seq_len: k, seqs })
}

/// `exp` of the entropy of the empirical unigram distribution of `tokens`.
pub fn unigram_perplexity(tokens: &[usize], vocab_size: usize) -> f64 {
    let mut counts = vec![0u64; vocab_size];
    for &t in tokens {
        counts[t] += 1;
    }
    let n = tokens.len() as f64;
    let h: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum();
    h.exp()
}
