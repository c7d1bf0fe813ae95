// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use super::Vocabulary;
use crate::error::{Error, Result};
use crate::numerics::SeedRng;

/// A set of token-level "translation" directions. Pair `p` maps source word
/// `i` to target word `sigma[p][i]` of that pair's subvocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskFamily {
    pub vocab: Vocabulary,
    sigma: Vec<Vec<usize>>,
    pub min_len: usize,
    pub max_len: usize,
}

impl TaskFamily {
    /// Independent random bijection per pair.
    pub fn random(vocab: Vocabulary, min_len: usize, max_len: usize, rng: &mut SeedRng) -> Result<Self> {
        let sigma = (0..vocab.n_pairs)
            .map(|p| {
                let mut perm: Vec<usize> = (0..vocab.subvocab).collect();
                rng.derive(p as u64).shuffle(&mut perm);
                perm
            })
            .collect();
        Self::from_maps(vocab, sigma, min_len, max_len)
    }

    /// Every pair maps word `i` to word `i` of its own alphabet.
    pub fn identity(vocab: Vocabulary, min_len: usize, max_len: usize) -> Result<Self> {
        let sigma = vec![(0..vocab.subvocab).collect(); vocab.n_pairs];
        Self::from_maps(vocab, sigma, min_len, max_len)
    }

    pub fn from_maps(vocab: Vocabulary, sigma: Vec<Vec<usize>>, min_len: usize, max_len: usize) -> Result<Self> {
        if min_len == 0 || min_len > max_len {
            return Err(Error::Config(format!("sentence length range [{min_len}, {max_len}]")));
        }
        if sigma.len() != vocab.n_pairs {
            return Err(Error::Config(format!("{} maps for {} pairs", sigma.len(), vocab.n_pairs)));
        }
        for (p, map) in sigma.iter().enumerate() {
            let mut seen = vec![false; vocab.subvocab];
            if map.len() != vocab.subvocab {
                return Err(Error::Config(format!("pair {p}: map of length {}", map.len())));
            }
            for &t in map {
                if t >= vocab.subvocab || std::mem::replace(&mut seen[t], true) {
                    return Err(Error::Config(format!("pair {p}: map is not a bijection")));
                }
            }
        }
        Ok(Self {
            vocab,
            sigma,
            min_len,
            max_len,
        })
    }

    pub fn n_pairs(&self) -> usize {
        self.vocab.n_pairs
    }

    /// Translates one source word. `None` if `id` is not a source word.
    pub fn map_word(&self, pair: usize, id: u32) -> Option<u32> {
        let i = self.vocab.source_index(id)?;
        Some(self.vocab.target_word(pair, self.sigma.get(pair)?[i]))
    }

    pub fn translate(&self, pair: usize, source: &[u32]) -> Result<Vec<u32>> {
        source
            .iter()
            .map(|&id| {
                self.map_word(pair, id)
                    .ok_or_else(|| Error::Contract(format!("token {id} is not a source word of pair {pair}")))
            })
            .collect()
    }

    /// Inverse map from a target word back to its source word.
    pub fn invert_word(&self, pair: usize, id: u32) -> Option<u32> {
        let (p, t) = self.vocab.target_index(id)?;
        if p != pair {
            return None;
        }
        let i = self.sigma[pair].iter().position(|&x| x == t)?;
        Some(self.vocab.source_word(i))
    }

    pub fn sample_sentence(&self, rng: &mut SeedRng) -> Vec<u32> {
        let len = rng.range_inclusive(self.min_len, self.max_len);
        (0..len)
            .map(|_| self.vocab.source_word(rng.below(self.vocab.subvocab)))
            .collect()
    }

    pub fn sample_pair(&self, rng: &mut SeedRng) -> usize {
        rng.below(self.n_pairs())
    }
}
