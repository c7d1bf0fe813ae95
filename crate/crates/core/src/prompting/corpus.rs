// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::HashSet;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{sample_episode, DelimiterStyle, Episode, TaskFamily, Vocabulary};
use crate::error::{Error, Result};
use crate::interventions::{RoleRun, SpanMap};
use crate::numerics::SeedRng;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub n_pairs: usize,
    pub subvocab: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub pretrain_pool: usize,
    /// Split into `adapt_train` + the remainder for adapter and gate training.
    pub dev_pool: usize,
    pub adapt_train: usize,
    pub test_pool: usize,
    #[serde(default)]
    pub delimiters: DelimiterStyle,
    /// Use the identity map for every pair instead of random bijections.
    #[serde(default)]
    pub identity_maps: bool,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_pairs: 4,
            subvocab: 48,
            min_len: 3,
            max_len: 10,
            pretrain_pool: 20_000,
            dev_pool: 1000,
            adapt_train: 800,
            test_pool: 200,
            delimiters: DelimiterStyle::QA,
            identity_maps: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    Pretrain,
    Dev,
    Test,
}

/// Task family plus three pairwise-disjoint pools of source sentences.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub family: TaskFamily,
    pretrain: Vec<Vec<u32>>,
    dev: Vec<Vec<u32>>,
    test: Vec<Vec<u32>>,
}

fn digest(sentence: &[u32]) -> [u8; 32] {
    let mut h = Sha256::new();
    for id in sentence {
        h.update(id.to_le_bytes());
    }
    h.finalize().into()
}

impl Corpus {
    /// Pure function of `(config, seed)`.
    pub fn generate(config: &CorpusConfig, seed: u64) -> Result<Self> {
        if config.adapt_train > config.dev_pool {
            return Err(Error::Config(format!(
                "adapt_train {} exceeds dev_pool {}",
                config.adapt_train, config.dev_pool
            )));
        }
        if config.test_pool == 0 || config.dev_pool == 0 || config.pretrain_pool == 0 {
            return Err(Error::Config("every pool needs at least one sentence".into()));
        }
        let vocab = Vocabulary::new(config.n_pairs, config.subvocab, config.delimiters)?;
        let root = SeedRng::new(seed);
        let family = if config.identity_maps {
            TaskFamily::identity(vocab, config.min_len, config.max_len)?
        } else {
            TaskFamily::random(vocab, config.min_len, config.max_len, &mut root.derive_label("family"))?
        };
        let mut seen = HashSet::new();
        let mut rng = root.derive_label("pools");
        let total = config.test_pool + config.dev_pool + config.pretrain_pool;
        let mut draws = 0usize;
        let mut sentences = Vec::with_capacity(total);
        while sentences.len() < total {
            draws += 1;
            if draws > 20 * total + 1000 {
                return Err(Error::Config(format!(
                    "cannot draw {total} distinct sentences from this vocabulary"
                )));
            }
            let s = family.sample_sentence(&mut rng);
            if seen.insert(s.clone()) {
                sentences.push(s);
            }
        }
        let pretrain = sentences.split_off(config.test_pool + config.dev_pool);
        let dev = sentences.split_off(config.test_pool);
        let corpus = Self {
            config: config.clone(),
            family,
            pretrain,
            dev,
            test: sentences,
        };
        corpus.verify_disjoint()?;
        Ok(corpus)
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.family.vocab
    }

    pub fn pool(&self, kind: PoolKind) -> &[Vec<u32>] {
        match kind {
            PoolKind::Pretrain => &self.pretrain,
            PoolKind::Dev => &self.dev,
            PoolKind::Test => &self.test,
        }
    }

    /// Dev pool split into adapter-training and adapter-dev parts.
    pub fn adapt_split(&self) -> (&[Vec<u32>], &[Vec<u32>]) {
        self.dev.split_at(self.config.adapt_train)
    }

    /// Checks pairwise disjointness by SHA-256 digest of each sentence.
    pub fn verify_disjoint(&self) -> Result<()> {
        let pools = [
            ("pretrain", &self.pretrain),
            ("dev", &self.dev),
            ("test", &self.test),
        ];
        let sets: Vec<HashSet<[u8; 32]>> = pools
            .iter()
            .map(|(_, p)| p.iter().map(|s| digest(s)).collect())
            .collect();
        for a in 0..3 {
            for b in a + 1..3 {
                if let Some(d) = sets[a].intersection(&sets[b]).next() {
                    return Err(Error::Contract(format!(
                        "pools {} and {} share sentence {}",
                        pools[a].0,
                        pools[b].0,
                        hex::encode(d)
                    )));
                }
            }
        }
        Ok(())
    }

    /// Hex SHA-256 over a pool's sentences in order.
    pub fn pool_digest(&self, kind: PoolKind) -> String {
        let mut h = Sha256::new();
        for s in self.pool(kind) {
            h.update(digest(s));
        }
        hex::encode(h.finalize())
    }

    /// One episode per test sentence (the first `n`, or all). Item `i` uses
    /// pair `i mod P` and a fixed example list drawn from the dev pool, so
    /// episodes with different `k` share their first examples.
    pub fn test_episodes(&self, k: usize, instruction: bool, n: Option<usize>, seed: u64) -> Result<Vec<Episode>> {
        let n = n.unwrap_or(self.test.len()).min(self.test.len());
        let root = SeedRng::new(seed).derive_label("test-episodes");
        let k_fixed = k.max(5);
        (0..n)
            .map(|i| {
                let pair = i % self.family.n_pairs();
                let mut rng = root.derive(i as u64);
                let mut ep = sample_episode(
                    &self.family,
                    pair,
                    k_fixed,
                    instruction,
                    std::slice::from_ref(&self.test[i]),
                    &self.dev,
                    &mut rng,
                )?;
                ep.prompt.examples.truncate(k);
                Ok(ep)
            })
            .collect()
    }
}

/// One serialized episode.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeRecord {
    pub pair: usize,
    pub tokens: Vec<u32>,
    pub runs: Vec<RoleRun>,
    pub gold: Vec<u32>,
}

impl EpisodeRecord {
    pub fn from_episode(ep: &Episode, vocab: &Vocabulary, max_positions: usize) -> Result<Self> {
        let (tokens, spans) = ep.format(vocab, max_positions)?;
        Ok(Self {
            pair: ep.pair,
            tokens,
            runs: spans.runs(),
            gold: ep.gold.clone(),
        })
    }

    pub fn spans(&self) -> Result<SpanMap> {
        let s = SpanMap::from_runs(&self.runs)?;
        if s.len() != self.tokens.len() {
            return Err(Error::Contract(format!(
                "{} tokens but runs cover {}",
                self.tokens.len(),
                s.len()
            )));
        }
        Ok(s)
    }

    pub fn dump_jsonl(records: &[EpisodeRecord], path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        for r in records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load_jsonl(path: &Path) -> Result<Vec<EpisodeRecord>> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut out = Vec::new();
        for line in std::io::BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let r: EpisodeRecord = serde_json::from_str(&line)?;
            r.spans()?;
            out.push(r);
        }
        Ok(out)
    }
}
