// SPDX-License-Identifier: MIT OR Apache-2.0

//! Prompt assembly with per-token role tags, and the synthetic translation
//! corpus the experiments run on.

mod corpus;
mod family;
mod vocab;

use serde::{Deserialize, Serialize};

pub use corpus::{Corpus, CorpusConfig, EpisodeRecord, PoolKind};
pub use family::TaskFamily;
pub use vocab::{DelimiterStyle, Vocabulary};

use crate::error::{Error, Result};
use crate::interventions::{Segment, SpanMap, SpanRole};
use crate::model::TrainingSequence;
use crate::numerics::SeedRng;

/// Everything that goes into one prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    /// Pair named by the instruction, if one is given.
    pub instruction: Option<usize>,
    pub examples: Vec<(Vec<u32>, Vec<u32>)>,
    pub query_source: Vec<u32>,
    /// Pair whose answer delimiter closes each block. Only matters for
    /// language-name delimiters.
    pub pair: usize,
}

impl PromptSpec {
    pub fn k(&self) -> usize {
        self.examples.len()
    }
}

/// Which answer spans a training sequence is scored on.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossScope {
    /// Only the query's answer and its end-of-answer token.
    #[default]
    QueryAnswer,
    /// Every example target and the query answer, each with its end token.
    AllAnswers,
}

/// Builds `[instruction] (src-delim src ans-delim tgt <eoa>)* src-delim query ans-delim`.
///
/// The instruction, including its final period, is tagged `Instruction`.
/// Block delimiters carry the segment of their block.
pub fn format_prompt(vocab: &Vocabulary, spec: &PromptSpec, max_positions: usize) -> Result<(Vec<u32>, SpanMap)> {
    let mut tokens = Vec::new();
    let mut spans = SpanMap::new();
    let mut put = |tokens: &mut Vec<u32>, ids: &[u32], role: SpanRole, seg: Segment| {
        tokens.extend_from_slice(ids);
        for _ in ids {
            spans.push(role, seg);
        }
    };
    let all = spec
        .examples
        .iter()
        .flat_map(|(s, t)| s.iter().chain(t))
        .chain(&spec.query_source);
    if let Some(&id) = all.clone().find(|&&id| id as usize >= vocab.len()) {
        return Err(Error::TokenOutOfRange { id, vocab: vocab.len() });
    }
    if spec.pair >= vocab.n_pairs || spec.instruction.is_some_and(|p| p >= vocab.n_pairs) {
        return Err(Error::Contract(format!("pair index outside {} pairs", vocab.n_pairs)));
    }
    if let Some(p) = spec.instruction {
        put(&mut tokens, &vocab.instruction(p), SpanRole::Instruction, Segment::Instruction);
    }
    let (open, close) = (vocab.source_delimiter(), vocab.answer_delimiter(spec.pair));
    for (i, (src, tgt)) in spec.examples.iter().enumerate() {
        let seg = Segment::Example(i as u32);
        put(&mut tokens, &[open], SpanRole::Delimiter, seg);
        put(&mut tokens, src, SpanRole::ExampleSource, seg);
        put(&mut tokens, &[close], SpanRole::Delimiter, seg);
        put(&mut tokens, tgt, SpanRole::ExampleTarget, seg);
        put(&mut tokens, &[Vocabulary::EOA], SpanRole::Delimiter, seg);
    }
    put(&mut tokens, &[open], SpanRole::Delimiter, Segment::Query);
    put(&mut tokens, &spec.query_source, SpanRole::QuerySource, Segment::Query);
    put(&mut tokens, &[close], SpanRole::Delimiter, Segment::Query);
    if tokens.len() > max_positions {
        return Err(Error::PromptTooLong {
            len: tokens.len(),
            max: max_positions,
        });
    }
    Ok((tokens, spans))
}

/// Prompt followed by `answer` and an end-of-answer token, with loss targets
/// chosen by `scope`. The answer is tagged `Generated`, as it would be at
/// decode time.
pub fn format_training_sequence(
    vocab: &Vocabulary,
    spec: &PromptSpec,
    answer: &[u32],
    scope: LossScope,
    max_positions: usize,
) -> Result<TrainingSequence> {
    let (mut tokens, mut spans) = format_prompt(vocab, spec, max_positions)?;
    let prompt_len = tokens.len();
    tokens.extend_from_slice(answer);
    tokens.push(Vocabulary::EOA);
    for _ in 0..=answer.len() {
        spans.push_generated();
    }
    if tokens.len() > max_positions {
        return Err(Error::SequenceTooLong {
            len: tokens.len(),
            max: max_positions,
        });
    }
    let mut targets: Vec<usize> = (prompt_len..tokens.len()).collect();
    if scope == LossScope::AllAnswers {
        let tags = spans.tags();
        let mut example: Vec<usize> = (1..prompt_len)
            .filter(|&p| {
                tags[p].role == SpanRole::ExampleTarget
                    || (tags[p].role == SpanRole::Delimiter
                        && tags[p - 1].role == SpanRole::ExampleTarget
                        && tags[p].segment == tags[p - 1].segment)
            })
            .collect();
        example.append(&mut targets);
        targets = example;
    }
    Ok(TrainingSequence {
        tokens,
        spans,
        targets,
    })
}

/// A prompt with its gold answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub pair: usize,
    pub prompt: PromptSpec,
    pub gold: Vec<u32>,
}

impl Episode {
    pub fn format(&self, vocab: &Vocabulary, max_positions: usize) -> Result<(Vec<u32>, SpanMap)> {
        format_prompt(vocab, &self.prompt, max_positions)
    }

    pub fn training_sequence(&self, vocab: &Vocabulary, scope: LossScope, max_positions: usize) -> Result<TrainingSequence> {
        format_training_sequence(vocab, &self.prompt, &self.gold, scope, max_positions)
    }
}

/// Draws `k` examples from `example_pool` and a query from `query_pool`, all
/// for pair `pair`. The gold answer is the word-by-word translation.
pub fn sample_episode(
    family: &TaskFamily,
    pair: usize,
    k: usize,
    instruction: bool,
    query_pool: &[Vec<u32>],
    example_pool: &[Vec<u32>],
    rng: &mut SeedRng,
) -> Result<Episode> {
    if query_pool.is_empty() || (k > 0 && example_pool.is_empty()) {
        return Err(Error::Contract("cannot sample from an empty pool".into()));
    }
    let query = query_pool[rng.below(query_pool.len())].clone();
    let examples = (0..k)
        .map(|_| {
            let src = example_pool[rng.below(example_pool.len())].clone();
            let tgt = family.translate(pair, &src)?;
            Ok((src, tgt))
        })
        .collect::<Result<Vec<_>>>()?;
    let gold = family.translate(pair, &query)?;
    Ok(Episode {
        pair,
        prompt: PromptSpec {
            instruction: instruction.then_some(pair),
            examples,
            query_source: query,
            pair,
        },
        gold,
    })
}

#[cfg(test)]
mod tests;
