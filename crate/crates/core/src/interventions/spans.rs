// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// What a token is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SpanRole {
    Instruction,
    ExampleSource,
    ExampleTarget,
    Delimiter,
    QuerySource,
    Generated,
}

/// Which region of the prompt a token lives in. Delimiters take the segment
/// of the block they introduce or close, which is what decides whether a
/// mask variant covers them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Segment {
    Instruction,
    Example(u32),
    Query,
    Generated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenTag {
    pub role: SpanRole,
    pub segment: Segment,
}

impl TokenTag {
    pub fn new(role: SpanRole, segment: Segment) -> Self {
        Self { role, segment }
    }

    pub fn generated() -> Self {
        Self::new(SpanRole::Generated, Segment::Generated)
    }

    /// Instruction or example material, i.e. the prompt context.
    pub fn is_context(self) -> bool {
        matches!(self.segment, Segment::Instruction | Segment::Example(_))
    }
}

/// Run-length encoded slice of a [`SpanMap`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleRun {
    pub role: SpanRole,
    pub segment: Segment,
    pub len: usize,
}

/// One tag per token position.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanMap {
    tags: Vec<TokenTag>,
}

impl SpanMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_tags(tags: Vec<TokenTag>) -> Self {
        Self { tags }
    }

    pub fn push(&mut self, role: SpanRole, segment: Segment) {
        self.tags.push(TokenTag::new(role, segment));
    }

    pub fn push_generated(&mut self) {
        self.tags.push(TokenTag::generated());
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn tag(&self, position: usize) -> TokenTag {
        self.tags[position]
    }

    pub fn tags(&self) -> &[TokenTag] {
        &self.tags
    }

    pub fn role(&self, position: usize) -> SpanRole {
        self.tags[position].role
    }

    pub fn truncate(&mut self, len: usize) {
        self.tags.truncate(len);
    }

    /// Positions whose tag satisfies `pred`.
    pub fn positions_where(&self, pred: impl Fn(TokenTag) -> bool) -> Vec<usize> {
        self.tags
            .iter()
            .enumerate()
            .filter(|(_, &t)| pred(t))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn runs(&self) -> Vec<RoleRun> {
        let mut runs: Vec<RoleRun> = Vec::new();
        for &t in &self.tags {
            match runs.last_mut() {
                Some(r) if r.role == t.role && r.segment == t.segment => r.len += 1,
                _ => runs.push(RoleRun {
                    role: t.role,
                    segment: t.segment,
                    len: 1,
                }),
            }
        }
        runs
    }

    pub fn from_runs(runs: &[RoleRun]) -> Result<Self> {
        if runs.iter().any(|r| r.len == 0) {
            return Err(Error::Contract("empty role run".into()));
        }
        let tags = runs
            .iter()
            .flat_map(|r| std::iter::repeat_n(TokenTag::new(r.role, r.segment), r.len))
            .collect();
        Ok(Self { tags })
    }
}

impl FromIterator<TokenTag> for SpanMap {
    fn from_iter<I: IntoIterator<Item = TokenTag>>(iter: I) -> Self {
        Self {
            tags: iter.into_iter().collect(),
        }
    }
}
