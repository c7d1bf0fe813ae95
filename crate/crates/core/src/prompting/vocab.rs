// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the source and answer slots of a block are introduced.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DelimiterStyle {
    /// `Q: … A: …`
    #[default]
    QA,
    /// `L0: … Lp: …`, naming the source and target languages.
    LanguageNames,
}

/// Fixed integer vocabulary.
///
/// Layout: reserved words, language names `L0..=LP` (`L0` is the source
/// language), language delimiters `L0:..=LP:`, the source subvocabulary,
/// then one target subvocabulary per pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub n_pairs: usize,
    pub subvocab: usize,
    pub style: DelimiterStyle,
}

const RESERVED: [&str; 6] = ["<eoa>", "Q:", "A:", "Translate", "to", "."];

impl Vocabulary {
    pub const EOA: u32 = 0;
    pub const Q: u32 = 1;
    pub const A: u32 = 2;
    pub const TRANSLATE: u32 = 3;
    pub const TO: u32 = 4;
    pub const PERIOD: u32 = 5;

    pub fn new(n_pairs: usize, subvocab: usize, style: DelimiterStyle) -> Result<Self> {
        if n_pairs == 0 || subvocab == 0 {
            return Err(Error::Config("need at least one pair and one word".into()));
        }
        if subvocab > 100 {
            return Err(Error::Config(format!("subvocab {subvocab} exceeds 100")));
        }
        Ok(Self {
            n_pairs,
            subvocab,
            style,
        })
    }

    pub fn len(&self) -> usize {
        RESERVED.len() + 2 * (self.n_pairs + 1) + self.subvocab * (self.n_pairs + 1)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Name token of language `lang` (0 = source, `p + 1` = target of pair p).
    pub fn language(&self, lang: usize) -> u32 {
        (RESERVED.len() + lang) as u32
    }

    pub fn language_delimiter(&self, lang: usize) -> u32 {
        (RESERVED.len() + self.n_pairs + 1 + lang) as u32
    }

    fn words_base(&self) -> usize {
        RESERVED.len() + 2 * (self.n_pairs + 1)
    }

    pub fn source_word(&self, i: usize) -> u32 {
        (self.words_base() + i) as u32
    }

    pub fn target_word(&self, pair: usize, i: usize) -> u32 {
        (self.words_base() + (pair + 1) * self.subvocab + i) as u32
    }

    /// `Some(i)` when `id` is source word `i`.
    pub fn source_index(&self, id: u32) -> Option<usize> {
        let i = (id as usize).checked_sub(self.words_base())?;
        (i < self.subvocab).then_some(i)
    }

    /// `Some((pair, i))` when `id` is word `i` of a target subvocabulary.
    pub fn target_index(&self, id: u32) -> Option<(usize, usize)> {
        let i = (id as usize).checked_sub(self.words_base() + self.subvocab)?;
        let pair = i / self.subvocab;
        (pair < self.n_pairs).then_some((pair, i % self.subvocab))
    }

    pub fn in_target_vocab(&self, pair: usize, id: u32) -> bool {
        self.target_index(id).is_some_and(|(p, _)| p == pair)
    }

    /// Opening delimiter of a source slot.
    pub fn source_delimiter(&self) -> u32 {
        match self.style {
            DelimiterStyle::QA => Self::Q,
            DelimiterStyle::LanguageNames => self.language_delimiter(0),
        }
    }

    /// Opening delimiter of an answer slot for `pair`.
    pub fn answer_delimiter(&self, pair: usize) -> u32 {
        match self.style {
            DelimiterStyle::QA => Self::A,
            DelimiterStyle::LanguageNames => self.language_delimiter(pair + 1),
        }
    }

    /// `Translate L0 to Lp .`
    pub fn instruction(&self, pair: usize) -> Vec<u32> {
        vec![
            Self::TRANSLATE,
            self.language(0),
            Self::TO,
            self.language(pair + 1),
            Self::PERIOD,
        ]
    }

    pub fn word(&self, id: u32) -> Result<String> {
        let i = id as usize;
        if i >= self.len() {
            return Err(Error::TokenOutOfRange {
                id,
                vocab: self.len(),
            });
        }
        if let Some(w) = RESERVED.get(i) {
            return Ok((*w).to_string());
        }
        let i = i - RESERVED.len();
        let langs = self.n_pairs + 1;
        if i < langs {
            return Ok(format!("L{i}"));
        }
        if i < 2 * langs {
            return Ok(format!("L{}:", i - langs));
        }
        if let Some(s) = self.source_index(id) {
            return Ok(format!("s{s:02}"));
        }
        let (p, t) = self.target_index(id).expect("remaining ids are target words");
        Ok(format!("t{p}_{t:02}"))
    }

    fn lookup(&self, word: &str) -> Option<u32> {
        if let Some(i) = RESERVED.iter().position(|w| *w == word) {
            return Some(i as u32);
        }
        let langs = self.n_pairs + 1;
        if let Some(rest) = word.strip_prefix('L') {
            let (num, delim) = match rest.strip_suffix(':') {
                Some(n) => (n, true),
                None => (rest, false),
            };
            let l: usize = num.parse().ok()?;
            if l >= langs || num != l.to_string() {
                return None;
            }
            return Some(if delim {
                self.language_delimiter(l)
            } else {
                self.language(l)
            });
        }
        if let Some(num) = word.strip_prefix('s') {
            let i: usize = num.parse().ok()?;
            return (num.len() == 2 && i < self.subvocab).then(|| self.source_word(i));
        }
        let (p_str, num) = word.strip_prefix('t')?.split_once('_')?;
        let (p, i): (usize, usize) = (p_str.parse().ok()?, num.parse().ok()?);
        let canonical = num.len() == 2 && p.to_string() == p_str;
        (canonical && p < self.n_pairs && i < self.subvocab).then(|| self.target_word(p, i))
    }

    /// Space-separated textual form.
    pub fn render(&self, tokens: &[u32]) -> Result<String> {
        let words: Result<Vec<String>> = tokens.iter().map(|&t| self.word(t)).collect();
        Ok(words?.join(" "))
    }

    /// Inverse of [`Vocabulary::render`].
    pub fn parse(&self, text: &str) -> Result<Vec<u32>> {
        text.split(' ')
            .filter(|w| !w.is_empty())
            .map(|w| {
                self.lookup(w)
                    .ok_or_else(|| Error::Contract(format!("unknown word {w:?}")))
            })
            .collect()
    }
}
