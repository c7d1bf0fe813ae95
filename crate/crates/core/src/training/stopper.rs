// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Minimize,
    Maximize,
}

/// Patience-based early stopping.
///
/// The best evaluation seen so far is always tracked exactly. The patience
/// counter only resets on a relative improvement of at least `threshold`
/// over the last value that reset it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopper {
    pub patience: usize,
    pub threshold: f64,
    pub objective: Objective,
    best: Option<(usize, f64)>,
    anchor: Option<f64>,
    stale: usize,
    seen: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize, threshold: f64, objective: Objective) -> Self {
        Self {
            patience,
            threshold,
            objective,
            best: None,
            anchor: None,
            stale: 0,
            seen: 0,
        }
    }

    fn better(&self, a: f64, b: f64) -> bool {
        match self.objective {
            Objective::Minimize => a < b,
            Objective::Maximize => a > b,
        }
    }

    fn significant(&self, value: f64, anchor: f64) -> bool {
        let margin = self.threshold * anchor.abs();
        match self.objective {
            Objective::Minimize => value < anchor - margin,
            Objective::Maximize => value > anchor + margin,
        }
    }

    /// Records one evaluation. Returns whether it is the new best.
    pub fn observe(&mut self, value: f64) -> bool {
        let index = self.seen;
        self.seen += 1;
        if value.is_nan() {
            self.stale += 1;
            return false;
        }
        let is_best = self.best.is_none_or(|(_, b)| self.better(value, b));
        if is_best {
            self.best = Some((index, value));
        }
        match self.anchor {
            Some(a) if !self.significant(value, a) => self.stale += 1,
            _ => {
                self.anchor = Some(value);
                self.stale = 0;
            }
        }
        is_best
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }

    /// Index (in observation order) and value of the best evaluation.
    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }

    pub fn evaluations(&self) -> usize {
        self.seen
    }
}
