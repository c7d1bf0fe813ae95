// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Earliest layer from which context can be masked at ceiling performance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Plateau {
    pub layer: usize,
    /// Set when only the unmasked point qualifies.
    pub flagged: bool,
}

/// Smallest `ℓ` with `curve[ℓ − 1] ≥ ceiling − ε`, where the ceiling is the
/// last entry (the unmasked point `ℓ = n_layers + 1`).
pub fn detect_plateau(curve: &[f64], epsilon: f64) -> Result<Plateau> {
    let &ceiling = curve
        .last()
        .ok_or_else(|| Error::Contract("empty curve".into()))?;
    if !(epsilon >= 0.0) {
        return Err(Error::Contract(format!("plateau tolerance {epsilon} must be non-negative")));
    }
    let idx = curve
        .iter()
        .position(|&m| m >= ceiling - epsilon)
        .expect("the ceiling qualifies");
    Ok(Plateau {
        layer: idx + 1,
        flagged: idx + 1 == curve.len(),
    })
}

/// Inclusive 1-based layer range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interval {
    pub start: usize,
    pub end: usize,
}

impl Interval {
    pub fn contains(&self, layer: usize) -> bool {
        (self.start..=self.end).contains(&layer)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseOptions {
    /// Odd median-filter width.
    pub window: usize,
    /// A step counts as rising when it gains at least this share of the
    /// smoothed curve's range.
    pub rise_fraction: f64,
    /// Curves whose smoothed range is below this are one segment.
    pub min_range: f64,
}

impl Default for PhaseOptions {
    fn default() -> Self {
        Self {
            window: 3,
            rise_fraction: 0.1,
            min_range: 1e-9,
        }
    }
}

/// Floor, steep rise and plateau of a layer curve. A degenerate curve is a
/// single `rise`-free segment stored in `floor`, with `degenerate` set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phases {
    pub floor: Option<Interval>,
    pub rise: Option<Interval>,
    pub plateau: Option<Interval>,
    pub degenerate: bool,
    pub smoothed: Vec<f64>,
}

/// Running median with edge replication.
pub fn median_smooth(curve: &[f64], window: usize) -> Result<Vec<f64>> {
    if window == 0 || window.is_multiple_of(2) {
        return Err(Error::Contract(format!("median window {window} must be odd")));
    }
    let half = window / 2;
    let n = curve.len();
    Ok((0..n)
        .map(|i| {
            let mut w: Vec<f64> = (0..window)
                .map(|j| curve[(i + j).saturating_sub(half).min(n - 1)])
                .collect();
            w.sort_by(f64::total_cmp);
            w[half]
        })
        .collect())
}

/// Splits a curve over `ℓ = 1..=len` at the first and last rising steps of
/// its median-smoothed version.
pub fn phase_segments(curve: &[f64], opts: &PhaseOptions) -> Result<Phases> {
    if curve.is_empty() {
        return Err(Error::Contract("empty curve".into()));
    }
    let smoothed = median_smooth(curve, opts.window)?;
    let n = smoothed.len();
    let lo = smoothed.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = smoothed.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let whole = Interval { start: 1, end: n };
    let degenerate = |smoothed| Phases {
        floor: Some(whole),
        rise: None,
        plateau: None,
        degenerate: true,
        smoothed,
    };
    if hi - lo < opts.min_range {
        return Ok(degenerate(smoothed));
    }
    let threshold = opts.rise_fraction * (hi - lo);
    // layer ℓ (1-based) rises when it gains on ℓ − 1
    let rising: Vec<usize> = (2..=n)
        .filter(|&l| smoothed[l - 1] - smoothed[l - 2] >= threshold)
        .collect();
    let (Some(&first), Some(&last)) = (rising.first(), rising.last()) else {
        return Ok(degenerate(smoothed));
    };
    Ok(Phases {
        floor: Some(Interval { start: 1, end: first - 1 }),
        rise: Some(Interval { start: first, end: last }),
        plateau: (last < n).then_some(Interval { start: last + 1, end: n }),
        degenerate: false,
        smoothed,
    })
}
