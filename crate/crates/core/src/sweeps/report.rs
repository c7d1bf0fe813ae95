// SPDX-License-Identifier: MIT OR Apache-2.0

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model_digest;
use crate::error::{Error, Result};
use crate::eval::EvalReport;
use crate::interventions::MaskVariant;
use crate::model::Transformer;
use crate::training::HardConcreteGates;

/// Which scalar of an [`EvalReport`] a curve is read from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Bleu,
    SeqAccuracy,
}

impl Metric {
    pub fn of(self, r: &EvalReport) -> f64 {
        match self {
            Metric::Bleu => r.bleu,
            Metric::SeqAccuracy => r.seq_accuracy,
        }
    }

    /// Plateau tolerance: one BLEU point, or two accuracy points.
    pub fn default_epsilon(self) -> f64 {
        match self {
            Metric::Bleu => 1.0,
            Metric::SeqAccuracy => 0.02,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    /// Unmodified model.
    Baseline,
    /// `layer` is the first masked layer.
    ContextMask,
    /// `layer` is the ablated layer; `None` is the unablated point.
    LayerMask,
    /// `layer` is the adapted layer.
    LoraScan,
    /// Learned head gates applied.
    Gated,
}

impl SweepKind {
    fn name(self) -> &'static str {
        match self {
            SweepKind::Baseline => "baseline",
            SweepKind::ContextMask => "context_mask",
            SweepKind::LayerMask => "layer_mask",
            SweepKind::LoraScan => "lora_scan",
            SweepKind::Gated => "gated",
        }
    }
}

/// One evaluated configuration with the provenance to reproduce it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepPoint {
    pub kind: SweepKind,
    pub variant: Option<MaskVariant>,
    pub layer: Option<usize>,
    pub k: usize,
    pub instruction: bool,
    pub seed: u64,
    pub episodes_hash: String,
    pub metrics: EvalReport,
}

/// A sweep's points plus the model and config they came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepReport {
    pub name: String,
    pub n_layers: usize,
    pub model_hash: String,
    /// Filled by the caller that owns the run configuration.
    #[serde(default)]
    pub config_hash: String,
    pub seed: u64,
    pub points: Vec<SweepPoint>,
}

impl SweepReport {
    pub(crate) fn assemble(name: &str, model: &Transformer, seed: u64, points: Vec<SweepPoint>) -> Result<Self> {
        Ok(Self {
            name: name.to_string(),
            n_layers: model.config.n_layers,
            model_hash: model_digest(model)?,
            config_hash: String::new(),
            seed,
            points,
        })
    }

    /// Context-mask points for `(variant, k)`, ordered by layer.
    pub fn mask_points(&self, variant: MaskVariant, k: usize) -> Vec<&SweepPoint> {
        let mut pts: Vec<&SweepPoint> = self
            .points
            .iter()
            .filter(|p| p.kind == SweepKind::ContextMask && p.variant == Some(variant) && p.k == k)
            .collect();
        pts.sort_by_key(|p| p.layer);
        pts
    }

    /// `metric` at `ℓ = 1..=n_layers + 1` for `(variant, k)`.
    pub fn curve(&self, variant: MaskVariant, k: usize, metric: Metric) -> Result<Vec<f64>> {
        let pts = self.mask_points(variant, k);
        let layers: Vec<Option<usize>> = pts.iter().map(|p| p.layer).collect();
        let want: Vec<Option<usize>> = (1..=self.n_layers + 1).map(Some).collect();
        if layers != want {
            return Err(Error::Contract(format!(
                "report '{}' has no complete {variant} curve for k={k}",
                self.name
            )));
        }
        if pts.windows(2).any(|w| w[0].episodes_hash != w[1].episodes_hash) {
            return Err(Error::Contract("curve points decoded different episodes".into()));
        }
        Ok(pts.iter().map(|p| metric.of(&p.metrics)).collect())
    }

    pub fn baseline(&self, k: usize, instruction: bool) -> Option<&SweepPoint> {
        self.points
            .iter()
            .find(|p| p.kind == SweepKind::Baseline && p.k == k && p.instruction == instruction)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One point per line.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for p in &self.points {
            serde_json::to_writer(&mut out, p)?;
            out.push(b'\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Flat table, one row per point.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "sweep",
            "kind",
            "variant",
            "layer",
            "k",
            "instruction",
            "seed",
            "bleu",
            "seq_accuracy",
            "token_accuracy",
            "target_vocab_rate",
            "n_items",
            "episodes_hash",
        ])?;
        for p in &self.points {
            w.write_record([
                self.name.clone(),
                p.kind.name().to_string(),
                p.variant.map(|v| v.name().to_string()).unwrap_or_default(),
                p.layer.map(|l| l.to_string()).unwrap_or_default(),
                p.k.to_string(),
                p.instruction.to_string(),
                p.seed.to_string(),
                p.metrics.bleu.to_string(),
                p.metrics.seq_accuracy.to_string(),
                p.metrics.token_accuracy.to_string(),
                p.metrics.target_vocab_rate.to_string(),
                p.metrics.n_items.to_string(),
                p.episodes_hash.clone(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Layer × head matrix of deterministic gate values, one row per layer.
pub fn write_gate_grid(gates: &HardConcreteGates, path: &Path) -> Result<()> {
    let grid = gates.eval_gates();
    let n_heads = grid.first().map_or(0, Vec::len);
    let mut out = Vec::new();
    let header: Vec<String> = std::iter::once("layer".to_string())
        .chain((1..=n_heads).map(|h| format!("head_{h}")))
        .collect();
    writeln!(out, "{}", header.join(",")).map_err(|e| Error::io(path, e))?;
    for (l, row) in grid.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|g| g.to_string()).collect();
        writeln!(out, "{},{}", l + 1, cells.join(",")).map_err(|e| Error::io(path, e))?;
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
