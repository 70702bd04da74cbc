//! Experiment report and its CSV/JSON emission.
//!
//! CSV schema, one row per grid cell and stage, columns in this order:
//!
//! | column              | meaning                                              |
//! |---------------------|------------------------------------------------------|
//! | `method`            | compression method                                   |
//! | `ratio`             | compression ratio (`0` = uncompressed)               |
//! | `lambda`            | prehab strength (`0` = no prehab)                    |
//! | `seed`              | grid seed                                            |
//! | `stage`             | `base`, `prehab`, `surgery` or `rehab`               |
//! | `status`            | `ok`, `passthrough`, `failed`, `skipped`, `pending`  |
//! | `test_loss`         | mean cross-entropy on the test split                 |
//! | `test_accuracy`     | argmax accuracy on the test split                    |
//! | `param_count`       | weights and biases in the model                      |
//! | `mean_stable_rank`  | mean stable rank of `W·X` over compressible layers   |
//! | `tail_energy`       | `Σ` over those layers of `Σ_{i>r} σᵢ(W·X)²`          |
//! | `accuracy_gain`     | relative accuracy gain vs the `λ = 0` cell           |
//! | `checkpoint`        | model checkpoint, relative to the output directory   |
//! | `error`             | failure message                                      |
//!
//! Absent values are empty cells in CSV and `null` in JSON.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ExperimentConfig, PipelineError};
use crate::compressors::CompressionMethod;

pub const CSV_COLUMNS: [&str; 14] = [
    "method",
    "ratio",
    "lambda",
    "seed",
    "stage",
    "status",
    "test_loss",
    "test_accuracy",
    "param_count",
    "mean_stable_rank",
    "tail_energy",
    "accuracy_gain",
    "checkpoint",
    "error",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    Base,
    Prehab,
    Surgery,
    Rehab,
}

impl StageKind {
    pub const ALL: [StageKind; 4] = [StageKind::Base, StageKind::Prehab, StageKind::Surgery, StageKind::Rehab];

    pub fn as_str(self) -> &'static str {
        match self {
            StageKind::Base => "base",
            StageKind::Prehab => "prehab",
            StageKind::Surgery => "surgery",
            StageKind::Rehab => "rehab",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    /// Computed (or loaded from its checkpoint).
    Ok,
    /// No-op for this cell; metrics are those of the incoming model.
    Passthrough,
    Failed,
    /// An upstream stage failed.
    Skipped,
    /// Not reached in this invocation.
    Pending,
}

impl StageStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            StageStatus::Ok => "ok",
            StageStatus::Passthrough => "passthrough",
            StageStatus::Failed => "failed",
            StageStatus::Skipped => "skipped",
            StageStatus::Pending => "pending",
        }
    }
}

/// Spectrum summary of `W_ℓ·X_ℓ` for one layer, with `X_ℓ` from the base
/// model's calibration so all stages of a seed share the same metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpectrum {
    pub layer: usize,
    pub top_singular_values: Vec<f64>,
    pub stable_rank: Option<f64>,
    pub plan_rank: Option<usize>,
    pub tail_energy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub method: CompressionMethod,
    pub ratio: f64,
    pub lambda: f64,
    pub seed: u64,
    pub stage: StageKind,
    pub status: StageStatus,
    pub test_loss: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub param_count: Option<usize>,
    pub layers: Vec<LayerSpectrum>,
    pub checkpoint: Option<String>,
    pub error: Option<String>,
}

impl StageRecord {
    pub fn mean_stable_rank(&self) -> Option<f64> {
        let ranks: Option<Vec<f64>> = self.layers.iter().map(|l| l.stable_rank).collect();
        let ranks = ranks?;
        (!ranks.is_empty()).then(|| ranks.iter().sum::<f64>() / ranks.len() as f64)
    }

    pub fn tail_energy(&self) -> Option<f64> {
        let tails: Option<Vec<f64>> = self.layers.iter().map(|l| l.tail_energy).collect();
        let tails = tails?;
        (!tails.is_empty()).then(|| tails.iter().sum())
    }

    fn same_cell(&self, other: &StageRecord) -> bool {
        self.method == other.method && self.ratio == other.ratio && self.seed == other.seed && self.stage == other.stage
    }
}

/// Relative accuracy gain of a `λ > 0` cell over its `λ = 0` twin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainRecord {
    pub method: CompressionMethod,
    pub ratio: f64,
    pub lambda: f64,
    pub seed: u64,
    pub stage: StageKind,
    pub candidate_accuracy: f64,
    pub baseline_accuracy: f64,
    pub gain: Option<f64>,
}

/// Medians over seeds for one `(method, ratio, λ, stage)` group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub method: CompressionMethod,
    pub ratio: f64,
    pub lambda: f64,
    pub stage: StageKind,
    pub seeds: usize,
    pub median_test_accuracy: Option<f64>,
    pub median_test_loss: Option<f64>,
    pub median_accuracy_gain: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    /// Ordered by method, ratio, λ, seed (config order), then stage.
    pub records: Vec<StageRecord>,
    pub gains: Vec<GainRecord>,
    pub summaries: Vec<GroupSummary>,
    pub failures: usize,
}

/// `(candidate − baseline) / baseline`; `None` for a zero or non-finite
/// baseline.
pub fn relative_gain(candidate: f64, baseline: f64) -> Option<f64> {
    if baseline == 0.0 || !baseline.is_finite() || !candidate.is_finite() {
        return None;
    }
    Some((candidate - baseline) / baseline)
}

/// Median with the mean of the middle pair for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

impl ExperimentReport {
    /// Builds gains and group summaries from the records.
    pub fn new(config: ExperimentConfig, records: Vec<StageRecord>) -> Self {
        let gains: Vec<GainRecord> = records
            .iter()
            .filter(|r| r.lambda > 0.0 && r.stage != StageKind::Base)
            .filter_map(|r| {
                let base = records.iter().find(|b| b.lambda == 0.0 && b.same_cell(r))?;
                let (candidate, baseline) = (r.test_accuracy?, base.test_accuracy?);
                Some(GainRecord {
                    method: r.method,
                    ratio: r.ratio,
                    lambda: r.lambda,
                    seed: r.seed,
                    stage: r.stage,
                    candidate_accuracy: candidate,
                    baseline_accuracy: baseline,
                    gain: relative_gain(candidate, baseline),
                })
            })
            .collect();
        let mut summaries = Vec::new();
        for &method in &config.compression.methods {
            for &ratio in &config.compression.ratios {
                for &lambda in &config.lambdas {
                    for stage in StageKind::ALL {
                        let group: Vec<&StageRecord> = records
                            .iter()
                            .filter(|r| {
                                r.method == method && r.ratio == ratio && r.lambda == lambda && r.stage == stage
                            })
                            .collect();
                        let acc: Vec<f64> = group.iter().filter_map(|r| r.test_accuracy).collect();
                        let loss: Vec<f64> = group.iter().filter_map(|r| r.test_loss).collect();
                        let gain: Vec<f64> = gains
                            .iter()
                            .filter(|g| {
                                g.method == method && g.ratio == ratio && g.lambda == lambda && g.stage == stage
                            })
                            .filter_map(|g| g.gain)
                            .collect();
                        summaries.push(GroupSummary {
                            method,
                            ratio,
                            lambda,
                            stage,
                            seeds: group.len(),
                            median_test_accuracy: median(&acc),
                            median_test_loss: median(&loss),
                            median_accuracy_gain: median(&gain),
                        });
                    }
                }
            }
        }
        let failures = records.iter().filter(|r| r.status == StageStatus::Failed).count();
        Self {
            config,
            records,
            gains,
            summaries,
            failures,
        }
    }

    pub fn record(
        &self,
        method: CompressionMethod,
        ratio: f64,
        lambda: f64,
        seed: u64,
        stage: StageKind,
    ) -> Option<&StageRecord> {
        self.records.iter().find(|r| {
            r.method == method && r.ratio == ratio && r.lambda == lambda && r.seed == seed && r.stage == stage
        })
    }

    pub fn summary(
        &self,
        method: CompressionMethod,
        ratio: f64,
        lambda: f64,
        stage: StageKind,
    ) -> Option<&GroupSummary> {
        self.summaries
            .iter()
            .find(|s| s.method == method && s.ratio == ratio && s.lambda == lambda && s.stage == stage)
    }

    fn gain_for(&self, r: &StageRecord) -> Option<f64> {
        self.gains
            .iter()
            .find(|g| {
                g.method == r.method
                    && g.ratio == r.ratio
                    && g.lambda == r.lambda
                    && g.seed == r.seed
                    && g.stage == r.stage
            })
            .and_then(|g| g.gain)
    }

    pub fn to_csv(&self) -> Result<String, PipelineError> {
        let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        let csv_err = |e: csv::Error| PipelineError::Report(e.to_string());
        out.write_record(CSV_COLUMNS).map_err(csv_err)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.records {
            out.write_record([
                r.method.as_str().to_string(),
                r.ratio.to_string(),
                r.lambda.to_string(),
                r.seed.to_string(),
                r.stage.as_str().to_string(),
                r.status.as_str().to_string(),
                opt(r.test_loss),
                opt(r.test_accuracy),
                r.param_count.map(|p| p.to_string()).unwrap_or_default(),
                opt(r.mean_stable_rank()),
                opt(r.tail_energy()),
                opt(self.gain_for(r)),
                r.checkpoint.clone().unwrap_or_default(),
                r.error.clone().unwrap_or_default(),
            ])
            .map_err(csv_err)?;
        }
        let bytes = out.into_inner().map_err(|e| PipelineError::Report(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| PipelineError::Report(e.to_string()))
    }

    pub fn to_json(&self) -> Result<String, PipelineError> {
        let mut text = serde_json::to_string_pretty(self).map_err(|e| PipelineError::Report(e.to_string()))?;
        text.push('\n');
        Ok(text)
    }

    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        serde_json::from_str(text).map_err(|e| PipelineError::Report(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

/// Writes `report.csv` and/or `report.json` into `dir`.
pub fn emit_report(report: &ExperimentReport, dir: &Path, formats: &[ReportFormat]) -> Result<(), PipelineError> {
    fs::create_dir_all(dir).map_err(|e| PipelineError::Io(dir.display().to_string(), e))?;
    for format in formats {
        let (name, text) = match format {
            ReportFormat::Csv => ("report.csv", report.to_csv()?),
            ReportFormat::Json => ("report.json", report.to_json()?),
        };
        let path = dir.join(name);
        fs::write(&path, text).map_err(|e| PipelineError::Io(path.display().to_string(), e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_gain_examples() {
        assert_eq!(relative_gain(3.0, 3.0), Some(0.0));
        assert_eq!(relative_gain(1.0, 0.0), None);
        assert!((relative_gain(1.5, 1.0).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn empty_grid_is_header_only() {
        let config = ExperimentConfig {
            seeds: vec![],
            ..ExperimentConfig::default()
        };
        let report = ExperimentReport::new(config, vec![]);
        assert_eq!(report.to_csv().unwrap(), format!("{}\n", CSV_COLUMNS.join(",")));
        let json = report.to_json().unwrap();
        assert_eq!(ExperimentReport::from_json(&json).unwrap().to_json().unwrap(), json);
    }
}
