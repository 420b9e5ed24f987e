//! Evaluation reports: per-image JSONL records plus one summary document.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::HarnessConfig;
use crate::diagnostics::DiagnosticReport;
use crate::error::{Error, Result};
use crate::metrics;

pub const SCHEMA_VERSION: u32 = 1;

/// One image under one attack on one defense.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub defense: String,
    pub attack: String,
    /// Index into the test split.
    pub index: usize,
    pub label: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target: Option<usize>,
    pub clean_correct: bool,
    /// False for images misclassified before any attack; those are not
    /// attacked and count neither as correct nor as successes.
    pub attacked: bool,
    pub success: bool,
    /// Classified correctly in at least one evaluation trial.
    pub correct: bool,
    pub adversarial_trials: usize,
    pub linf: f64,
    pub l2: f64,
    pub l2_raw: f64,
    pub rms: f64,
    pub zero_gradient: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DistortionStats {
    /// Successful adversarial examples the statistics cover.
    pub count: usize,
    pub linf_mean: Option<f64>,
    pub linf_median: Option<f64>,
    pub l2_mean: Option<f64>,
    pub l2_median: Option<f64>,
    pub l2_raw_mean: Option<f64>,
    pub rms_mean: Option<f64>,
}

impl DistortionStats {
    pub fn of(records: &[&ImageRecord]) -> Self {
        let ok: Vec<&&ImageRecord> = records.iter().filter(|r| r.success).collect();
        let col = |f: fn(&ImageRecord) -> f64| ok.iter().map(|r| f(r)).collect::<Vec<f64>>();
        let (linf, l2, raw, rms) = (col(|r| r.linf), col(|r| r.l2), col(|r| r.l2_raw), col(|r| r.rms));
        Self {
            count: ok.len(),
            linf_mean: metrics::mean(&linf),
            linf_median: metrics::median(&linf),
            l2_mean: metrics::mean(&l2),
            l2_median: metrics::median(&l2),
            l2_raw_mean: metrics::mean(&raw),
            rms_mean: metrics::mean(&rms),
        }
    }
}

/// One (attack, defense) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub attack: String,
    pub images: usize,
    pub accuracy: f64,
    pub success_rate: f64,
    pub clean_misclassified_rate: f64,
    pub zero_gradient_rate: f64,
    pub distortion: DistortionStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestImage {
    pub index: usize,
    pub correct: bool,
    /// Lowest-RMS successful attack, if any succeeded.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attack: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestPerImageSummary {
    /// Accuracy when each image meets its own strongest attack.
    pub accuracy: f64,
    /// Accuracy under the single strongest attack.
    pub strongest_attack_accuracy: f64,
    pub strongest_attack: String,
    pub images: Vec<BestImage>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefenseReport {
    pub name: String,
    pub description: String,
    pub stochastic: bool,
    /// Trials per evaluation and trials that must fail for success.
    pub trials: usize,
    pub required: usize,
    pub images: usize,
    pub clean_accuracy: f64,
    pub cells: Vec<CellSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub best_per_image: Option<BestPerImageSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<DiagnosticReport>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Runtime {
    pub seconds: f64,
    pub workers: usize,
    pub version: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub schema_version: u32,
    pub config: HarnessConfig,
    pub defenses: Vec<DefenseReport>,
    #[serde(skip)]
    pub records: Vec<ImageRecord>,
    pub runtime: Runtime,
}

impl EvaluationReport {
    pub fn defense(&self, name: &str) -> Option<&DefenseReport> {
        self.defenses.iter().find(|d| d.name == name)
    }

    pub fn summary_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Invalid(e.to_string()))
    }

    pub fn records_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).map_err(|e| Error::Invalid(e.to_string()))?);
            out.push('\n');
        }
        Ok(out)
    }

    /// Summary and records without wall-clock fields; equal across reruns
    /// of the same config.
    pub fn payload(&self) -> Result<String> {
        let mut copy = self.clone();
        copy.runtime.seconds = 0.0;
        copy.runtime.workers = 0;
        Ok(copy.summary_json()? + &copy.records_jsonl()?)
    }

    /// Writes `summary.json` and `records.jsonl` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let io = |source| Error::Io {
            path: dir.to_path_buf(),
            source,
        };
        fs::create_dir_all(dir).map_err(io)?;
        fs::write(dir.join("summary.json"), self.summary_json()?).map_err(io)?;
        let mut f = fs::File::create(dir.join("records.jsonl")).map_err(io)?;
        f.write_all(self.records_jsonl()?.as_bytes()).map_err(io)?;
        Ok(())
    }
}
