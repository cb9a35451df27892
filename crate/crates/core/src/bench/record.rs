//! Persisted outcome of one run. Everything under `metrics` is a pure
//! function of the config, so reruns compare bit for bit.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bench::config::RunConfig;
use crate::diagnostics::{ConflictSample, DegradationMatrix, ImportanceProfile};
use crate::error::{Error, Result};
use crate::metagf::Method;

/// `major.minor`; loaders accept any minor of their own major.
pub const SCHEMA_VERSION: &str = "1.0";

fn schema_major(v: &str) -> Option<u32> {
    v.split('.').next()?.parse().ok()
}

/// One sample per epoch, keyed by the number of completed epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    /// Mean training loss seen during the epoch, per task.
    pub task_losses: Vec<f64>,
    pub train_accuracy: Vec<f64>,
    pub test_accuracy: Vec<f64>,
    pub test_loss: Vec<f64>,
    /// Mean pairwise conflict at the inference weights after the epoch.
    pub conflict: Option<f64>,
    pub joint_loss: f64,
    pub fused_norm: f64,
    pub meta_loss_before: Option<f64>,
    pub meta_loss_after: Option<f64>,
    pub fallback_filters: usize,
}

impl EpochMetrics {
    pub fn mean_train_accuracy(&self) -> f64 {
        mean(&self.train_accuracy)
    }
}

pub(crate) fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub method: Method,
    pub tasks: usize,
    pub epochs: Vec<EpochMetrics>,
    pub final_train_accuracy: Vec<f64>,
    pub final_test_accuracy: Vec<f64>,
    pub final_test_loss: Vec<f64>,
    pub profile: ImportanceProfile,
    pub degradation: DegradationMatrix,
    /// Cosine similarity of learned importances; fusion methods only.
    pub similarity: Option<Vec<Vec<f64>>>,
    /// Conflict/gain pairs sampled during joint training.
    #[serde(default)]
    pub gain_samples: Vec<ConflictSample>,
    /// Samples skipped because the single-gradient trial left the loss
    /// unchanged.
    #[serde(default)]
    pub gain_dropped: usize,
}

impl RunMetrics {
    /// First epoch (1-based) whose mean training accuracy reaches `threshold`.
    pub fn epochs_to_threshold(&self, threshold: f64) -> Option<usize> {
        self.epochs
            .iter()
            .find(|e| e.mean_train_accuracy() >= threshold)
            .map(|e| e.epoch)
    }

    pub fn conflict_series(&self) -> Vec<Option<f64>> {
        self.epochs.iter().map(|e| e.conflict).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema: String,
    pub config_hash: String,
    pub config: RunConfig,
    pub metrics: RunMetrics,
    /// Not part of the metrics; varies between reruns.
    pub wall_seconds: f64,
}

impl RunRecord {
    pub fn new(config: RunConfig, metrics: RunMetrics, wall_seconds: f64) -> Self {
        Self {
            schema: SCHEMA_VERSION.to_string(),
            config_hash: config.hash(),
            config,
            metrics,
            wall_seconds,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Parses and checks the schema major version and the config hash.
    pub fn from_json(text: &str) -> Result<Self> {
        let raw: serde_json::Value = serde_json::from_str(text)?;
        let schema = raw
            .get("schema")
            .and_then(|v| v.as_str())
            .ok_or_else(|| Error::Format("run record has no schema version".into()))?;
        if schema_major(schema) != schema_major(SCHEMA_VERSION) {
            return Err(Error::Format(format!(
                "run record schema {schema} is not readable by {SCHEMA_VERSION}"
            )));
        }
        let rec: Self = serde_json::from_value(raw)?;
        let actual = rec.config.hash();
        if actual != rec.config_hash {
            return Err(Error::Format(format!(
                "config hash mismatch: recorded {}, computed {actual}",
                rec.config_hash
            )));
        }
        Ok(rec)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
