//! Training configuration and the report both engines produce.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::cascade::check_alpha;
use crate::error::{Result, SidError};
use crate::network::PipelineDims;

/// Which module losses update the shared extractor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorStrategy {
    /// Sum of every module's extractor gradient.
    #[default]
    AllLayers,
    /// Only the last module's.
    FinalLayer,
    /// Extractor never updated.
    Frozen,
}

impl std::str::FromStr for ExtractorStrategy {
    type Err = SidError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all_layers" => Ok(Self::AllLayers),
            "final_layer" => Ok(Self::FinalLayer),
            "frozen" => Ok(Self::Frozen),
            other => Err(SidError::param(format!(
                "unknown extractor strategy {other:?}"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub alpha: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub extractor_strategy: ExtractorStrategy,
    /// Optimizer steps a teacher cache may be reused for; 0 regenerates every batch.
    pub staleness_k: u64,
    pub label_smoothing: f64,
    pub layers: usize,
    pub hidden: usize,
    pub feature_dim: usize,
    pub extractor_hidden: Vec<usize>,
    /// Test samples whose per-layer beliefs are logged and audited.
    pub probe_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 0.5,
            epochs: 30,
            batch_size: 128,
            lr: 1e-3,
            seed: 0,
            extractor_strategy: ExtractorStrategy::AllLayers,
            staleness_k: 0,
            label_smoothing: 0.1,
            layers: 3,
            hidden: 64,
            feature_dim: 32,
            extractor_hidden: vec![64],
            probe_size: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)?;
        if self.batch_size == 0 {
            return Err(SidError::param("batch_size must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(SidError::param(format!(
                "learning rate {} must be positive",
                self.lr
            )));
        }
        if !(self.label_smoothing > 0.0 && self.label_smoothing < 1.0) {
            return Err(SidError::param(format!(
                "label_smoothing {} must lie in (0, 1) so targets keep full support",
                self.label_smoothing
            )));
        }
        if self.layers == 0 || self.hidden == 0 || self.feature_dim == 0 {
            return Err(SidError::param(
                "layers, hidden and feature_dim must be positive",
            ));
        }
        Ok(())
    }

    pub fn dims(&self, input_dim: usize, m: usize) -> PipelineDims {
        PipelineDims {
            input_dim,
            extractor_hidden: self.extractor_hidden.clone(),
            feature_dim: self.feature_dim,
            hidden: self.hidden,
            m,
            layers: self.layers,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_acc: f64,
}

/// Wall-clock per epoch, kept apart from the deterministic metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseTiming {
    pub epoch: usize,
    /// SID: teacher generation. BP: forward pass.
    pub phase1_ms: f64,
    /// SID: parallel local updates. BP: backward pass.
    pub phase2_ms: f64,
}

/// True-class probability at every stage `p_0..p_L` for one probe sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeliefTrajectory {
    pub label: usize,
    pub true_class_prob: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AuditSummary {
    pub samples: usize,
    /// Samples for which the relaxed bound (with measured errors) holds.
    pub bound_holds: usize,
    /// Fraction of samples where every step improved its local objective.
    pub pure_descent_fraction: f64,
    pub min_slack: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// `"sid"` or `"bp"`.
    pub rule: String,
    pub config: TrainConfig,
    pub epochs: Vec<EpochMetrics>,
    pub final_test_acc: f64,
    pub trajectories: Vec<BeliefTrajectory>,
    pub audit: AuditSummary,
    pub timing: Vec<PhaseTiming>,
}

impl TrainReport {
    /// The report with wall-clock fields removed; equal inputs give equal values.
    pub fn without_timing(&self) -> TrainReport {
        TrainReport {
            timing: Vec::new(),
            ..self.clone()
        }
    }

    pub fn write_json<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer_pretty(w, self)?;
        Ok(())
    }

    /// `epoch,train_loss,test_acc,phase1_ms,phase2_ms`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "epoch,train_loss,test_acc,phase1_ms,phase2_ms")?;
        for (e, t) in self.epochs.iter().zip(&self.timing) {
            writeln!(
                w,
                "{},{:.17e},{:.17e},{:.3},{:.3}",
                e.epoch, e.train_loss, e.test_acc, t.phase1_ms, t.phase2_ms
            )?;
        }
        Ok(())
    }
}
