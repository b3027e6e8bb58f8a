//! Representation-alignment distillation.
//!
//! The pooled hidden state of one transformer block is pulled toward a
//! frozen per-user profile target with an MSE loss. During the first phase
//! the objective is
//!
//! ```text
//! total = alpha * beta * l_distill + (1 - alpha) * l_model
//! beta  = l_model / max(l_distill, eps)     (constant for differentiation)
//! ```
//!
//! with `beta = 1` when dynamic scaling is off. The second phase optimizes
//! `l_model` alone.

mod train;

use std::collections::HashMap;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelError, PoolingConfig};

pub use train::{
    phase_objective, probe_reconstruction, two_phase_train, Adam, ObjectiveOutput, TrainConfig,
    TrainOutcome, Variant,
};

/// Upper clamp for the dynamic coefficient.
pub const BETA_MAX: f64 = 1e8;

#[derive(Debug, Error)]
pub enum DistillError {
    #[error("invalid distillation config: {0}")]
    InvalidConfig(String),
    #[error("target dimension {got} does not match hidden size {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("no user sequence yields a training example")]
    NoTrainableUsers,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Source of frozen per-user targets.
pub trait TargetLookup {
    fn dim(&self) -> usize;
    fn target(&self, user_id: &str) -> Option<&[f32]>;
}

impl TargetLookup for HashMap<String, Vec<f32>> {
    fn dim(&self) -> usize {
        self.values().next().map_or(0, Vec::len)
    }

    fn target(&self, user_id: &str) -> Option<&[f32]> {
        self.get(user_id).map(Vec::as_slice)
    }
}

fn default_alpha() -> f64 {
    0.4
}
fn default_true() -> bool {
    true
}
fn default_eps() -> f64 {
    1e-8
}
fn default_phase1() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillationConfig {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_true")]
    pub use_dynamic_beta: bool,
    #[serde(default = "default_eps")]
    pub beta_eps: f64,
    /// 1-based block index; `None` means the final block.
    #[serde(default)]
    pub layer: Option<usize>,
    #[serde(default)]
    pub pooling: PoolingConfig,
    #[serde(default = "default_phase1")]
    pub phase1_fraction: f64,
}

impl Default for DistillationConfig {
    fn default() -> Self {
        Self {
            alpha: default_alpha(),
            use_dynamic_beta: true,
            beta_eps: default_eps(),
            layer: None,
            pooling: PoolingConfig::default(),
            phase1_fraction: default_phase1(),
        }
    }
}

impl DistillationConfig {
    pub fn validate(&self, num_layers: usize) -> Result<(), DistillError> {
        let bad = |m: String| Err(DistillError::InvalidConfig(m));
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha {} outside [0, 1]", self.alpha));
        }
        if !(self.beta_eps > 0.0 && self.beta_eps.is_finite()) {
            return bad(format!("beta_eps must be positive, got {}", self.beta_eps));
        }
        if !(0.0..=1.0).contains(&self.phase1_fraction) {
            return bad(format!(
                "phase1_fraction {} outside [0, 1]",
                self.phase1_fraction
            ));
        }
        let k = self.resolved_layer(num_layers);
        if k == 0 || k > num_layers {
            return bad(format!("distill layer {k} outside 1..={num_layers}"));
        }
        self.pooling.validate()?;
        Ok(())
    }

    pub fn resolved_layer(&self, num_layers: usize) -> usize {
        self.layer.unwrap_or(num_layers)
    }

    /// Number of distillation-phase epochs out of `total_epochs`.
    pub fn phase1_epochs(&self, total_epochs: usize) -> usize {
        ((self.phase1_fraction * total_epochs as f64).round() as usize).min(total_epochs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_model: f64,
    pub l_distill: f64,
    pub beta: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Distill,
    Finetune,
}

/// Per-epoch means. `l_distill` is measured in both phases whenever
/// targets exist; `beta` only in the distillation phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub l_model: f64,
    pub l_distill: Option<f64>,
    pub beta: Option<f64>,
    /// Reconstruction loss of the model after the epoch, without dropout.
    pub probe: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossTrajectory {
    pub records: Vec<EpochRecord>,
    /// First finetune epoch (0-based); equals the epoch count when the run
    /// never leaves the distillation phase.
    pub transition_epoch: usize,
}

impl LossTrajectory {
    /// One JSON object per line: `{epoch, phase, l_model, l_distill, beta, probe}`.
    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("serializable record") + "\n")
            .collect()
    }

    pub fn from_jsonl(text: &str) -> Result<Self, serde_json::Error> {
        let records: Vec<EpochRecord> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<_, _>>()?;
        let transition_epoch = records
            .iter()
            .position(|r| r.phase == Phase::Finetune)
            .unwrap_or(records.len());
        Ok(Self {
            records,
            transition_epoch,
        })
    }
}

/// Mean squared difference over coordinates.
pub fn distill_loss(pooled: &[f64], target: &[f64]) -> Result<f64, DistillError> {
    if pooled.len() != target.len() {
        return Err(DistillError::DimensionMismatch {
            expected: pooled.len(),
            got: target.len(),
        });
    }
    if pooled.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = pooled
        .iter()
        .zip(target)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(s / pooled.len() as f64)
}

/// Batch distillation loss: mean of [`distill_loss`] over rows whose
/// `has_target` flag is set. `None` when no row has a target.
pub fn batch_distill_loss(
    pooled: ArrayView2<f64>,
    targets: ArrayView2<f64>,
    has_target: &[bool],
) -> Result<Option<f64>, DistillError> {
    if pooled.dim() != targets.dim() {
        return Err(DistillError::DimensionMismatch {
            expected: pooled.ncols(),
            got: targets.ncols(),
        });
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (r, &keep) in has_target.iter().enumerate() {
        if keep {
            let p = pooled.row(r).to_vec();
            let t = targets.row(r).to_vec();
            sum += distill_loss(&p, &t)?;
            n += 1;
        }
    }
    Ok((n > 0).then(|| sum / n as f64))
}

/// `l_model / max(l_distill, eps)`, clamped to `[0, BETA_MAX]`. Callers
/// treat the result as a constant.
pub fn dynamic_beta(l_model: f64, l_distill: f64, eps: f64) -> f64 {
    (l_model / l_distill.max(eps)).clamp(0.0, BETA_MAX)
}

/// Coefficients `(w_distill, w_model, beta)` of the distillation-phase
/// objective `w_distill * l_distill + w_model * l_model`.
pub fn loss_weights(l_model: f64, l_distill: f64, config: &DistillationConfig) -> (f64, f64, f64) {
    let beta = if config.use_dynamic_beta {
        dynamic_beta(l_model, l_distill, config.beta_eps)
    } else {
        1.0
    };
    (config.alpha * beta, 1.0 - config.alpha, beta)
}

/// Distillation-phase objective value.
pub fn combined_loss(l_model: f64, l_distill: f64, config: &DistillationConfig) -> LossBreakdown {
    let (wd, wm, beta) = loss_weights(l_model, l_distill, config);
    LossBreakdown {
        l_model,
        l_distill,
        beta,
        total: wd * l_distill + wm * l_model,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn cfg(alpha: f64, dynamic: bool) -> DistillationConfig {
        DistillationConfig {
            alpha,
            use_dynamic_beta: dynamic,
            ..Default::default()
        }
    }

    #[test]
    fn distill_loss_examples() {
        assert_eq!(distill_loss(&[0.3, -1.0], &[0.3, -1.0]).unwrap(), 0.0);
        assert_eq!(distill_loss(&[1.0, 1.0], &[0.0, 0.0]).unwrap(), 1.0);
        assert!(distill_loss(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn distill_loss_matches_loop_oracle() {
        let p: Vec<f64> = (0..32).map(|i| (i as f64 * 0.37).sin()).collect();
        let t: Vec<f64> = (0..32).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut acc = 0.0;
        for i in 0..32 {
            let d = p[i] - t[i];
            acc += d * d;
        }
        assert!((distill_loss(&p, &t).unwrap() - acc / 32.0).abs() < 1e-15);
    }

    #[test]
    fn batch_loss_skips_masked_users() {
        let pooled = array![[1.0, 1.0], [5.0, 5.0], [0.0, 2.0]];
        let targets = array![[0.0, 0.0], [0.0, 0.0], [0.0, 0.0]];
        let l = batch_distill_loss(pooled.view(), targets.view(), &[true, false, true]).unwrap();
        assert_eq!(l, Some((1.0 + 2.0) / 2.0));
        let none = batch_distill_loss(pooled.view(), targets.view(), &[false; 3]).unwrap();
        assert_eq!(none, None);
    }

    #[test]
    fn beta_examples() {
        assert_eq!(dynamic_beta(2.0, 0.5, 1e-8), 4.0);
        assert_eq!(dynamic_beta(1.0, 1.0, 1e-8), 1.0);
        assert_eq!(dynamic_beta(1.0, 0.0, 1e-8), 1e8);
        assert_eq!(dynamic_beta(1e3, 0.0, 1e-8), BETA_MAX);
    }

    #[test]
    fn combined_loss_boundaries() {
        let b = combined_loss(2.5, 0.1, &cfg(0.0, true));
        assert_eq!(b.total, 2.5);
        let b = combined_loss(2.5, 0.3, &cfg(1.0, false));
        assert_eq!(b.total, 0.3);
        assert_eq!(b.beta, 1.0);
    }

    #[test]
    fn dynamic_scaling_restores_model_loss_value() {
        let b = combined_loss(2.0, 0.5, &cfg(0.4, true));
        assert_eq!(b.beta, 4.0);
        assert!((b.total - 2.0).abs() < 1e-12);
    }

    #[test]
    fn total_is_affine_in_alpha() {
        let (lm, ld) = (1.7, 0.2);
        let at = |a: f64| combined_loss(lm, ld, &cfg(a, false)).total;
        let slope = ld - lm;
        assert!((at(0.5) - at(0.0) - 0.5 * slope).abs() < 1e-12);
        assert!((at(1.0) - at(0.0) - slope).abs() < 1e-12);
    }

    #[test]
    fn config_validation_and_schedule() {
        let c = DistillationConfig::default();
        assert!(c.validate(2).is_ok());
        assert_eq!(c.resolved_layer(3), 3);
        assert_eq!(c.phase1_epochs(10), 5);
        assert_eq!(c.phase1_epochs(20), 10);
        let bad = DistillationConfig {
            layer: Some(3),
            ..Default::default()
        };
        assert!(bad.validate(2).is_err());
        assert!(cfg(1.5, true).validate(2).is_err());
    }

    #[test]
    fn trajectory_jsonl_round_trip() {
        let t = LossTrajectory {
            records: vec![
                EpochRecord {
                    epoch: 0,
                    phase: Phase::Distill,
                    l_model: 3.0,
                    l_distill: Some(0.5),
                    beta: Some(6.0),
                    probe: Some(0.4),
                },
                EpochRecord {
                    epoch: 1,
                    phase: Phase::Finetune,
                    l_model: 2.5,
                    l_distill: None,
                    beta: None,
                    probe: None,
                },
            ],
            transition_epoch: 1,
        };
        let text = t.to_jsonl();
        assert!(text.starts_with("{\"epoch\":0,\"phase\":\"distill\""));
        assert_eq!(LossTrajectory::from_jsonl(&text).unwrap(), t);
    }
}
