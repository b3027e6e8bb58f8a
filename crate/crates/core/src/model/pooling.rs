//! Sequence-level pooling of per-position hidden states.
//!
//! Positions are renumbered `t = 1..m` over the real (unmasked) positions of
//! a row, oldest first, so `t = m` is the most recent interaction. Padding
//! never contributes.

use ndarray::{Array2, ArrayView2, ArrayView3};
use serde::{Deserialize, Serialize};

use super::ModelError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolingStrategy {
    Mean,
    Exp,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoolingConfig {
    pub strategy: PoolingStrategy,
    /// Recency emphasis for [`PoolingStrategy::Exp`]; ignored for mean.
    #[serde(default)]
    pub gamma: f64,
}

impl Default for PoolingConfig {
    fn default() -> Self {
        Self {
            strategy: PoolingStrategy::Mean,
            gamma: 0.0,
        }
    }
}

impl PoolingConfig {
    pub fn mean() -> Self {
        Self::default()
    }

    pub fn exp(gamma: f64) -> Self {
        Self {
            strategy: PoolingStrategy::Exp,
            gamma,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if !self.gamma.is_finite() || self.gamma < 0.0 {
            return Err(ModelError::InvalidConfig(format!(
                "pooling gamma must be finite and >= 0, got {}",
                self.gamma
            )));
        }
        Ok(())
    }

    /// `(position, weight)` pairs for one row of the mask.
    pub fn weights(&self, mask_row: &[bool]) -> Option<Vec<(usize, f64)>> {
        match self.strategy {
            PoolingStrategy::Mean => mean_weights(mask_row),
            PoolingStrategy::Exp => exp_weights(mask_row, self.gamma),
        }
    }
}

/// Uniform weights `1/m` over the real positions.
pub fn mean_weights(mask_row: &[bool]) -> Option<Vec<(usize, f64)>> {
    let m = mask_row.iter().filter(|&&b| b).count();
    if m == 0 {
        return None;
    }
    let w = 1.0 / m as f64;
    Some(
        mask_row
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(p, _)| (p, w))
            .collect(),
    )
}

/// Softmax of `gamma * t` over real positions numbered `t = 1..m`.
pub fn exp_weights(mask_row: &[bool], gamma: f64) -> Option<Vec<(usize, f64)>> {
    let positions: Vec<usize> = mask_row
        .iter()
        .enumerate()
        .filter(|(_, &b)| b)
        .map(|(p, _)| p)
        .collect();
    let m = positions.len();
    if m == 0 {
        return None;
    }
    // shift by the largest exponent, gamma * m
    let raw: Vec<f64> = (1..=m)
        .map(|t| (gamma * (t as f64 - m as f64)).exp())
        .collect();
    let z: f64 = raw.iter().sum();
    Some(
        positions
            .into_iter()
            .zip(raw)
            .map(|(p, r)| (p, r / z))
            .collect(),
    )
}

fn pool_with(
    states: ArrayView3<f64>,
    mask: ArrayView2<bool>,
    weights: impl Fn(&[bool]) -> Option<Vec<(usize, f64)>>,
) -> Result<Array2<f64>, ModelError> {
    let (b, l, d) = states.dim();
    if mask.dim() != (b, l) {
        return Err(ModelError::DimensionMismatch {
            expected: b * l,
            got: mask.len(),
        });
    }
    let mut out = Array2::zeros((b, d));
    for row in 0..b {
        let mask_row: Vec<bool> = mask.row(row).to_vec();
        let w = weights(&mask_row).ok_or(ModelError::EmptyRow(row))?;
        let mut dst = out.row_mut(row);
        for (p, wt) in w {
            dst.scaled_add(wt, &states.slice(ndarray::s![row, p, ..]));
        }
    }
    Ok(out)
}

/// Mean of the hidden states over unmasked positions, one vector per row.
pub fn mean_pool(
    states: ArrayView3<f64>,
    mask: ArrayView2<bool>,
) -> Result<Array2<f64>, ModelError> {
    pool_with(states, mask, mean_weights)
}

/// Recency-weighted sum of the hidden states, one vector per row.
pub fn exp_pool(
    states: ArrayView3<f64>,
    mask: ArrayView2<bool>,
    gamma: f64,
) -> Result<Array2<f64>, ModelError> {
    PoolingConfig::exp(gamma).validate()?;
    pool_with(states, mask, |m| exp_weights(m, gamma))
}

pub fn pool(
    states: ArrayView3<f64>,
    mask: ArrayView2<bool>,
    config: &PoolingConfig,
) -> Result<Array2<f64>, ModelError> {
    config.validate()?;
    pool_with(states, mask, |m| config.weights(m))
}
