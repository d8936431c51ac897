//! Confidence bounds on the learned log-likelihood loss, for fully observed
//! and occluded demonstrations.

use serde::{Deserialize, Serialize};

use crate::error::{IrlError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceParams {
    /// Bound on the log-likelihood loss.
    pub epsilon: f64,
    /// Bound on the sampled feature-expectation error.
    pub epsilon_sampling: f64,
    /// Samples per hidden completion.
    pub samples: u64,
    /// Number of features.
    pub k: usize,
    pub discount: f64,
    /// Demonstrated trajectories so far.
    pub trajectories: u64,
}

impl ConfidenceParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0)
            || !(self.epsilon_sampling >= 0.0)
            || self.k == 0
            || !(self.discount > 0.0 && self.discount < 1.0)
        {
            return Err(IrlError::InvalidParameter(format!(
                "invalid confidence parameters: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConfidenceReport {
    pub delta: f64,
    pub delta_sampling: f64,
    pub epsilon_latent: f64,
    pub delta_latent: f64,
}

fn clamp01(x: f64) -> f64 {
    if x.is_nan() {
        1.0
    } else {
        x.clamp(0.0, 1.0)
    }
}

/// `δ = 2K exp(−n ε² (1−γ)² / (2K²))`, clamped to `[0, 1]`.
pub fn confidence_fullobs(n_traj: u64, epsilon: f64, discount: f64, k: usize) -> f64 {
    let k = k as f64;
    let exponent = n_traj as f64 * epsilon * epsilon * (1.0 - discount).powi(2) / (2.0 * k * k);
    clamp01(2.0 * k * (-exponent).exp())
}

/// `δ_s = 2K exp(−2 (1−γ)² ε_s² N)`, clamped to `[0, 1]`.
pub fn confidence_sampling(samples: u64, epsilon_sampling: f64, discount: f64, k: usize) -> f64 {
    let exponent =
        2.0 * (1.0 - discount).powi(2) * epsilon_sampling * epsilon_sampling * samples as f64;
    clamp01(2.0 * k as f64 * (-exponent).exp())
}

/// `ε_latent = ε + 2K ε_s` and `δ_latent = δ + δ_s` (clamped).
pub fn confidence_latent(p: &ConfidenceParams) -> Result<ConfidenceReport> {
    p.validate()?;
    let delta = confidence_fullobs(p.trajectories, p.epsilon, p.discount, p.k);
    // zero sampling error carries no sampling term
    let delta_sampling = if p.epsilon_sampling == 0.0 {
        0.0
    } else {
        confidence_sampling(p.samples, p.epsilon_sampling, p.discount, p.k)
    };
    Ok(ConfidenceReport {
        delta,
        delta_sampling,
        epsilon_latent: p.epsilon + 2.0 * p.k as f64 * p.epsilon_sampling,
        delta_latent: clamp01(delta + delta_sampling),
    })
}

/// Smallest trajectory count with `confidence_fullobs(n) ≤ target_delta`.
pub fn trajectories_for_delta(
    target_delta: f64,
    epsilon: f64,
    discount: f64,
    k: usize,
) -> Result<u64> {
    if !(target_delta > 0.0) || !(epsilon > 0.0) || !(discount > 0.0 && discount < 1.0) || k == 0 {
        return Err(IrlError::InvalidParameter(format!(
            "invalid inverse query: δ={target_delta}, ε={epsilon}, γ={discount}, K={k}"
        )));
    }
    if target_delta >= 1.0 {
        return Ok(0);
    }
    let kf = k as f64;
    let log_ratio = (2.0 * kf / target_delta).ln();
    let n = (2.0 * kf * kf * log_ratio / (epsilon * epsilon * (1.0 - discount).powi(2))).ceil();
    let mut n = n.max(0.0) as u64;
    // absorb rounding at the boundary
    while n > 0 && confidence_fullobs(n - 1, epsilon, discount, k) <= target_delta {
        n -= 1;
    }
    while confidence_fullobs(n, epsilon, discount, k) > target_delta {
        n += 1;
    }
    Ok(n)
}
