//! Binary features, feature expectations and the fully observed
//! max-entropy IRL solver.
//!
//! The model distribution over fixed-length trajectories is
//!
//! ```text
//! Pr(X; θ) ∝ p0(s_1) · exp(Σ_t γ^t θᵀφ(s_t, a_t)) · Π_t T(s_{t+1} | s_t, a_t)
//! ```
//!
//! with `t = 1..T`, so the first step is already discounted by γ. The log
//! partition function, the expected discounted feature counts and the
//! entropy of this distribution are computed exactly by a finite-horizon
//! backward (soft value) pass followed by a forward occupancy pass.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::budget::Budget;
use crate::error::{IrlError, Result};
use crate::mdp::{log_sum_exp, Mdp};

const MAX_GAUGE_SEARCH: usize = 16;

/// `K` binary feature functions over state-action pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    n_states: usize,
    n_actions: usize,
    k: usize,
    /// `bits[(s * n_actions + a) * k + j]`
    bits: Vec<u8>,
    /// Disjoint groups of features with exactly one member active at
    /// every state-action pair.
    gauge: Vec<Vec<usize>>,
}

impl FeatureSet {
    pub fn from_fn(
        n_states: usize,
        n_actions: usize,
        k: usize,
        f: impl Fn(usize, usize, usize) -> bool,
    ) -> Result<Self> {
        let mut bits = Vec::with_capacity(n_states * n_actions * k);
        for s in 0..n_states {
            for a in 0..n_actions {
                for j in 0..k {
                    bits.push(u8::from(f(s, a, j)));
                }
            }
        }
        Self::from_bits(n_states, n_actions, k, bits)
    }

    pub fn from_bits(n_states: usize, n_actions: usize, k: usize, bits: Vec<u8>) -> Result<Self> {
        if k == 0 {
            return Err(IrlError::InvalidParameter(
                "feature set needs K >= 1".into(),
            ));
        }
        if bits.len() != n_states * n_actions * k {
            return Err(IrlError::Dimension {
                expected: n_states * n_actions * k,
                got: bits.len(),
            });
        }
        if let Some(b) = bits.iter().find(|&&b| b > 1) {
            return Err(IrlError::InvalidParameter(format!(
                "feature value {b} is not binary"
            )));
        }
        let mut set = Self {
            n_states,
            n_actions,
            k,
            bits,
            gauge: Vec::new(),
        };
        set.gauge = set.find_gauge_groups();
        Ok(set)
    }

    fn find_gauge_groups(&self) -> Vec<Vec<usize>> {
        if self.k > MAX_GAUGE_SEARCH {
            return Vec::new();
        }
        let live: u32 = (0..self.k)
            .filter(|&j| self.bits.chunks(self.k).any(|phi| phi[j] == 1))
            .fold(0, |m, j| m | 1 << j);
        let masks: Vec<u32> = self
            .bits
            .chunks(self.k)
            .map(|phi| {
                (0..self.k)
                    .filter(|&j| phi[j] == 1)
                    .fold(0, |m, j| m | 1 << j)
            })
            .collect();
        let mut taken = 0u32;
        let mut groups = Vec::new();
        for subset in 1..(1u32 << self.k) {
            if subset & !live != 0 || subset & taken != 0 {
                continue;
            }
            if masks.iter().all(|m| (m & subset).count_ones() == 1) {
                taken |= subset;
                groups.push((0..self.k).filter(|&j| subset >> j & 1 == 1).collect());
            }
        }
        groups
    }

    /// Groups of features that partition the state-action pairs. Adding the
    /// same constant to every weight of a group shifts each step's reward
    /// by that constant and leaves the trajectory distribution unchanged.
    pub fn gauge_groups(&self) -> &[Vec<usize>] {
        &self.gauge
    }

    /// Representative of `theta` with every gauge group shifted up until
    /// its largest weight is 1. Induces the same trajectory distribution.
    pub fn canonical(&self, theta: &RewardWeights) -> RewardWeights {
        let mut w = theta.0.clone();
        for group in &self.gauge {
            let top = group
                .iter()
                .map(|&j| w[j])
                .fold(f64::NEG_INFINITY, f64::max);
            for &j in group {
                w[j] = (w[j] + 1.0 - top).clamp(0.0, 1.0);
            }
        }
        RewardWeights(w)
    }

    pub fn len(&self) -> usize {
        self.k
    }

    pub fn is_empty(&self) -> bool {
        self.k == 0
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    #[inline]
    pub fn phi(&self, s: usize, a: usize) -> &[u8] {
        let base = (s * self.n_actions + a) * self.k;
        &self.bits[base..base + self.k]
    }

    /// True when every feature is identically zero.
    pub fn is_degenerate(&self) -> bool {
        self.bits.iter().all(|&b| b == 0)
    }

    /// State-major reward table `θᵀφ(s, a)`.
    pub fn reward_table(&self, theta: &RewardWeights) -> Vec<f64> {
        self.bits
            .chunks(self.k)
            .map(|phi| dot_bits(theta.as_slice(), phi))
            .collect()
    }

    pub fn check_against(&self, mdp: &Mdp) -> Result<()> {
        if self.n_states != mdp.n_states() || self.n_actions != mdp.n_actions() {
            return Err(IrlError::Dimension {
                expected: mdp.n_states() * mdp.n_actions(),
                got: self.n_states * self.n_actions,
            });
        }
        Ok(())
    }
}

#[inline]
fn dot_bits(theta: &[f64], phi: &[u8]) -> f64 {
    theta
        .iter()
        .zip(phi)
        .filter(|(_, &b)| b == 1)
        .map(|(t, _)| t)
        .sum()
}

/// Reward weights, each in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights(Vec<f64>);

impl RewardWeights {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(IrlError::EmptyInput("reward weights"));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(IrlError::InvalidParameter(format!(
                "weight {v} outside [0, 1]"
            )));
        }
        Ok(Self(values))
    }

    pub fn zeros(k: usize) -> Self {
        Self(vec![0.0; k])
    }

    pub fn random(k: usize, rng: &mut impl Rng) -> Self {
        Self((0..k).map(|_| rng.gen::<f64>()).collect())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn max_abs_diff(&self, other: &RewardWeights) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// `R(s, a) = θᵀφ(s, a)`.
pub fn reward_of(theta: &RewardWeights, features: &FeatureSet, s: usize, a: usize) -> f64 {
    dot_bits(theta.as_slice(), features.phi(s, a))
}

/// A fully observed trajectory of `(state, action)` pairs, `t = 1..T`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Trajectory {
    steps: Vec<(usize, usize)>,
}

impl Trajectory {
    pub fn new(steps: Vec<(usize, usize)>) -> Result<Self> {
        if steps.is_empty() {
            return Err(IrlError::InvalidTrajectory(
                "trajectory has no steps".into(),
            ));
        }
        Ok(Self { steps })
    }

    pub fn steps(&self) -> &[(usize, usize)] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn validate(&self, mdp: &Mdp) -> Result<()> {
        for (t, &(s, a)) in self.steps.iter().enumerate() {
            if s >= mdp.n_states() || a >= mdp.n_actions() {
                return Err(IrlError::InvalidTrajectory(format!(
                    "step {} = ({s}, {a}) out of range",
                    t + 1
                )));
            }
        }
        for (t, w) in self.steps.windows(2).enumerate() {
            if mdp.transition_prob(w[0].0, w[0].1, w[1].0) <= 0.0 {
                return Err(IrlError::InvalidTrajectory(format!(
                    "infeasible transition at step {}: {:?} -> {}",
                    t + 1,
                    w[0],
                    w[1].0
                )));
            }
        }
        Ok(())
    }
}

/// `Σ_{t=1..T} γ^t φ(s_t, a_t)` accumulated into `out`.
pub fn accumulate_discounted_features(
    steps: impl IntoIterator<Item = (usize, (usize, usize))>,
    features: &FeatureSet,
    discount: f64,
    weight: f64,
    out: &mut [f64],
) {
    for (t, (s, a)) in steps {
        let w = weight * discount.powi(t as i32);
        for (o, &b) in out.iter_mut().zip(features.phi(s, a)) {
            if b == 1 {
                *o += w;
            }
        }
    }
}

pub fn discounted_feature_sum(traj: &Trajectory, features: &FeatureSet, discount: f64) -> Vec<f64> {
    let mut out = vec![0.0; features.len()];
    accumulate_discounted_features(
        traj.steps()
            .iter()
            .copied()
            .enumerate()
            .map(|(i, sa)| (i + 1, sa)),
        features,
        discount,
        1.0,
        &mut out,
    );
    out
}

/// Average discounted feature counts over a demonstration.
pub fn empirical_feature_expectations(
    demo: &[Trajectory],
    features: &FeatureSet,
    discount: f64,
) -> Result<Vec<f64>> {
    if demo.is_empty() {
        return Err(IrlError::EmptyInput("demonstration"));
    }
    let mut total = vec![0.0; features.len()];
    for traj in demo {
        for (acc, v) in total
            .iter_mut()
            .zip(discounted_feature_sum(traj, features, discount))
        {
            *acc += v;
        }
    }
    let n = demo.len() as f64;
    total.iter_mut().for_each(|v| *v /= n);
    Ok(total)
}

/// Upper bound `γ(1 − γ^T)/(1 − γ)` on any discounted binary feature count.
pub fn feature_bound(discount: f64, horizon: usize) -> f64 {
    discount * (1.0 - discount.powi(horizon as i32)) / (1.0 - discount)
}

/// Exact statistics of the model trajectory distribution at one θ.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelStats {
    pub feature_expectations: Vec<f64>,
    pub log_partition: f64,
    pub entropy: f64,
}

/// Work units charged for one [`model_statistics`] call.
pub fn dp_cost(mdp: &Mdp, horizon: usize) -> u64 {
    (horizon * (2 * mdp.support_size() + mdp.n_states() * mdp.n_actions())) as u64
}

/// Finite-horizon backward/forward pass over the model distribution.
pub fn model_statistics(
    mdp: &Mdp,
    features: &FeatureSet,
    theta: &RewardWeights,
    horizon: usize,
) -> Result<ModelStats> {
    if horizon == 0 {
        return Err(IrlError::InvalidParameter(
            "model horizon must be >= 1".into(),
        ));
    }
    features.check_against(mdp)?;
    if theta.len() != features.len() {
        return Err(IrlError::Dimension {
            expected: features.len(),
            got: theta.len(),
        });
    }
    let n_s = mdp.n_states();
    let n_a = mdp.n_actions();
    let n_sa = n_s * n_a;
    let gamma = mdp.discount();
    let reward = features.reward_table(theta);

    // log_q[t·|S||A| + sa]: log-weight of all suffixes starting with (s, a) at t.
    // cont[..]: log Σ_{s'} T(s'|s,a) exp(W_{t+1}(s')), zero at the horizon.
    // w[t·|S| + s]: log Σ_a exp(log_q).
    let mut log_q = vec![0.0; horizon * n_sa];
    let mut cont = vec![0.0; horizon * n_sa];
    let mut w = vec![0.0; horizon * n_s];
    for t in (0..horizon).rev() {
        let scale = gamma.powi(t as i32 + 1);
        for s in 0..n_s {
            let mut top = f64::NEG_INFINITY;
            for a in 0..n_a {
                let sa = mdp.sa(s, a);
                let c = if t + 1 < horizon {
                    let next = &w[(t + 1) * n_s..(t + 2) * n_s];
                    match mdp.successors(s, a) {
                        [(n, p)] if *p == 1.0 => next[*n],
                        succ => log_sum_exp(succ.iter().map(|&(n, p)| p.ln() + next[n])),
                    }
                } else {
                    0.0
                };
                cont[t * n_sa + sa] = c;
                let q = scale * reward[sa] + c;
                log_q[t * n_sa + sa] = q;
                top = top.max(q);
            }
            let row = &log_q[t * n_sa + s * n_a..t * n_sa + (s + 1) * n_a];
            w[t * n_s + s] = if top.is_finite() {
                top + row.iter().map(|q| (q - top).exp()).sum::<f64>().ln()
            } else {
                top
            };
        }
    }
    let log_partition = log_sum_exp(
        mdp.start()
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > 0.0)
            .map(|(s, &p)| p.ln() + w[s]),
    );

    let mut occupancy: Vec<f64> = mdp
        .start()
        .iter()
        .enumerate()
        .map(|(s, &p)| {
            if p > 0.0 {
                (p.ln() + w[s] - log_partition).exp()
            } else {
                0.0
            }
        })
        .collect();
    let mut expected = vec![0.0; features.len()];
    let mut expected_reward = 0.0;
    let mut base_measure: f64 = occupancy
        .iter()
        .zip(mdp.start())
        .filter(|(&d, _)| d > 0.0)
        .map(|(&d, &p)| d * p.ln())
        .sum();
    let mut next = vec![0.0; n_s];
    for t in 0..horizon {
        let scale = gamma.powi(t as i32 + 1);
        next.iter_mut().for_each(|v| *v = 0.0);
        for s in 0..n_s {
            let d = occupancy[s];
            if d == 0.0 {
                continue;
            }
            let ws = w[t * n_s + s];
            for a in 0..n_a {
                let sa = mdp.sa(s, a);
                let mass = d * (log_q[t * n_sa + sa] - ws).exp();
                if mass == 0.0 {
                    continue;
                }
                expected_reward += mass * scale * reward[sa];
                for (e, &b) in expected.iter_mut().zip(features.phi(s, a)) {
                    if b == 1 {
                        *e += mass * scale;
                    }
                }
                if t + 1 < horizon {
                    match mdp.successors(s, a) {
                        [(n, p)] if *p == 1.0 => next[*n] += mass,
                        succ => {
                            let c = cont[t * n_sa + sa];
                            for &(n, p) in succ {
                                let pn = (p.ln() + w[(t + 1) * n_s + n] - c).exp();
                                next[n] += mass * pn;
                                base_measure += mass * pn * p.ln();
                            }
                        }
                    }
                }
            }
        }
        std::mem::swap(&mut occupancy, &mut next);
    }
    let entropy = log_partition - expected_reward - base_measure;
    Ok(ModelStats {
        feature_expectations: expected,
        log_partition,
        entropy,
    })
}

/// `E_𝕏[φ]` under the model distribution over `𝕏^T`.
pub fn model_feature_expectations(
    mdp: &Mdp,
    features: &FeatureSet,
    theta: &RewardWeights,
    horizon: usize,
) -> Result<Vec<f64>> {
    Ok(model_statistics(mdp, features, theta, horizon)?.feature_expectations)
}

pub fn log_partition(
    mdp: &Mdp,
    features: &FeatureSet,
    theta: &RewardWeights,
    horizon: usize,
) -> Result<f64> {
    Ok(model_statistics(mdp, features, theta, horizon)?.log_partition)
}

/// Unnormalized log-weight `log p0(s_1) + Σ γ^t θᵀφ_t + Σ log T`, or −∞ for
/// an infeasible trajectory.
pub fn trajectory_log_weight(
    traj: &Trajectory,
    theta: &RewardWeights,
    mdp: &Mdp,
    features: &FeatureSet,
) -> f64 {
    let steps = traj.steps();
    let mut lw = mdp.start()[steps[0].0].ln();
    for (i, &(s, a)) in steps.iter().enumerate() {
        lw += mdp.discount().powi(i as i32 + 1) * reward_of(theta, features, s, a);
        if let Some(&(next, _)) = steps.get(i + 1) {
            lw += mdp.transition_prob(s, a, next).ln();
        }
    }
    if lw.is_nan() {
        f64::NEG_INFINITY
    } else {
        lw
    }
}

/// `log Pr(X; θ)` with the normalizer over trajectories of the same length.
pub fn trajectory_log_prob(
    traj: &Trajectory,
    theta: &RewardWeights,
    mdp: &Mdp,
    features: &FeatureSet,
) -> Result<f64> {
    let lw = trajectory_log_weight(traj, theta, mdp, features);
    if lw == f64::NEG_INFINITY {
        return Ok(f64::NEG_INFINITY);
    }
    Ok(lw - log_partition(mdp, features, theta, traj.len())?)
}

/// Every trajectory of length `horizon` with positive probability. Only
/// sensible for small models; the count grows as `(|S||A|)^T`.
pub fn enumerate_trajectories(mdp: &Mdp, horizon: usize) -> Vec<Trajectory> {
    let mut out = Vec::new();
    let mut prefix = Vec::with_capacity(horizon);
    fn extend(
        mdp: &Mdp,
        horizon: usize,
        prefix: &mut Vec<(usize, usize)>,
        out: &mut Vec<Trajectory>,
    ) {
        if prefix.len() == horizon {
            out.push(Trajectory {
                steps: prefix.clone(),
            });
            return;
        }
        let candidates: Vec<usize> = match prefix.last() {
            None => (0..mdp.n_states())
                .filter(|&s| mdp.start()[s] > 0.0)
                .collect(),
            Some(&(s, a)) => mdp.successors(s, a).iter().map(|&(n, _)| n).collect(),
        };
        for s in candidates {
            for a in 0..mdp.n_actions() {
                prefix.push((s, a));
                extend(mdp, horizon, prefix, out);
                prefix.pop();
            }
        }
    }
    if horizon > 0 {
        extend(mdp, horizon, &mut prefix, &mut out);
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    /// Initial exponentiated-gradient step size.
    pub learning_rate: f64,
    pub max_iterations: usize,
    /// Stop when the projected-gradient residual falls below this.
    pub tolerance: f64,
    /// Model trajectory length; `None` uses the longest demonstrated length.
    pub horizon: Option<usize>,
    pub restarts: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            max_iterations: 5_000,
            tolerance: 1e-6,
            horizon: None,
            restarts: 1,
        }
    }
}

impl SolverConfig {
    fn check(&self) -> Result<()> {
        if !(self.learning_rate > 0.0)
            || !(self.tolerance > 0.0)
            || self.max_iterations == 0
            || self.restarts == 0
        {
            return Err(IrlError::InvalidParameter(format!(
                "solver config must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn horizon_or(&self, fallback: usize) -> usize {
        self.horizon.unwrap_or(fallback).max(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    Converged,
    /// Step size collapsed without meeting the tolerance.
    Stalled,
    /// Every feature is identically zero; θ was returned unchanged.
    Degenerate,
    DeadlineExpired,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaxEntSolution {
    pub theta: RewardWeights,
    pub achieved: Vec<f64>,
    pub iterations: usize,
    /// Projected-gradient residual at `theta`.
    pub residual: f64,
    /// Dual objective `log Z(θ) − θᵀφ̂` at `theta`.
    pub dual: f64,
    pub log_partition: f64,
    pub entropy: f64,
    pub status: SolveStatus,
}

/// Dual objective and its gradient `E_𝕏[φ] − φ̂`.
pub fn dual_objective(
    mdp: &Mdp,
    features: &FeatureSet,
    theta: &RewardWeights,
    target: &[f64],
    horizon: usize,
) -> Result<(f64, Vec<f64>, ModelStats)> {
    let stats = model_statistics(mdp, features, theta, horizon)?;
    let linear: f64 = theta
        .as_slice()
        .iter()
        .zip(target)
        .map(|(t, f)| t * f)
        .sum();
    let grad = stats
        .feature_expectations
        .iter()
        .zip(target)
        .map(|(e, f)| e - f)
        .collect();
    Ok((stats.log_partition - linear, grad, stats))
}

/// `max_k |θ_k − clamp(θ_k − g_k, 0, 1)|`; zero exactly at box-constrained
/// stationary points.
pub fn projected_residual(theta: &[f64], grad: &[f64]) -> f64 {
    theta
        .iter()
        .zip(grad)
        .map(|(t, g)| (t - (t - g).clamp(0.0, 1.0)).abs())
        .fold(0.0, f64::max)
}

fn eg_step(theta: &[f64], grad: &[f64], eta: f64) -> RewardWeights {
    RewardWeights(
        theta
            .iter()
            .zip(grad)
            .map(|(&t, &g)| {
                (if g < 0.0 {
                    t.max(ZERO_FLOOR.min(-eta * g))
                } else {
                    t
                } * (-eta * g).exp())
                .clamp(0.0, 1.0)
            })
            .collect(),
    )
}

// Multiplicative updates cannot leave an exact zero without a floor. The
// floor scales with the step so that small steps stay small.
const ZERO_FLOOR: f64 = 1e-1;
const MAX_STEP: f64 = 64.0;
const MIN_STEP: f64 = 1e-12;

/// Exponentiated-gradient descent on the dual from `init`.
///
/// Steps grow by 1.5× after an accepted step and halve on any increase of
/// the dual, so every accepted iterate has a dual value no larger than the
/// starting point. The returned iterate is the one with the smallest
/// projected-gradient residual.
pub fn maxent_solve(
    mdp: &Mdp,
    features: &FeatureSet,
    target: &[f64],
    cfg: &SolverConfig,
    init: &RewardWeights,
    budget: &Budget,
) -> Result<MaxEntSolution> {
    cfg.check()?;
    if target.len() != features.len() || init.len() != features.len() {
        return Err(IrlError::Dimension {
            expected: features.len(),
            got: target.len().min(init.len()),
        });
    }
    let horizon = cfg.horizon_or(1);
    let bound = feature_bound(mdp.discount(), horizon);
    if let Some(v) = target
        .iter()
        .find(|&&v| !(-1e-12..=bound + 1e-9).contains(&v))
    {
        return Err(IrlError::InvalidParameter(format!(
            "target feature expectation {v} outside [0, {bound}]"
        )));
    }
    let cost = dp_cost(mdp, horizon);

    // Small weights move slowly under multiplicative updates, so start from
    // the representative with the largest weights.
    let mut theta = features.canonical(init);
    let (mut dual, mut grad, mut stats) = dual_objective(mdp, features, &theta, target, horizon)?;
    budget.charge(cost);
    let solution =
        |theta: &RewardWeights, grad: &[f64], dual: f64, stats: &ModelStats, iterations, status| {
            MaxEntSolution {
                theta: theta.clone(),
                achieved: stats.feature_expectations.clone(),
                iterations,
                residual: projected_residual(theta.as_slice(), grad),
                dual,
                log_partition: stats.log_partition,
                entropy: stats.entropy,
                status,
            }
        };
    if features.is_degenerate() {
        log::warn!("all features are identically zero; returning initial weights");
        return Ok(solution(
            &theta,
            &grad,
            dual,
            &stats,
            0,
            SolveStatus::Degenerate,
        ));
    }

    let mut best = solution(&theta, &grad, dual, &stats, 0, SolveStatus::Converged);
    let mut eta = cfg.learning_rate;
    for iteration in 1..=cfg.max_iterations {
        if best.residual <= cfg.tolerance {
            best.iterations = iteration - 1;
            return Ok(best);
        }
        if budget.expired() {
            best.iterations = iteration - 1;
            best.status = SolveStatus::DeadlineExpired;
            return Ok(best);
        }
        let candidate = eg_step(theta.as_slice(), &grad, eta);
        let (c_dual, c_grad, c_stats) = dual_objective(mdp, features, &candidate, target, horizon)?;
        budget.charge(cost);
        if c_dual <= dual + 1e-13 * dual.abs().max(1.0) {
            theta = candidate;
            dual = c_dual;
            grad = c_grad;
            stats = c_stats;
            eta = (eta * 1.5).min(MAX_STEP);
            let r = projected_residual(theta.as_slice(), &grad);
            if r < best.residual {
                best = solution(
                    &theta,
                    &grad,
                    dual,
                    &stats,
                    iteration,
                    SolveStatus::Converged,
                );
            }
        } else {
            eta *= 0.5;
            if eta < MIN_STEP {
                best.iterations = iteration;
                best.status = SolveStatus::Stalled;
                return Ok(best);
            }
        }
    }
    best.iterations = cfg.max_iterations;
    if best.residual <= cfg.tolerance {
        return Ok(best);
    }
    Err(IrlError::NotConverged {
        residual: best.residual,
        best: Box::new(best),
    })
}

/// Runs `cfg.restarts` solves from random initial weights in parallel and
/// keeps the lowest dual value (ties to the earliest restart).
pub fn maxent_solve_seeded(
    mdp: &Mdp,
    features: &FeatureSet,
    target: &[f64],
    cfg: &SolverConfig,
    seed: u64,
) -> Result<MaxEntSolution> {
    use rand::SeedableRng;
    let results: Vec<Result<MaxEntSolution>> = (0..cfg.restarts as u64)
        .into_par_iter()
        .map(|r| {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed.wrapping_add(r));
            let init = RewardWeights::random(features.len(), &mut rng);
            maxent_solve(mdp, features, target, cfg, &init, &Budget::unlimited())
        })
        .collect();
    let mut best: Option<MaxEntSolution> = None;
    let mut first_err = None;
    for r in results {
        match r {
            Ok(sol) => {
                if best.as_ref().is_none_or(|b| sol.dual < b.dual) {
                    best = Some(sol);
                }
            }
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    match (best, first_err) {
        (Some(b), _) => Ok(b),
        (None, Some(e)) => Err(e),
        (None, None) => Err(IrlError::EmptyInput("restarts")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::tests::chain;

    fn two_action_single_state() -> (Mdp, FeatureSet) {
        let mdp = Mdp::new(1, 2, vec![vec![(0, 1.0)], vec![(0, 1.0)]], 0.9, vec![1.0]).unwrap();
        let f = FeatureSet::from_fn(1, 2, 1, |_, a, _| a == 0).unwrap();
        (mdp, f)
    }

    #[test]
    fn reward_of_patrol_weights() {
        let f = FeatureSet::from_bits(2, 1, 6, vec![1, 0, 0, 0, 1, 0, 0, 0, 0, 0, 1, 0]).unwrap();
        let theta = RewardWeights::new(vec![0.57, 0.0, 0.0, 0.0, 0.43, 0.0]).unwrap();
        assert!((reward_of(&theta, &f, 0, 0) - 1.0).abs() < 1e-12);
        assert!((reward_of(&theta, &f, 1, 0) - 0.43).abs() < 1e-12);
        assert_eq!(reward_of(&RewardWeights::zeros(6), &f, 0, 0), 0.0);
    }

    #[test]
    fn weights_reject_out_of_box() {
        assert!(RewardWeights::new(vec![0.5, 1.2]).is_err());
        assert!(RewardWeights::new(vec![-0.1]).is_err());
        assert!(FeatureSet::from_bits(1, 1, 1, vec![2]).is_err());
    }

    #[test]
    fn empirical_expectations() {
        let f = FeatureSet::from_fn(2, 2, 1, |_, _, _| true).unwrap();
        let one = Trajectory::new(vec![(0, 0)]).unwrap();
        assert!((empirical_feature_expectations(&[one], &f, 0.9).unwrap()[0] - 0.9).abs() < 1e-12);
        let three = Trajectory::new(vec![(0, 0), (0, 0), (0, 0)]).unwrap();
        assert!(
            (empirical_feature_expectations(&[three], &f, 0.5).unwrap()[0] - 0.875).abs() < 1e-12
        );
        // per-trajectory sums 0.9 and 0.3
        let g = FeatureSet::from_fn(2, 2, 1, |s, _, _| s == 0).unwrap();
        let a = Trajectory::new(vec![(0, 0)]).unwrap();
        let b = Trajectory::new(vec![(1, 0), (1, 0)]).unwrap();
        let mut fsum = discounted_feature_sum(&b, &g, 0.9);
        assert_eq!(fsum[0], 0.0);
        let c = Trajectory::new(vec![(1, 0), (0, 0)]).unwrap();
        fsum = discounted_feature_sum(&c, &g, 0.9);
        assert!((fsum[0] - 0.81).abs() < 1e-12);
        let avg = empirical_feature_expectations(&[a, c], &g, 0.9).unwrap();
        assert!((avg[0] - 0.855).abs() < 1e-12);
        assert!(matches!(
            empirical_feature_expectations(&[], &g, 0.9),
            Err(IrlError::EmptyInput(_))
        ));
    }

    #[test]
    fn uniform_model_expectation() {
        let (mdp, f) = two_action_single_state();
        let e = model_feature_expectations(&mdp, &f, &RewardWeights::zeros(1), 1).unwrap();
        assert!((e[0] - 0.45).abs() < 1e-12);
    }

    #[test]
    fn degenerate_single_trajectory_has_log_prob_zero() {
        let mdp = Mdp::new(1, 1, vec![vec![(0, 1.0)]], 0.9, vec![1.0]).unwrap();
        let f = FeatureSet::from_fn(1, 1, 1, |_, _, _| true).unwrap();
        let x = Trajectory::new(vec![(0, 0), (0, 0), (0, 0)]).unwrap();
        let theta = RewardWeights::new(vec![0.7]).unwrap();
        assert!(trajectory_log_prob(&x, &theta, &mdp, &f).unwrap().abs() < 1e-12);
    }

    #[test]
    fn infeasible_trajectory_is_negative_infinity() {
        let mdp = chain(0.9);
        let f = FeatureSet::from_fn(2, 2, 1, |s, _, _| s == 1).unwrap();
        let x = Trajectory::new(vec![(1, 0), (0, 0)]).unwrap();
        let lp = trajectory_log_prob(&x, &RewardWeights::zeros(1), &mdp, &f).unwrap();
        assert_eq!(lp, f64::NEG_INFINITY);
        assert!(x.validate(&mdp).is_err());
    }

    #[test]
    fn eg_increases_underfit_weight() {
        let (mdp, f) = two_action_single_state();
        let cfg = SolverConfig {
            horizon: Some(2),
            max_iterations: 1,
            ..SolverConfig::default()
        };
        let target = [0.9 + 0.81];
        let mut theta = RewardWeights::new(vec![0.2]).unwrap();
        for _ in 0..5 {
            let next = match maxent_solve(&mdp, &f, &target, &cfg, &theta, &Budget::unlimited()) {
                Ok(s) => s.theta,
                Err(IrlError::NotConverged { best, .. }) => best.theta,
                Err(e) => panic!("{e}"),
            };
            assert!(next.as_slice()[0] > theta.as_slice()[0] || next.as_slice()[0] == 1.0);
            theta = next;
        }
    }

    #[test]
    fn degenerate_features_return_initial_weights() {
        let mdp = chain(0.9);
        let f = FeatureSet::from_fn(2, 2, 2, |_, _, _| false).unwrap();
        let init = RewardWeights::new(vec![0.3, 0.6]).unwrap();
        let cfg = SolverConfig {
            horizon: Some(3),
            ..SolverConfig::default()
        };
        let sol = maxent_solve(&mdp, &f, &[0.0, 0.0], &cfg, &init, &Budget::unlimited()).unwrap();
        assert_eq!(sol.status, SolveStatus::Degenerate);
        assert_eq!(sol.theta, init);
    }

    #[test]
    fn fixed_point_target_converges() {
        let mdp = chain(0.9).with_start(vec![0.5, 0.5]).unwrap();
        let f =
            FeatureSet::from_fn(2, 2, 2, |s, a, k| if k == 0 { a == 1 } else { s == 1 }).unwrap();
        let theta0 = RewardWeights::new(vec![0.7, 0.3]).unwrap();
        let target = model_feature_expectations(&mdp, &f, &theta0, 3).unwrap();
        let cfg = SolverConfig {
            horizon: Some(3),
            tolerance: 1e-7,
            ..SolverConfig::default()
        };
        let sol = maxent_solve_seeded(&mdp, &f, &target, &cfg, 7).unwrap();
        assert!(sol.residual <= 1e-7);
        for (a, b) in sol.achieved.iter().zip(&target) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn deadline_returns_flagged_best() {
        let mdp = chain(0.9).with_start(vec![0.5, 0.5]).unwrap();
        let f = FeatureSet::from_fn(2, 2, 1, |_, a, _| a == 1).unwrap();
        let cfg = SolverConfig {
            horizon: Some(3),
            ..SolverConfig::default()
        };
        let budget = Budget::work(1);
        let sol = maxent_solve(
            &mdp,
            &f,
            &[1.5],
            &cfg,
            &RewardWeights::new(vec![0.5]).unwrap(),
            &budget,
        )
        .unwrap();
        assert_eq!(sol.status, SolveStatus::DeadlineExpired);
    }

    #[test]
    fn enumeration_count() {
        let mdp = chain(0.9).with_start(vec![0.5, 0.5]).unwrap();
        // each step: 2 actions, successors deterministic
        assert_eq!(enumerate_trajectories(&mdp, 3).len(), 2 * 8);
    }
}
