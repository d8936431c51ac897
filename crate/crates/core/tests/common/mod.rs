#![allow(dead_code)]

use rand::Rng;

use i2rl_core::maxent::{FeatureSet, RewardWeights, Trajectory};
use i2rl_core::mdp::Mdp;

/// Two states, two actions. Action 0 stays, action 1 advances to the
/// absorbing state 1. Starts in state 0.
pub fn chain(discount: f64) -> Mdp {
    let transitions = vec![
        vec![(0, 1.0)],
        vec![(1, 1.0)],
        vec![(1, 1.0)],
        vec![(1, 1.0)],
    ];
    Mdp::new(2, 2, transitions, discount, vec![1.0, 0.0]).unwrap()
}

/// Dense random model with every transition and start probability positive.
pub fn random_mdp(rng: &mut impl Rng, n_states: usize, n_actions: usize) -> Mdp {
    let normalized = |rng: &mut dyn rand::RngCore, n: usize| -> Vec<f64> {
        let raw: Vec<f64> = (0..n).map(|_| 0.1 + rng.gen::<f64>()).collect();
        let sum: f64 = raw.iter().sum();
        raw.iter().map(|v| v / sum).collect()
    };
    let mut dense = Vec::with_capacity(n_states * n_actions * n_states);
    for _ in 0..n_states * n_actions {
        dense.extend(normalized(rng, n_states));
    }
    let discount = rng.gen_range(0.5..0.99);
    let start = normalized(rng, n_states);
    Mdp::from_dense(n_states, n_actions, &dense, discount, start).unwrap()
}

pub fn random_features(
    rng: &mut impl Rng,
    n_states: usize,
    n_actions: usize,
    k: usize,
) -> FeatureSet {
    let bits = (0..n_states * n_actions * k)
        .map(|_| u8::from(rng.gen_bool(0.5)))
        .collect();
    FeatureSet::from_bits(n_states, n_actions, k, bits).unwrap()
}

/// Random weights bounded away from the box edges.
pub fn interior_weights(rng: &mut impl Rng, k: usize) -> RewardWeights {
    RewardWeights::new((0..k).map(|_| rng.gen_range(0.1..0.9)).collect()).unwrap()
}

/// Feasible trajectory with uniformly random actions.
pub fn random_trajectory(rng: &mut impl Rng, mdp: &Mdp, len: usize) -> Trajectory {
    let sample = |rng: &mut dyn rand::RngCore, dist: &[(usize, f64)]| {
        let mut u = rng.gen::<f64>();
        for &(s, p) in dist {
            if u < p {
                return s;
            }
            u -= p;
        }
        dist.last().unwrap().0
    };
    let start: Vec<(usize, f64)> = mdp.start().iter().copied().enumerate().collect();
    let mut s = sample(rng, &start);
    let mut steps = Vec::with_capacity(len);
    for _ in 0..len {
        let a = rng.gen_range(0..mdp.n_actions());
        steps.push((s, a));
        s = sample(rng, mdp.successors(s, a));
    }
    Trajectory::new(steps).unwrap()
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}
