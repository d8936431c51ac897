//! Perimeter-patrol domain: two guards patrol a hallway while a learner
//! watches from a vantage point, learns each guard's reward, and then tries
//! to reach its goal cell without entering a guard's view.

pub mod map;
pub mod planner;
pub mod sim;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{IrlError, Result};
use crate::latent::{ObservedTrajectory, OcclusionModel};
use crate::maxent::{FeatureSet, RewardWeights, Trajectory};
use crate::mdp::{
    evaluate_policy, ile, lba, solve_optimal, Mdp, Policy, SolveOptions, ValueFunction,
};

pub use map::{Cell, GridMap, MapConfig, N_REGIONS};

pub const FORWARD: usize = 0;
pub const STAY: usize = 1;
pub const TURN: usize = 2;
pub const N_ACTIONS: usize = 3;
pub const N_FEATURES: usize = 1 + N_REGIONS;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatrolConfig {
    pub map: MapConfig,
    pub discount: f64,
    pub trajectory_length: usize,
    pub true_weights: Vec<f64>,
    pub sight_range: usize,
}

impl Default for PatrolConfig {
    fn default() -> Self {
        Self {
            map: MapConfig::default(),
            discount: 0.9,
            trajectory_length: 4,
            true_weights: vec![0.57, 0.0, 0.0, 0.0, 0.43, 0.0],
            sight_range: 3,
        }
    }
}

/// Patroller state: position along the route and heading.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GuardState {
    pub index: usize,
    /// Towards the higher route index.
    pub ascending: bool,
}

#[derive(Debug, Clone)]
pub struct PatrolDomain {
    pub map: GridMap,
    pub mdp: Mdp,
    pub features: FeatureSet,
    pub true_weights: RewardWeights,
    pub trajectory_length: usize,
    pub sight_range: usize,
    /// Optimal policy under the true weights.
    pub expert_policy: Policy,
    /// Its value under the true reward.
    pub expert_values: ValueFunction,
}

pub fn solver_options() -> SolveOptions {
    SolveOptions::with_tol(1e-8)
}

impl PatrolDomain {
    pub fn new(cfg: &PatrolConfig) -> Result<Self> {
        if cfg.trajectory_length == 0 {
            return Err(IrlError::Config("trajectory_length must be >= 1".into()));
        }
        if cfg.true_weights.len() != N_FEATURES {
            return Err(IrlError::Config(format!(
                "true_weights needs {N_FEATURES} entries, got {}",
                cfg.true_weights.len()
            )));
        }
        let map = GridMap::from_config(&cfg.map)?;
        let n = map.route_len();
        let n_states = 2 * n;
        let mut transitions = Vec::with_capacity(n_states * N_ACTIONS);
        for s in 0..n_states {
            for a in 0..N_ACTIONS {
                let next = step_state(n, decode(s), a);
                transitions.push(vec![(encode(next), 1.0)]);
            }
        }
        let mdp = Mdp::new(
            n_states,
            N_ACTIONS,
            transitions,
            cfg.discount,
            vec![1.0 / n_states as f64; n_states],
        )?;
        let features = FeatureSet::from_fn(n_states, N_ACTIONS, N_FEATURES, |s, a, k| {
            patrol_features(&map, s, a)[k] == 1
        })?;
        let true_weights = RewardWeights::new(cfg.true_weights.clone())?;
        let reward = features.reward_table(&true_weights);
        let sol = solve_optimal(&mdp, &reward, &solver_options())?;
        Ok(Self {
            map,
            mdp,
            features,
            true_weights,
            trajectory_length: cfg.trajectory_length,
            sight_range: cfg.sight_range,
            expert_policy: sol.policy,
            expert_values: sol.values,
        })
    }

    pub fn n_states(&self) -> usize {
        self.mdp.n_states()
    }

    pub fn state(&self, s: usize) -> GuardState {
        decode(s)
    }

    pub fn state_index(&self, g: GuardState) -> usize {
        encode(g)
    }

    pub fn cell(&self, s: usize) -> Cell {
        self.map.route()[decode(s).index]
    }

    /// Unit direction the guard faces in state `s`: towards the next route
    /// cell along its heading, or onward past the end of the route.
    pub fn facing(&self, s: usize) -> (isize, isize) {
        let g = decode(s);
        let route = self.map.route();
        let n = route.len();
        let delta = |from: Cell, to: Cell| {
            (
                to.0 as isize - from.0 as isize,
                to.1 as isize - from.1 as isize,
            )
        };
        match (g.ascending, g.index) {
            (true, i) if i + 1 < n => delta(route[i], route[i + 1]),
            (true, i) => delta(route[i - 1], route[i]),
            (false, 0) => delta(route[1], route[0]),
            (false, i) => delta(route[i], route[i - 1]),
        }
    }

    /// Cells a guard in state `s` can see.
    pub fn view(&self, s: usize) -> Vec<Cell> {
        self.map
            .cone(self.cell(s), self.facing(s), self.sight_range)
    }

    pub fn next_state(&self, s: usize, a: usize) -> usize {
        encode(step_state(self.map.route_len(), decode(s), a))
    }

    /// States whose cell is outside the learner's view.
    pub fn occlusion(&self, observability_pct: f64) -> OcclusionModel {
        let visible = self.map.visible_route(observability_pct);
        let hidden = (0..self.n_states()).filter(|&s| !visible.contains(&decode(s).index));
        OcclusionModel::new(self.n_states(), hidden).expect("states in range")
    }

    /// States visited by following a deterministic policy for `steps` steps
    /// from `start`, with the actions taken.
    pub fn rollout(&self, policy: &Policy, start: usize, steps: usize) -> Vec<(usize, usize)> {
        let actions = policy.as_deterministic().expect("deterministic policy");
        let mut out = Vec::with_capacity(steps);
        let mut s = start;
        for _ in 0..steps {
            let a = actions[s];
            out.push((s, a));
            s = self.next_state(s, a);
        }
        out
    }

    /// Consecutive windows of a continuous patrol started at a uniformly
    /// random state, masked by the occlusion model.
    pub fn generate_demonstration(
        &self,
        policy: &Policy,
        n_traj: usize,
        occlusion: &OcclusionModel,
        rng: &mut impl Rng,
    ) -> Result<Vec<ObservedTrajectory>> {
        if n_traj == 0 {
            return Err(IrlError::InvalidParameter("n_traj must be >= 1".into()));
        }
        let start = rng.gen_range(0..self.n_states());
        let t = self.trajectory_length;
        let steps = self.rollout(policy, start, n_traj * t);
        steps
            .chunks(t)
            .map(|w| {
                Ok(ObservedTrajectory::from_trajectory(
                    &Trajectory::new(w.to_vec())?,
                    occlusion,
                ))
            })
            .collect()
    }

    /// Demonstration from a seeded random stream.
    pub fn seeded_demonstration(
        &self,
        n_traj: usize,
        observability_pct: f64,
        seed: u64,
    ) -> Result<Vec<ObservedTrajectory>> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        self.generate_demonstration(
            &self.expert_policy,
            n_traj,
            &self.occlusion(observability_pct),
            &mut rng,
        )
    }

    /// ILE of the optimal policy under learned weights.
    pub fn ile_of(&self, theta: &RewardWeights) -> Result<f64> {
        let reward = self.features.reward_table(&self.true_weights);
        let v = evaluate_policy(
            &self.mdp,
            &reward,
            &self.policy_for(theta)?,
            &solver_options(),
        )?;
        ile(&self.expert_values, &v)
    }

    /// LBA of the optimal policy under learned weights, in percent.
    pub fn lba_of(&self, theta: &RewardWeights) -> Result<f64> {
        lba(&self.expert_policy, &self.policy_for(theta)?)
    }

    /// Optimal deterministic policy for learned weights.
    pub fn policy_for(&self, theta: &RewardWeights) -> Result<Policy> {
        let reward = self.features.reward_table(theta);
        Ok(solve_optimal(&self.mdp, &reward, &solver_options())?.policy)
    }
}

fn encode(g: GuardState) -> usize {
    2 * g.index + usize::from(!g.ascending)
}

fn decode(s: usize) -> GuardState {
    GuardState {
        index: s / 2,
        ascending: s.is_multiple_of(2),
    }
}

/// Deterministic patroller dynamics on a route of `n` cells. Moving past
/// either end is blocked; turning only works on the turn-around cells.
fn step_state(n: usize, g: GuardState, a: usize) -> GuardState {
    match a {
        FORWARD => match (g.ascending, g.index) {
            (true, i) if i + 1 < n => GuardState { index: i + 1, ..g },
            (false, i) if i > 0 => GuardState { index: i - 1, ..g },
            _ => g,
        },
        TURN if g.index == 0 || g.index + 1 == n => GuardState {
            ascending: !g.ascending,
            ..g
        },
        _ => g,
    }
}

/// Six binary features: whether the action changes the guard's cell, then
/// the one-hot region of the current cell.
pub fn patrol_features(map: &GridMap, s: usize, a: usize) -> [u8; N_FEATURES] {
    let g = decode(s);
    let mut phi = [0u8; N_FEATURES];
    phi[0] = u8::from(step_state(map.route_len(), g, a).index != g.index);
    phi[1 + map.region(g.index)] = 1;
    phi
}

#[cfg(test)]
mod tests {
    use super::*;

    fn domain() -> PatrolDomain {
        PatrolDomain::new(&PatrolConfig::default()).unwrap()
    }

    #[test]
    fn forward_in_region_four_sets_movement_and_region_bits() {
        let d = domain();
        // route index 13 lies in the fourth region
        let s = encode(GuardState {
            index: 13,
            ascending: true,
        });
        assert_eq!(patrol_features(&d.map, s, FORWARD), [1, 0, 0, 0, 1, 0]);
        assert_eq!(patrol_features(&d.map, s, STAY)[0], 0);
    }

    #[test]
    fn region_bits_one_hot() {
        let d = domain();
        for s in 0..d.n_states() {
            for a in 0..N_ACTIONS {
                let phi = patrol_features(&d.map, s, a);
                assert_eq!(phi[1..].iter().map(|&b| b as u32).sum::<u32>(), 1);
            }
        }
    }

    #[test]
    fn blocked_forward_does_not_move() {
        let d = domain();
        let end = encode(GuardState {
            index: 19,
            ascending: true,
        });
        assert_eq!(d.next_state(end, FORWARD), end);
        assert_eq!(patrol_features(&d.map, end, FORWARD)[0], 0);
        assert!(!d.state(d.next_state(end, TURN)).ascending);
        let mid = encode(GuardState {
            index: 7,
            ascending: true,
        });
        assert_eq!(d.next_state(mid, TURN), mid);
    }

    #[test]
    fn expert_policy_is_closed_patrol_cycle() {
        let d = domain();
        let n = d.n_states();
        for start in 0..n {
            let path = d.rollout(&d.expert_policy, start, 3 * n);
            let visited: std::collections::HashSet<usize> = path.iter().map(|p| p.0).collect();
            assert_eq!(visited.len(), n, "from {start}");
            // back to the start after one full cycle
            assert_eq!(path[n].0, start);
            assert!(visited.contains(&0) && visited.contains(&(n - 1)));
        }
    }

    #[test]
    fn facing_follows_heading() {
        let d = domain();
        let s = encode(GuardState {
            index: 5,
            ascending: true,
        });
        assert_eq!(d.facing(s), (0, 1));
        let end = encode(GuardState {
            index: 0,
            ascending: false,
        });
        assert_eq!(d.facing(end), (0, -1));
    }

    #[test]
    fn demonstrations_respect_occlusion() {
        use rand::SeedableRng;
        let d = domain();
        let occ = d.occlusion(30.0);
        assert!((occ.observability() - 30.0).abs() < 1e-12);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let demo = d
            .generate_demonstration(&d.expert_policy, 25, &occ, &mut rng)
            .unwrap();
        for y in &demo {
            y.validate(&d.mdp, &occ).unwrap();
        }
        let clear = d
            .generate_demonstration(&d.expert_policy, 5, &d.occlusion(100.0), &mut rng)
            .unwrap();
        assert!(clear.iter().all(|y| y.hidden_count() == 0));
    }
}
