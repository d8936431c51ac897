//! End-to-end penetration runs: observe both guards, learn, predict, plan
//! and execute against the true patrols.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::planner::{plan_penetration, shortest_path, Danger, PlanDecision};
use super::{Cell, PatrolDomain};
use crate::budget::Deadline;
use crate::error::{IrlError, Result};
use crate::latent::{em_solve, EmConfig, EmStatus, ObservedTrajectory, OcclusionModel};
use crate::maxent::{RewardWeights, Trajectory};
use crate::mdp::{evaluate_policy, ile, lba, Policy};
use crate::session::{
    run_i2rl, I2rlConfig, LlNormalization, Problem, SessionConfig, StopCriterion,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Batch,
    Incremental,
    IncrementalRandomWeights,
    RandomBaseline,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::Batch,
        Method::Incremental,
        Method::IncrementalRandomWeights,
        Method::RandomBaseline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Batch => "batch",
            Method::Incremental => "incremental",
            Method::IncrementalRandomWeights => "incremental_random_weights",
            Method::RandomBaseline => "random_baseline",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = IrlError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| IrlError::Config(format!("unknown method '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub method: Method,
    /// Percentage of route cells visible from the vantage point.
    pub observability: f64,
    /// State-action pairs demonstrated per guard.
    pub demo_pairs: usize,
    /// Limit per learning call: the whole batch solve, or one session.
    pub deadline: Deadline,
    pub em: EmConfig,
    /// Ticks the learner has to reach the goal once it starts planning.
    pub run_ticks: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            method: Method::Incremental,
            observability: 70.0,
            demo_pairs: 16,
            deadline: Deadline::None,
            em: EmConfig::default(),
            run_ticks: 120,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunResult {
    pub success: bool,
    pub detected: bool,
    /// Some learning call hit its deadline.
    pub timeout: bool,
    /// Learning time summed over both guards.
    pub duration: Duration,
    pub work_units: u64,
    pub lba: Option<f64>,
    pub ile: Option<f64>,
    pub sessions: usize,
    /// Per-trajectory observed log-likelihood, averaged over guards.
    pub final_ll: Option<f64>,
}

/// Outcome of learning one guard's weights.
#[derive(Debug, Clone)]
pub struct Learned {
    pub theta: RewardWeights,
    pub duration: Duration,
    pub work_units: u64,
    pub timeout: bool,
    pub sessions: usize,
    pub final_ll: f64,
}

fn trajectories_for(domain: &PatrolDomain, demo_pairs: usize) -> usize {
    (demo_pairs / domain.trajectory_length).max(1)
}

/// Learns one guard's weights with the given method.
pub fn learn(
    domain: &PatrolDomain,
    demo: &[ObservedTrajectory],
    occlusion: &OcclusionModel,
    method: Method,
    cfg: &RunConfig,
    seed: u64,
) -> Result<Learned> {
    let problem = Problem {
        mdp: &domain.mdp,
        features: &domain.features,
        occlusion,
    };
    let em = EmConfig {
        seed,
        ..cfg.em.clone()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let theta0 = RewardWeights::random(domain.features.len(), &mut rng);
    let learned = match method {
        Method::Batch => {
            let budget = cfg.deadline.start();
            let started = Instant::now();
            let res = em_solve(
                &domain.mdp,
                demo,
                Some(&theta0),
                &domain.features,
                occlusion,
                &em,
                &budget,
            )?;
            Learned {
                theta: res.theta,
                duration: started.elapsed(),
                work_units: budget.work_used(),
                timeout: res.status == EmStatus::DeadlineExpired,
                sessions: 1,
                final_ll: f64::NAN,
            }
        }
        Method::Incremental | Method::IncrementalRandomWeights => {
            let i2rl = I2rlConfig {
                session: SessionConfig {
                    em: EmConfig {
                        restarts: 1,
                        ..em.clone()
                    },
                    warm_start: method == Method::Incremental,
                    ll_normalization: LlNormalization::PerTrajectory,
                    deadline: cfg.deadline,
                },
                criterion: StopCriterion::None,
                max_sessions: None,
                track_ll: false,
            };
            let run = run_i2rl(
                &problem,
                demo.iter().map(|y| vec![y.clone()]),
                theta0,
                &i2rl,
                None,
            )?;
            Learned {
                theta: run.statistic.last_theta.clone(),
                duration: run.total_duration(),
                work_units: run.total_work(),
                timeout: run.final_timeout(),
                sessions: run.history.len(),
                final_ll: f64::NAN,
            }
        }
        Method::RandomBaseline => {
            return Err(IrlError::InvalidParameter(
                "random baseline does not learn".into(),
            ))
        }
    };
    let final_ll =
        problem.log_likelihood(demo, &learned.theta, &em, LlNormalization::PerTrajectory)?;
    Ok(Learned {
        final_ll,
        ..learned
    })
}

/// True guard states over `ticks` ticks from `start`.
fn patrol(domain: &PatrolDomain, start: usize, ticks: usize) -> Vec<usize> {
    domain
        .rollout(&domain.expert_policy, start, ticks)
        .into_iter()
        .map(|(s, _)| s)
        .collect()
}

fn views_at(domain: &PatrolDomain, states: &[usize]) -> HashSet<Cell> {
    states.iter().flat_map(|&s| domain.view(s)).collect()
}

/// Learner cell at tick `t` of a plan, staying at the last cell afterwards.
fn plan_cell(path: &[Cell], t: usize) -> Cell {
    path[t.min(path.len() - 1)]
}

/// Walks `path` from tick `t0` against the true patrols. Returns
/// `(reached, detected)`.
fn execute(domain: &PatrolDomain, truth: &[Vec<usize>], path: &[Cell], t0: usize) -> (bool, bool) {
    let goal = domain.map.goal();
    for k in 0..path.len() {
        let t = t0 + k;
        let states: Vec<usize> = truth.iter().map(|g| g[t]).collect();
        let cell = plan_cell(path, k);
        if views_at(domain, &states).contains(&cell) {
            return (false, true);
        }
        if cell == goal {
            return (true, false);
        }
    }
    (false, false)
}

/// One complete run of `cfg.method` with its own random stream.
pub fn simulate_run(domain: &PatrolDomain, cfg: &RunConfig, seed: u64) -> Result<RunResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_states = domain.n_states();
    let t_len = domain.trajectory_length;
    let n_traj = trajectories_for(domain, cfg.demo_pairs);
    let observe = n_traj * t_len;
    let watch = n_states;
    let t0 = observe + watch;
    let total = t0 + cfg.run_ticks + 1;

    // two guards with opposed headings at random phases
    let first = rng.gen_range(0..n_states);
    let second = {
        let s = rng.gen_range(0..n_states / 2);
        let opposite = usize::from(domain.state(first).ascending);
        2 * s + opposite
    };
    let truth: Vec<Vec<usize>> = [first, second]
        .iter()
        .map(|&s| patrol(domain, s, total))
        .collect();
    let occlusion = domain.occlusion(cfg.observability);
    let learn_seed = rng.gen::<u64>();
    let baseline_offset = rng.gen_range(0..n_states);

    if cfg.method == Method::RandomBaseline {
        let path = shortest_path(&domain.map, domain.map.start(), domain.map.goal())
            .ok_or_else(|| IrlError::InvalidMap("goal unreachable from start".into()))?;
        let mut full = vec![domain.map.start(); baseline_offset];
        full.extend(path);
        let (success, detected) = execute(domain, &truth, &full, t0);
        return Ok(RunResult {
            success,
            detected,
            timeout: false,
            duration: Duration::ZERO,
            work_units: 0,
            lba: None,
            ile: None,
            sessions: 0,
            final_ll: None,
        });
    }

    let true_reward = domain.features.reward_table(&domain.true_weights);
    let mut policies: Vec<Policy> = Vec::new();
    let mut learned_all = Vec::new();
    for (g, states) in truth.iter().enumerate() {
        let steps: Vec<(usize, usize)> = (0..observe)
            .map(|t| {
                (
                    states[t],
                    domain
                        .expert_policy
                        .as_deterministic()
                        .expect("deterministic")[states[t]],
                )
            })
            .collect();
        let demo: Vec<ObservedTrajectory> = steps
            .chunks(t_len)
            .map(|w| {
                Ok(ObservedTrajectory::from_trajectory(
                    &Trajectory::new(w.to_vec())?,
                    &occlusion,
                ))
            })
            .collect::<Result<_>>()?;
        let learned = learn(
            domain,
            &demo,
            &occlusion,
            cfg.method,
            cfg,
            learn_seed.wrapping_add(1000 * g as u64),
        )?;
        policies.push(domain.policy_for(&learned.theta)?);
        learned_all.push(learned);
    }

    let mut lba_sum = 0.0;
    let mut ile_sum = 0.0;
    for p in &policies {
        lba_sum += lba(&domain.expert_policy, p)?;
        let v = evaluate_policy(&domain.mdp, &true_reward, p, &super::solver_options())?;
        ile_sum += ile(&domain.expert_values, &v)?;
    }
    let guards = policies.len() as f64;

    // predict each guard from its last sighting before t0
    let mut danger: Danger = vec![HashSet::new(); cfg.run_ticks + 1];
    let mut blind = false;
    for (states, policy) in truth.iter().zip(&policies) {
        let sighting = (0..t0).rev().find(|&t| !occlusion.is_occluded(states[t]));
        let Some(t_seen) = sighting else {
            blind = true;
            continue;
        };
        let predicted = domain.rollout(policy, states[t_seen], t0 + cfg.run_ticks + 1 - t_seen);
        for (k, d) in danger.iter_mut().enumerate() {
            d.extend(domain.view(predicted[t0 - t_seen + k].0));
        }
    }
    let decision = if blind {
        PlanDecision::Hold
    } else {
        plan_penetration(&domain.map, domain.map.start(), &danger)
    };
    let (success, detected) = match &decision {
        PlanDecision::Go(path) => execute(domain, &truth, path, t0),
        PlanDecision::Hold => (false, false),
    };

    Ok(RunResult {
        success,
        detected,
        timeout: learned_all.iter().any(|l| l.timeout),
        duration: learned_all.iter().map(|l| l.duration).sum(),
        work_units: learned_all.iter().map(|l| l.work_units).sum(),
        lba: Some(lba_sum / guards),
        ile: Some(ile_sum / guards),
        sessions: learned_all.iter().map(|l| l.sessions).max().unwrap_or(0),
        final_ll: Some(learned_all.iter().map(|l| l.final_ll).sum::<f64>() / guards),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub runs: usize,
    pub success_rate: f64,
    pub timeout_rate: f64,
    pub detected_rate: f64,
    pub mean_lba: Option<f64>,
    pub mean_ile: Option<f64>,
    pub mean_duration_s: f64,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Percentages over all runs; a timed-out run that still arrived
/// undetected counts as a success.
pub fn aggregate(results: &[RunResult]) -> Result<Summary> {
    if results.is_empty() {
        return Err(IrlError::EmptyInput("run results"));
    }
    let n = results.len() as f64;
    let pct =
        |f: &dyn Fn(&RunResult) -> bool| 100.0 * results.iter().filter(|r| f(r)).count() as f64 / n;
    Ok(Summary {
        runs: results.len(),
        success_rate: pct(&|r| r.success),
        timeout_rate: pct(&|r| r.timeout),
        detected_rate: pct(&|r| r.detected),
        mean_lba: mean(results.iter().filter_map(|r| r.lba)),
        mean_ile: mean(results.iter().filter_map(|r| r.ile)),
        mean_duration_s: results
            .iter()
            .map(|r| r.duration.as_secs_f64())
            .sum::<f64>()
            / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patrol::PatrolConfig;

    fn result(success: bool, timeout: bool) -> RunResult {
        RunResult {
            success,
            detected: !success,
            timeout,
            duration: Duration::from_millis(10),
            work_units: 0,
            lba: Some(50.0),
            ile: None,
            sessions: 1,
            final_ll: None,
        }
    }

    #[test]
    fn aggregate_rates() {
        let mut rs: Vec<RunResult> = (0..13).map(|_| result(true, false)).collect();
        rs.extend((0..7).map(|_| result(false, false)));
        let s = aggregate(&rs).unwrap();
        assert!((s.success_rate - 65.0).abs() < 1e-12);
        assert!(aggregate(&[]).is_err());
        let lucky = aggregate(&[result(true, true)]).unwrap();
        assert_eq!(lucky.success_rate, 100.0);
        assert_eq!(lucky.timeout_rate, 100.0);
    }

    #[test]
    fn detection_range_is_three_cells_ahead() {
        let d = PatrolDomain::new(&PatrolConfig::default()).unwrap();
        // guard at route index 5 heading up the route, cell (1, 6), facing (0, 1)
        let s = 2 * 5;
        let view = d.view(s);
        assert!(view.contains(&(1, 8)));
        assert!(!view.contains(&(1, 10)));
        assert!(!view.contains(&(1, 5)));
    }

    #[test]
    fn known_phases_always_succeed() {
        // learning replaced by the true policy: predictions are exact
        let d = PatrolDomain::new(&PatrolConfig::default()).unwrap();
        let n = d.n_states();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let first = rng.gen_range(0..n);
            let second = 2 * rng.gen_range(0..n / 2) + usize::from(d.state(first).ascending);
            let truth: Vec<Vec<usize>> = [first, second]
                .iter()
                .map(|&s| patrol(&d, s, 200))
                .collect();
            let danger: Danger = (0..150)
                .map(|t| views_at(&d, &[truth[0][t], truth[1][t]]))
                .collect();
            let PlanDecision::Go(path) = plan_penetration(&d.map, d.map.start(), &danger) else {
                panic!("no plan");
            };
            assert_eq!(execute(&d, &truth, &path, 0), (true, false));
        }
    }
}
