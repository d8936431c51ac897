//! Incremental learning sessions.
//!
//! A session consumes a new batch of observed trajectories together with the
//! statistic carried from earlier sessions (trajectory count, merged latent
//! feature expectations, last weights) and produces revised weights. Past
//! raw data is never needed for learning; the driver retains it only to
//! evaluate the log-likelihood used by the stopping rule.

use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::budget::{Budget, Deadline};
use crate::error::{IrlError, Result};
use crate::latent::{
    em_run, prepare_all, EmConfig, EmStatus, LatentContext, ObservedTrajectory, OcclusionModel,
};
use crate::maxent::{FeatureSet, RewardWeights};
use crate::mdp::{solve_optimal, Mdp, SolveOptions};

/// Weighted merge of feature expectations by trajectory counts.
pub fn merge_feature_expectations(
    prev_count: usize,
    prev: Option<&[f64]>,
    cur_count: usize,
    cur: &[f64],
) -> Result<Vec<f64>> {
    if prev_count + cur_count == 0 {
        return Err(IrlError::EmptyInput("both sessions are empty"));
    }
    if cur_count == 0 {
        return Err(IrlError::EmptyInput("current session"));
    }
    let prev = match (prev_count, prev) {
        (0, _) => return Ok(cur.to_vec()),
        (_, Some(p)) => p,
        (_, None) => return Err(IrlError::EmptyInput("previous feature expectations")),
    };
    if prev.len() != cur.len() {
        return Err(IrlError::Dimension {
            expected: prev.len(),
            got: cur.len(),
        });
    }
    let (np, nc) = (prev_count as f64, cur_count as f64);
    Ok(prev
        .iter()
        .zip(cur)
        .map(|(p, c)| (np * p + nc * c) / (np + nc))
        .collect())
}

/// State carried from one session to the next.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SessionStatistic {
    pub count: usize,
    /// `None` exactly when `count == 0`.
    pub merged: Option<Vec<f64>>,
    pub last_theta: RewardWeights,
    pub last_ll: Option<f64>,
    /// Trajectory length the merged expectations refer to.
    pub horizon: Option<usize>,
}

impl SessionStatistic {
    /// Empty statistic holding the initial weights.
    pub fn empty(theta0: RewardWeights) -> Self {
        Self {
            count: 0,
            merged: None,
            last_theta: theta0,
            last_ll: None,
            horizon: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LlNormalization {
    /// Divide by the number of trajectories seen so far.
    #[default]
    PerTrajectory,
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub em: EmConfig,
    /// Start each session's EM from the previous weights; otherwise draw
    /// fresh random weights.
    pub warm_start: bool,
    pub ll_normalization: LlNormalization,
    pub deadline: Deadline,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            em: EmConfig {
                restarts: 1,
                ..EmConfig::default()
            },
            warm_start: true,
            ll_normalization: LlNormalization::PerTrajectory,
            deadline: Deadline::None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SessionRecord {
    pub index: usize,
    pub theta: RewardWeights,
    pub ll: Option<f64>,
    pub ile: Option<f64>,
    /// Learning time, excluding likelihood and ILE evaluation.
    pub duration: Duration,
    pub work_units: u64,
    pub timeout: bool,
    pub em_status: EmStatus,
    pub em_iterations: usize,
    pub m_step_iterations: usize,
    pub trajectories: usize,
}

/// Shared problem definition for sessions.
pub struct Problem<'a> {
    pub mdp: &'a Mdp,
    pub features: &'a FeatureSet,
    pub occlusion: &'a OcclusionModel,
}

impl Problem<'_> {
    /// Observed-data log-likelihood of `ys` at `theta`, normalized per `norm`.
    pub fn log_likelihood(
        &self,
        ys: &[ObservedTrajectory],
        theta: &RewardWeights,
        cfg: &EmConfig,
        norm: LlNormalization,
    ) -> Result<f64> {
        let prepared = prepare_all(ys, self.mdp, self.occlusion, cfg)?;
        let ctx = LatentContext {
            mdp: self.mdp,
            features: self.features,
            occlusion: self.occlusion,
            cfg,
        };
        let total = ctx.log_likelihood(&prepared, theta, &Budget::unlimited())?;
        Ok(match norm {
            LlNormalization::PerTrajectory => total / ys.len() as f64,
            LlNormalization::Sum => total,
        })
    }
}

/// One learning session. `index` starts at 1 and seeds the session's RNG.
/// Deadline expiry is reported through the record's `timeout` flag.
pub fn run_session(
    problem: &Problem,
    batch: &[ObservedTrajectory],
    stat: &SessionStatistic,
    index: usize,
    cfg: &SessionConfig,
) -> Result<(SessionRecord, SessionStatistic)> {
    if batch.is_empty() {
        return Err(IrlError::EmptyInput("session batch"));
    }
    let budget = cfg.deadline.start();
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.em.seed.wrapping_add(index as u64));
    let prepared = prepare_all(batch, problem.mdp, problem.occlusion, &cfg.em)?;
    let batch_len = batch.iter().map(ObservedTrajectory::len).max().unwrap_or(1);
    let horizon = cfg
        .em
        .solver
        .horizon
        .unwrap_or_else(|| stat.horizon.unwrap_or(0).max(batch_len));
    if stat.horizon.is_some_and(|h| h != horizon) {
        return Err(IrlError::InvalidParameter(format!(
            "session horizon {horizon} differs from earlier sessions ({})",
            stat.horizon.unwrap_or(0)
        )));
    }
    let init = if cfg.warm_start {
        stat.last_theta.clone()
    } else {
        RewardWeights::random(problem.features.len(), &mut rng)
    };
    let ctx = LatentContext {
        mdp: problem.mdp,
        features: problem.features,
        occlusion: problem.occlusion,
        cfg: &cfg.em,
    };
    let mut current = Vec::new();
    let result = em_run(
        problem.mdp,
        problem.features,
        horizon,
        &init,
        &cfg.em,
        &budget,
        |theta| {
            current = ctx.feature_expectations(&prepared, theta, &mut rng, &budget)?;
            merge_feature_expectations(stat.count, stat.merged.as_deref(), batch.len(), &current)
        },
        None,
    )?;
    let duration = started.elapsed();
    let merged =
        merge_feature_expectations(stat.count, stat.merged.as_deref(), batch.len(), &current)?;
    let count = stat.count + batch.len();
    let record = SessionRecord {
        index,
        theta: result.theta.clone(),
        ll: None,
        ile: None,
        duration,
        work_units: budget.work_used(),
        timeout: result.status == EmStatus::DeadlineExpired,
        em_status: result.status,
        em_iterations: result.em_iterations,
        m_step_iterations: result.m_step_iterations,
        trajectories: count,
    };
    let next = SessionStatistic {
        count,
        merged: Some(merged),
        last_theta: result.theta,
        last_ll: None,
        horizon: Some(horizon),
    };
    Ok((record, next))
}

/// Stop when the log-likelihood changed by at most `eps`. Never fires
/// without a previous value.
pub fn check_stop_ll(ll: f64, ll_prev: Option<f64>, eps: f64) -> bool {
    ll_prev.is_some_and(|prev| (ll - prev).abs() <= eps)
}

/// Stop when the ILE improvement `ile_prev − ile` is at most `eps`. The
/// difference is signed, so a regression also stops.
pub fn check_stop_ile(ile_prev: Option<f64>, ile: f64, eps: f64) -> bool {
    ile_prev.is_some_and(|prev| prev - ile <= eps)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", content = "epsilon", rename_all = "snake_case")]
pub enum StopCriterion {
    #[default]
    None,
    LogLikelihood(f64),
    Ile(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum StopReason {
    Criterion,
    StreamEnded,
    SessionCap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct I2rlConfig {
    pub session: SessionConfig,
    pub criterion: StopCriterion,
    pub max_sessions: Option<usize>,
    /// Evaluate the log-likelihood after every session even when the
    /// criterion does not need it.
    pub track_ll: bool,
}

impl Default for I2rlConfig {
    fn default() -> Self {
        Self {
            session: SessionConfig::default(),
            criterion: StopCriterion::None,
            max_sessions: None,
            track_ll: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct I2rlRun {
    pub history: Vec<SessionRecord>,
    pub statistic: SessionStatistic,
    pub stop: StopReason,
}

impl I2rlRun {
    pub fn total_duration(&self) -> Duration {
        self.history.iter().map(|r| r.duration).sum()
    }

    pub fn total_work(&self) -> u64 {
        self.history.iter().map(|r| r.work_units).sum()
    }

    pub fn any_timeout(&self) -> bool {
        self.history.iter().any(|r| r.timeout)
    }

    /// Whether the session that produced the final estimate hit its deadline.
    pub fn final_timeout(&self) -> bool {
        self.history.last().is_some_and(|r| r.timeout)
    }
}

/// ILE of the policy induced by a weight vector.
pub type IleFn<'a> = &'a dyn Fn(&RewardWeights) -> Result<f64>;

/// Runs sessions over `stream` until the criterion fires, the stream ends
/// or the session cap is reached.
pub fn run_i2rl<I>(
    problem: &Problem,
    stream: I,
    theta0: RewardWeights,
    cfg: &I2rlConfig,
    ile: Option<IleFn>,
) -> Result<I2rlRun>
where
    I: IntoIterator<Item = Vec<ObservedTrajectory>>,
{
    if matches!(cfg.criterion, StopCriterion::Ile(_)) && ile.is_none() {
        return Err(IrlError::InvalidParameter(
            "ILE stopping requires the expert's policy".into(),
        ));
    }
    let need_ll = cfg.track_ll || matches!(cfg.criterion, StopCriterion::LogLikelihood(_));
    let mut stat = SessionStatistic::empty(theta0);
    let mut history: Vec<SessionRecord> = Vec::new();
    let mut seen: Vec<ObservedTrajectory> = Vec::new();
    let mut stream = stream.into_iter();
    loop {
        if cfg.max_sessions.is_some_and(|cap| history.len() >= cap) {
            return Ok(I2rlRun {
                history,
                statistic: stat,
                stop: StopReason::SessionCap,
            });
        }
        let Some(batch) = stream.next() else {
            return Ok(I2rlRun {
                history,
                statistic: stat,
                stop: StopReason::StreamEnded,
            });
        };
        let index = history.len() + 1;
        let (mut record, mut next) = run_session(problem, &batch, &stat, index, &cfg.session)?;
        seen.extend(batch);
        if need_ll {
            let ll = problem.log_likelihood(
                &seen,
                &record.theta,
                &cfg.session.em,
                cfg.session.ll_normalization,
            )?;
            record.ll = Some(ll);
            next.last_ll = Some(ll);
        }
        if let Some(f) = ile {
            record.ile = Some(f(&record.theta)?);
        }
        let stop = match cfg.criterion {
            StopCriterion::None => false,
            StopCriterion::LogLikelihood(eps) => {
                check_stop_ll(record.ll.unwrap_or(f64::NAN), stat.last_ll, eps)
            }
            StopCriterion::Ile(eps) => check_stop_ile(
                history.last().and_then(|r| r.ile),
                record.ile.unwrap_or(f64::NAN),
                eps,
            ),
        };
        log::debug!(
            "session {index}: {} trajectories, ll {:?}, timeout {}",
            record.trajectories,
            record.ll,
            record.timeout
        );
        history.push(record);
        stat = next;
        if stop {
            return Ok(I2rlRun {
                history,
                statistic: stat,
                stop: StopReason::Criterion,
            });
        }
    }
}

/// Constant initial reward table `1/√|S|` over all state-action pairs.
pub fn jin_init(n_states: usize, n_actions: usize) -> Vec<f64> {
    vec![1.0 / (n_states as f64).sqrt(); n_states * n_actions]
}

#[derive(Debug, Clone, PartialEq)]
pub struct JinUpdate {
    pub reward: Vec<f64>,
    /// `Q(s, a_observed) − max_a Q(s, a)` under the previous reward.
    pub value_gap: f64,
}

/// One incremental reward update from a single observed state-action pair:
/// `R(s, a) += α·v` with `v` the value difference between the observed and
/// the predicted optimal action.
pub fn jin_session(
    r_prev: &[f64],
    observed: (usize, usize),
    mdp: &Mdp,
    alpha: f64,
    opts: &SolveOptions,
) -> Result<JinUpdate> {
    if !(alpha > 0.0) {
        return Err(IrlError::InvalidParameter(format!(
            "α must be positive, got {alpha}"
        )));
    }
    let (s, a) = observed;
    if s >= mdp.n_states() || a >= mdp.n_actions() {
        return Err(IrlError::InvalidParameter(format!(
            "pair ({s}, {a}) out of range"
        )));
    }
    let sol = solve_optimal(mdp, r_prev, opts)?;
    let row = &sol.q[mdp.sa(s, 0)..mdp.sa(s, 0) + mdp.n_actions()];
    let best = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let value_gap = row[a] - best;
    let mut reward = r_prev.to_vec();
    reward[mdp.sa(s, a)] += alpha * value_gap;
    Ok(JinUpdate { reward, value_gap })
}

/// Applies [`jin_session`] to every pair in order, starting from `r0`.
pub fn jin_learn(
    mdp: &Mdp,
    r0: Vec<f64>,
    pairs: impl IntoIterator<Item = (usize, usize)>,
    alpha: f64,
    opts: &SolveOptions,
) -> Result<Vec<f64>> {
    pairs.into_iter().try_fold(r0, |r, pair| {
        jin_session(&r, pair, mdp, alpha, opts).map(|u| u.reward)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::tests::chain;

    #[test]
    fn merge_arithmetic() {
        let m = merge_feature_expectations(3, Some(&[0.6]), 1, &[0.2]).unwrap();
        assert!((m[0] - 0.5).abs() < 1e-15);
        let first = merge_feature_expectations(0, None, 4, &[0.1, 0.7]).unwrap();
        assert_eq!(first, vec![0.1, 0.7]);
        assert!(merge_feature_expectations(0, None, 0, &[0.1]).is_err());
    }

    #[test]
    fn merge_is_associative() {
        let (a, b, c) = ([0.3, 0.9], [0.1, 0.4], [0.8, 0.05]);
        let ab = merge_feature_expectations(2, Some(&a), 5, &b).unwrap();
        let ab_c = merge_feature_expectations(7, Some(&ab), 3, &c).unwrap();
        let bc = merge_feature_expectations(5, Some(&b), 3, &c).unwrap();
        let a_bc = merge_feature_expectations(2, Some(&a), 8, &bc).unwrap();
        for (x, y) in ab_c.iter().zip(&a_bc) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn stopping_rules() {
        assert!(check_stop_ll(1.0001, Some(1.0), 1e-3));
        assert!(!check_stop_ll(1.01, Some(1.0), 1e-3));
        assert!(!check_stop_ll(1.0, None, 1e6));
        assert!(check_stop_ile(Some(0.5), 0.499, 0.01));
        assert!(!check_stop_ile(Some(0.5), 0.3, 0.01));
        assert!(check_stop_ile(Some(0.5), 0.7, 0.01));
        assert!(!check_stop_ile(None, 0.1, 0.01));
    }

    #[test]
    fn jin_init_is_inverse_sqrt() {
        assert!(jin_init(16, 3).iter().all(|&r| r == 0.25));
    }

    #[test]
    fn jin_optimal_action_leaves_reward() {
        let mdp = chain(0.9);
        let r = vec![0.0, 0.0, 1.0, 1.0];
        let u = jin_session(&r, (0, 1), &mdp, 0.1, &SolveOptions::default()).unwrap();
        assert_eq!(u.value_gap, 0.0);
        assert_eq!(u.reward, r);
    }

    #[test]
    fn jin_chain_hand_value() {
        // Only (0, stay) pays: Q(0, stay) = 1/(1 − 0.9) = 10, Q(0, advance) = 0.
        let mdp = chain(0.9);
        let r = vec![1.0, 0.0, 0.0, 0.0];
        let u = jin_session(&r, (0, 1), &mdp, 0.1, &SolveOptions::with_tol(1e-10)).unwrap();
        assert!((u.value_gap + 10.0).abs() < 1e-8);
        assert!((u.reward[1] + 1.0).abs() < 1e-9);
        assert_eq!(&u.reward[..1], &[1.0]);
        assert_eq!(&u.reward[2..], &[0.0, 0.0]);
    }
}
