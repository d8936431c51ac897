//! Occluded demonstrations: completions of hidden steps, their posterior,
//! the latent feature expectations (E-step), the EM loop and the
//! observed-data log-likelihood.
//!
//! Hidden steps come in maximal runs ("gaps"). Given the observed steps on
//! either side, gaps are conditionally independent, so every quantity is
//! computed gap by gap. A gap starting at `t = 1` is anchored by the start
//! distribution; a gap running to the end of the trajectory has no right
//! anchor. Hidden steps keep their time index, so gap lengths are known.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::budget::Budget;
use crate::error::{IrlError, Result};
use crate::maxent::{
    accumulate_discounted_features, dp_cost, maxent_solve, model_statistics, FeatureSet,
    MaxEntSolution, RewardWeights, SolveStatus, SolverConfig, Trajectory,
};
use crate::mdp::{log_sum_exp, Mdp};

/// States that are entirely hidden from the learner.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OcclusionModel {
    occluded: Vec<bool>,
}

impl OcclusionModel {
    pub fn new(n_states: usize, occluded_states: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut occluded = vec![false; n_states];
        for s in occluded_states {
            if s >= n_states {
                return Err(IrlError::InvalidParameter(format!(
                    "occluded state {s} out of range"
                )));
            }
            occluded[s] = true;
        }
        Ok(Self { occluded })
    }

    pub fn none(n_states: usize) -> Self {
        Self {
            occluded: vec![false; n_states],
        }
    }

    pub fn is_occluded(&self, s: usize) -> bool {
        self.occluded[s]
    }

    pub fn n_states(&self) -> usize {
        self.occluded.len()
    }

    pub fn occluded_states(&self) -> impl Iterator<Item = usize> + '_ {
        self.occluded
            .iter()
            .enumerate()
            .filter(|(_, &o)| o)
            .map(|(s, _)| s)
    }

    /// Degree of observability in percent.
    pub fn observability(&self) -> f64 {
        let hidden = self.occluded.iter().filter(|&&o| o).count();
        100.0 * (1.0 - hidden as f64 / self.occluded.len() as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Step {
    Observed(usize, usize),
    Hidden,
}

/// Maximal run of hidden steps, 0-based inclusive indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Gap {
    pub start: usize,
    pub end: usize,
}

impl Gap {
    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ObservedTrajectory {
    steps: Vec<Step>,
}

impl ObservedTrajectory {
    pub fn new(steps: Vec<Step>) -> Result<Self> {
        if steps.is_empty() {
            return Err(IrlError::InvalidTrajectory(
                "trajectory has no steps".into(),
            ));
        }
        Ok(Self { steps })
    }

    /// Masks every step whose state is occluded.
    pub fn from_trajectory(traj: &Trajectory, occlusion: &OcclusionModel) -> Self {
        Self {
            steps: traj
                .steps()
                .iter()
                .map(|&(s, a)| {
                    if occlusion.is_occluded(s) {
                        Step::Hidden
                    } else {
                        Step::Observed(s, a)
                    }
                })
                .collect(),
        }
    }

    pub fn fully_observed(traj: &Trajectory) -> Self {
        Self {
            steps: traj
                .steps()
                .iter()
                .map(|&(s, a)| Step::Observed(s, a))
                .collect(),
        }
    }

    pub fn steps(&self) -> &[Step] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn hidden_count(&self) -> usize {
        self.steps
            .iter()
            .filter(|s| matches!(s, Step::Hidden))
            .count()
    }

    pub fn observed(&self, t: usize) -> Option<(usize, usize)> {
        match self.steps.get(t) {
            Some(&Step::Observed(s, a)) => Some((s, a)),
            _ => None,
        }
    }

    pub fn gaps(&self) -> Vec<Gap> {
        let mut gaps = Vec::new();
        let mut open = None;
        for (t, step) in self.steps.iter().enumerate() {
            match (step, open) {
                (Step::Hidden, None) => open = Some(t),
                (Step::Observed(..), Some(start)) => {
                    gaps.push(Gap { start, end: t - 1 });
                    open = None;
                }
                _ => {}
            }
        }
        if let Some(start) = open {
            gaps.push(Gap {
                start,
                end: self.steps.len() - 1,
            });
        }
        gaps
    }

    /// The underlying trajectory when nothing is hidden.
    pub fn as_trajectory(&self) -> Option<Trajectory> {
        let steps: Option<Vec<_>> = (0..self.len()).map(|t| self.observed(t)).collect();
        steps.and_then(|s| Trajectory::new(s).ok())
    }

    pub fn validate(&self, mdp: &Mdp, occlusion: &OcclusionModel) -> Result<()> {
        for (t, step) in self.steps.iter().enumerate() {
            if let Step::Observed(s, a) = *step {
                if s >= mdp.n_states() || a >= mdp.n_actions() {
                    return Err(IrlError::InvalidTrajectory(format!(
                        "step {} = ({s}, {a}) out of range",
                        t + 1
                    )));
                }
                if occlusion.is_occluded(s) {
                    return Err(IrlError::InvalidTrajectory(format!(
                        "step {} observes occluded state {s}",
                        t + 1
                    )));
                }
                if let Some((ns, _)) = self.observed(t + 1) {
                    if mdp.transition_prob(s, a, ns) <= 0.0 {
                        return Err(IrlError::InvalidTrajectory(format!(
                            "infeasible observed transition at step {}",
                            t + 1
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Fills the hidden steps with a completion.
    pub fn complete(&self, completion: &Completion) -> Result<Trajectory> {
        let mut fill = completion.assignments.iter();
        let steps = self
            .steps
            .iter()
            .map(|step| match *step {
                Step::Observed(s, a) => Ok((s, a)),
                Step::Hidden => fill
                    .next()
                    .copied()
                    .ok_or_else(|| IrlError::InvalidTrajectory("completion too short".into())),
            })
            .collect::<Result<Vec<_>>>()?;
        if fill.next().is_some() {
            return Err(IrlError::InvalidTrajectory("completion too long".into()));
        }
        Trajectory::new(steps)
    }
}

/// One assignment of `(state, action)` to every hidden step, in time order.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Completion {
    pub assignments: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct EmConfig {
    pub max_em_iterations: usize,
    /// Stop when `‖θ^(t+1) − θ^(t)‖∞` falls below this.
    pub tolerance: f64,
    pub restarts: usize,
    /// Gaps up to this length are enumerated exactly.
    pub gap_cap: usize,
    /// Samples per longer gap.
    pub samples: usize,
    /// Use exact forward-backward marginals instead of sampling for long gaps.
    pub exact_long_gaps: bool,
    /// Record the observed log-likelihood after every iteration.
    pub track_ll: bool,
    pub seed: u64,
    pub solver: SolverConfig,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            max_em_iterations: 50,
            tolerance: 1e-4,
            restarts: 5,
            gap_cap: 4,
            samples: 1_000,
            exact_long_gaps: false,
            track_ll: false,
            seed: 0,
            solver: SolverConfig::default(),
        }
    }
}

impl EmConfig {
    fn check(&self) -> Result<()> {
        if self.max_em_iterations == 0
            || !(self.tolerance > 0.0)
            || self.restarts == 0
            || self.gap_cap == 0
            || self.samples == 0
        {
            return Err(IrlError::InvalidParameter(format!(
                "EM config must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Per-gap factor view: everything in `Pr(Y ∪ Z)` that involves hidden steps.
struct GapFactors<'a> {
    y: &'a ObservedTrajectory,
    gap: Gap,
    mdp: &'a Mdp,
    reward: &'a [f64],
}

impl GapFactors<'_> {
    fn time_scale(&self, idx: usize) -> f64 {
        self.mdp.discount().powi(idx as i32 + 1)
    }

    /// Log-weight of entering hidden state `s` at the first gap step.
    fn entry(&self, s: usize) -> f64 {
        if self.gap.start == 0 {
            self.mdp.start()[s].ln()
        } else {
            let (ps, pa) = self
                .y
                .observed(self.gap.start - 1)
                .expect("gap boundary is observed");
            self.mdp.transition_prob(ps, pa, s).ln()
        }
    }

    /// Log-weight of leaving the gap from `(s, a)` into the next observed state.
    fn exit(&self, s: usize, a: usize) -> f64 {
        match self.y.observed(self.gap.end + 1) {
            Some((ns, _)) => self.mdp.transition_prob(s, a, ns).ln(),
            None => 0.0,
        }
    }

    fn step_reward(&self, idx: usize, s: usize, a: usize) -> f64 {
        self.time_scale(idx) * self.reward[self.mdp.sa(s, a)]
    }

    fn log_weight(&self, assignment: &[(usize, usize)]) -> f64 {
        let mut lw = self.entry(assignment[0].0);
        for (k, &(s, a)) in assignment.iter().enumerate() {
            lw += self.step_reward(self.gap.start + k, s, a);
            match assignment.get(k + 1) {
                Some(&(ns, _)) => lw += self.mdp.transition_prob(s, a, ns).ln(),
                None => lw += self.exit(s, a),
            }
        }
        lw
    }
}

fn gap_assignments(
    y: &ObservedTrajectory,
    gap: Gap,
    mdp: &Mdp,
    occlusion: &OcclusionModel,
) -> Vec<Vec<(usize, usize)>> {
    let no_reward = vec![0.0; mdp.n_states() * mdp.n_actions()];
    let factors = GapFactors {
        y,
        gap,
        mdp,
        reward: &no_reward,
    };
    let mut out = Vec::new();
    let mut prefix = Vec::with_capacity(gap.len());
    fn dfs(
        factors: &GapFactors,
        occlusion: &OcclusionModel,
        prefix: &mut Vec<(usize, usize)>,
        out: &mut Vec<Vec<(usize, usize)>>,
    ) {
        let mdp = factors.mdp;
        if prefix.len() == factors.gap.len() {
            let &(s, a) = prefix.last().expect("non-empty gap");
            if factors.exit(s, a) > f64::NEG_INFINITY {
                out.push(prefix.clone());
            }
            return;
        }
        let candidates: Vec<usize> = match prefix.last() {
            None => (0..mdp.n_states())
                .filter(|&s| occlusion.is_occluded(s) && factors.entry(s) > f64::NEG_INFINITY)
                .collect(),
            Some(&(s, a)) => mdp
                .successors(s, a)
                .iter()
                .map(|&(n, _)| n)
                .filter(|&n| occlusion.is_occluded(n))
                .collect(),
        };
        for s in candidates {
            for a in 0..mdp.n_actions() {
                prefix.push((s, a));
                dfs(factors, occlusion, prefix, out);
                prefix.pop();
            }
        }
    }
    dfs(&factors, occlusion, &mut prefix, &mut out);
    out
}

/// Every transition-feasible completion of `y` using only occluded states.
pub fn enumerate_completions(
    y: &ObservedTrajectory,
    mdp: &Mdp,
    occlusion: &OcclusionModel,
    cap: usize,
) -> Result<Vec<Completion>> {
    let gaps = y.gaps();
    if let Some(g) = gaps.iter().find(|g| g.len() > cap) {
        return Err(IrlError::GapTooLong {
            start: g.start + 1,
            end: g.end + 1,
            len: g.len(),
            cap,
        });
    }
    let mut combos: Vec<Vec<(usize, usize)>> = vec![Vec::new()];
    for gap in gaps {
        let options = gap_assignments(y, gap, mdp, occlusion);
        if options.is_empty() {
            return Err(IrlError::Infeasible {
                start: gap.start + 1,
                end: gap.end + 1,
            });
        }
        combos = combos
            .iter()
            .flat_map(|prefix| {
                options.iter().map(move |opt| {
                    let mut c = prefix.clone();
                    c.extend_from_slice(opt);
                    c
                })
            })
            .collect();
    }
    Ok(combos
        .into_iter()
        .map(|assignments| Completion { assignments })
        .collect())
}

fn split_by_gaps<'c>(gaps: &[Gap], completion: &'c Completion) -> Vec<&'c [(usize, usize)]> {
    let mut offset = 0;
    gaps.iter()
        .map(|g| {
            let part = &completion.assignments[offset..offset + g.len()];
            offset += g.len();
            part
        })
        .collect()
}

/// `Pr(Z | Y; θ)` over the given completion set.
pub fn posterior_over_completions(
    y: &ObservedTrajectory,
    completions: &[Completion],
    theta: &RewardWeights,
    mdp: &Mdp,
    features: &FeatureSet,
) -> Result<Vec<f64>> {
    if completions.is_empty() {
        return Err(IrlError::EmptyInput("completion set"));
    }
    let reward = features.reward_table(theta);
    let gaps = y.gaps();
    let log_w: Vec<f64> = completions
        .iter()
        .map(|c| {
            gaps.iter()
                .zip(split_by_gaps(&gaps, c))
                .map(|(&gap, part)| {
                    GapFactors {
                        y,
                        gap,
                        mdp,
                        reward: &reward,
                    }
                    .log_weight(part)
                })
                .sum()
        })
        .collect();
    normalize_log_weights(&log_w).ok_or_else(|| {
        let g = gaps.first().copied().unwrap_or(Gap { start: 0, end: 0 });
        IrlError::Infeasible {
            start: g.start + 1,
            end: g.end + 1,
        }
    })
}

fn normalize_log_weights(log_w: &[f64]) -> Option<Vec<f64>> {
    let norm = log_sum_exp(log_w.iter().copied());
    if norm == f64::NEG_INFINITY {
        return None;
    }
    Some(log_w.iter().map(|&lw| (lw - norm).exp()).collect())
}

/// Forward messages over one gap: `alpha[k][s * A + a]` is the log-weight of
/// all gap prefixes ending in `(s, a)` at gap step `k`.
fn forward(factors: &GapFactors, occlusion: &OcclusionModel) -> Vec<Vec<f64>> {
    let mdp = factors.mdp;
    let n_a = mdp.n_actions();
    let width = mdp.n_states() * n_a;
    let mut alpha = vec![vec![f64::NEG_INFINITY; width]; factors.gap.len()];
    for s in occlusion.occluded_states() {
        let e = factors.entry(s);
        if e == f64::NEG_INFINITY {
            continue;
        }
        for a in 0..n_a {
            alpha[0][s * n_a + a] = e + factors.step_reward(factors.gap.start, s, a);
        }
    }
    for k in 1..factors.gap.len() {
        // log Σ over predecessors for each next state
        let mut into = vec![f64::NEG_INFINITY; mdp.n_states()];
        for (sa, &lw) in alpha[k - 1].iter().enumerate() {
            if lw == f64::NEG_INFINITY {
                continue;
            }
            for &(n, p) in mdp.successors(sa / n_a, sa % n_a) {
                if occlusion.is_occluded(n) {
                    into[n] = log_add(into[n], lw + p.ln());
                }
            }
        }
        for (s, &lin) in into.iter().enumerate() {
            if lin == f64::NEG_INFINITY {
                continue;
            }
            for a in 0..n_a {
                alpha[k][s * n_a + a] = lin + factors.step_reward(factors.gap.start + k, s, a);
            }
        }
    }
    alpha
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn gap_log_normalizer(factors: &GapFactors, alpha: &[Vec<f64>]) -> f64 {
    let n_a = factors.mdp.n_actions();
    let last = alpha.last().expect("non-empty gap");
    log_sum_exp(
        last.iter()
            .enumerate()
            .filter(|(_, &lw)| lw > f64::NEG_INFINITY)
            .map(|(sa, &lw)| lw + factors.exit(sa / n_a, sa % n_a)),
    )
}

fn sample_categorical(log_w: &[f64], rng: &mut impl Rng) -> Option<usize> {
    let norm = log_sum_exp(log_w.iter().copied());
    if norm == f64::NEG_INFINITY {
        return None;
    }
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = None;
    for (i, &lw) in log_w.iter().enumerate() {
        if lw == f64::NEG_INFINITY {
            continue;
        }
        acc += (lw - norm).exp();
        last = Some(i);
        if u < acc {
            return Some(i);
        }
    }
    last
}

/// Draws one gap assignment by backward sampling over forward messages.
fn backward_sample(
    factors: &GapFactors,
    alpha: &[Vec<f64>],
    rng: &mut impl Rng,
) -> Option<Vec<(usize, usize)>> {
    let mdp = factors.mdp;
    let n_a = mdp.n_actions();
    let len = factors.gap.len();
    let mut out = vec![(0, 0); len];
    let last: Vec<f64> = alpha[len - 1]
        .iter()
        .enumerate()
        .map(|(sa, &lw)| {
            if lw == f64::NEG_INFINITY {
                lw
            } else {
                lw + factors.exit(sa / n_a, sa % n_a)
            }
        })
        .collect();
    let pick = sample_categorical(&last, rng)?;
    out[len - 1] = (pick / n_a, pick % n_a);
    for k in (0..len - 1).rev() {
        let next_state = out[k + 1].0;
        let w: Vec<f64> = alpha[k]
            .iter()
            .enumerate()
            .map(|(sa, &lw)| {
                if lw == f64::NEG_INFINITY {
                    lw
                } else {
                    lw + mdp.transition_prob(sa / n_a, sa % n_a, next_state).ln()
                }
            })
            .collect();
        let pick = sample_categorical(&w, rng)?;
        out[k] = (pick / n_a, pick % n_a);
    }
    Some(out)
}

/// `n` completions drawn from the posterior, each with weight `1/n`.
pub fn sample_completions(
    y: &ObservedTrajectory,
    theta: &RewardWeights,
    mdp: &Mdp,
    features: &FeatureSet,
    occlusion: &OcclusionModel,
    n: usize,
    rng: &mut impl Rng,
) -> Result<Vec<(Completion, f64)>> {
    if n == 0 {
        return Err(IrlError::InvalidParameter(
            "sample count must be >= 1".into(),
        ));
    }
    let reward = features.reward_table(theta);
    let gaps = y.gaps();
    let mut per_gap = Vec::with_capacity(gaps.len());
    for &gap in &gaps {
        let factors = GapFactors {
            y,
            gap,
            mdp,
            reward: &reward,
        };
        let alpha = forward(&factors, occlusion);
        if gap_log_normalizer(&factors, &alpha) == f64::NEG_INFINITY {
            return Err(IrlError::Infeasible {
                start: gap.start + 1,
                end: gap.end + 1,
            });
        }
        per_gap.push((factors, alpha));
    }
    let weight = 1.0 / n as f64;
    (0..n)
        .map(|_| {
            let mut assignments = Vec::with_capacity(y.hidden_count());
            for (factors, alpha) in &per_gap {
                let part = backward_sample(factors, alpha, rng).ok_or(IrlError::Infeasible {
                    start: factors.gap.start + 1,
                    end: factors.gap.end + 1,
                })?;
                assignments.extend(part);
            }
            Ok((Completion { assignments }, weight))
        })
        .collect()
}

/// A trajectory with its gap completions enumerated once, for repeated
/// E-steps at different θ.
#[derive(Debug, Clone)]
pub struct PreparedTrajectory {
    y: ObservedTrajectory,
    gaps: Vec<PreparedGap>,
}

#[derive(Debug, Clone)]
enum PreparedGap {
    Enumerated(Gap, Vec<Vec<(usize, usize)>>),
    Long(Gap),
}

impl PreparedTrajectory {
    pub fn new(
        y: &ObservedTrajectory,
        mdp: &Mdp,
        occlusion: &OcclusionModel,
        cfg: &EmConfig,
    ) -> Result<Self> {
        y.validate(mdp, occlusion)?;
        let mut gaps = Vec::new();
        for gap in y.gaps() {
            if gap.len() <= cfg.gap_cap {
                let opts = gap_assignments(y, gap, mdp, occlusion);
                if opts.is_empty() {
                    return Err(IrlError::Infeasible {
                        start: gap.start + 1,
                        end: gap.end + 1,
                    });
                }
                gaps.push(PreparedGap::Enumerated(gap, opts));
            } else {
                gaps.push(PreparedGap::Long(gap));
            }
        }
        Ok(Self { y: y.clone(), gaps })
    }

    pub fn observed(&self) -> &ObservedTrajectory {
        &self.y
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

pub fn prepare_all(
    ys: &[ObservedTrajectory],
    mdp: &Mdp,
    occlusion: &OcclusionModel,
    cfg: &EmConfig,
) -> Result<Vec<PreparedTrajectory>> {
    ys.iter()
        .map(|y| PreparedTrajectory::new(y, mdp, occlusion, cfg))
        .collect()
}

/// Shared inputs of the E-step and likelihood computations.
pub struct LatentContext<'a> {
    pub mdp: &'a Mdp,
    pub features: &'a FeatureSet,
    pub occlusion: &'a OcclusionModel,
    pub cfg: &'a EmConfig,
}

impl LatentContext<'_> {
    fn observed_features(&self, y: &ObservedTrajectory, out: &mut [f64]) {
        accumulate_discounted_features(
            (0..y.len()).filter_map(|t| y.observed(t).map(|sa| (t + 1, sa))),
            self.features,
            self.mdp.discount(),
            1.0,
            out,
        );
    }

    /// Posterior-expected discounted feature counts of one trajectory.
    /// Returns the work spent.
    fn trajectory_features(
        &self,
        p: &PreparedTrajectory,
        reward: &[f64],
        rng: &mut impl Rng,
        out: &mut [f64],
    ) -> Result<u64> {
        let y = &p.y;
        self.observed_features(y, out);
        let width = (self.mdp.n_states() * self.mdp.n_actions()) as u64;
        let mut work = y.len() as u64;
        for prepared in &p.gaps {
            match prepared {
                PreparedGap::Enumerated(gap, options) => {
                    let factors = GapFactors {
                        y,
                        gap: *gap,
                        mdp: self.mdp,
                        reward,
                    };
                    let log_w: Vec<f64> = options.iter().map(|o| factors.log_weight(o)).collect();
                    let post = normalize_log_weights(&log_w).ok_or(IrlError::Infeasible {
                        start: gap.start + 1,
                        end: gap.end + 1,
                    })?;
                    for (opt, w) in options.iter().zip(post) {
                        accumulate_discounted_features(
                            opt.iter()
                                .enumerate()
                                .map(|(k, &sa)| (gap.start + k + 1, sa)),
                            self.features,
                            self.mdp.discount(),
                            w,
                            out,
                        );
                    }
                    work += (options.len() * gap.len()) as u64;
                }
                PreparedGap::Long(gap) => {
                    let factors = GapFactors {
                        y,
                        gap: *gap,
                        mdp: self.mdp,
                        reward,
                    };
                    let alpha = forward(&factors, self.occlusion);
                    work += gap.len() as u64 * width;
                    if self.cfg.exact_long_gaps {
                        gap_marginal_features(
                            &factors,
                            &alpha,
                            self.occlusion,
                            self.features,
                            out,
                        )?;
                        work += gap.len() as u64 * width;
                    } else {
                        let weight = 1.0 / self.cfg.samples as f64;
                        for _ in 0..self.cfg.samples {
                            let part = backward_sample(&factors, &alpha, rng).ok_or(
                                IrlError::Infeasible {
                                    start: gap.start + 1,
                                    end: gap.end + 1,
                                },
                            )?;
                            accumulate_discounted_features(
                                part.iter()
                                    .enumerate()
                                    .map(|(k, &sa)| (gap.start + k + 1, sa)),
                                self.features,
                                self.mdp.discount(),
                                weight,
                                out,
                            );
                        }
                        work += (self.cfg.samples * gap.len()) as u64 * self.mdp.n_actions() as u64;
                    }
                }
            }
        }
        Ok(work)
    }

    /// Latent feature expectations over a prepared set.
    pub fn feature_expectations(
        &self,
        prepared: &[PreparedTrajectory],
        theta: &RewardWeights,
        rng: &mut impl Rng,
        budget: &Budget,
    ) -> Result<Vec<f64>> {
        if prepared.is_empty() {
            return Err(IrlError::EmptyInput("observed trajectories"));
        }
        let reward = self.features.reward_table(theta);
        let mut total = vec![0.0; self.features.len()];
        for p in prepared {
            let work = self.trajectory_features(p, &reward, rng, &mut total)?;
            budget.charge(work);
        }
        let n = prepared.len() as f64;
        total.iter_mut().for_each(|v| *v /= n);
        Ok(total)
    }

    /// Observed-data log-likelihood, summed over trajectories.
    pub fn log_likelihood(
        &self,
        prepared: &[PreparedTrajectory],
        theta: &RewardWeights,
        budget: &Budget,
    ) -> Result<f64> {
        if prepared.is_empty() {
            return Err(IrlError::EmptyInput("observed trajectories"));
        }
        let reward = self.features.reward_table(theta);
        let mut partitions: Vec<(usize, f64)> = Vec::new();
        let mut total = 0.0;
        let width = (self.mdp.n_states() * self.mdp.n_actions()) as u64;
        for p in prepared {
            let y = &p.y;
            let log_z = match partitions.iter().find(|(len, _)| *len == y.len()) {
                Some(&(_, z)) => z,
                None => {
                    let z =
                        model_statistics(self.mdp, self.features, theta, y.len())?.log_partition;
                    budget.charge(dp_cost(self.mdp, y.len()));
                    partitions.push((y.len(), z));
                    z
                }
            };
            let mut ll = observed_log_weight(y, self.mdp, &reward);
            for prepared_gap in &p.gaps {
                let (gap, lz) = match prepared_gap {
                    PreparedGap::Enumerated(gap, options) => {
                        let factors = GapFactors {
                            y,
                            gap: *gap,
                            mdp: self.mdp,
                            reward: &reward,
                        };
                        budget.charge((options.len() * gap.len()) as u64);
                        (
                            *gap,
                            log_sum_exp(options.iter().map(|o| factors.log_weight(o))),
                        )
                    }
                    PreparedGap::Long(gap) => {
                        let factors = GapFactors {
                            y,
                            gap: *gap,
                            mdp: self.mdp,
                            reward: &reward,
                        };
                        let alpha = forward(&factors, self.occlusion);
                        budget.charge(gap.len() as u64 * width);
                        (*gap, gap_log_normalizer(&factors, &alpha))
                    }
                };
                if lz == f64::NEG_INFINITY {
                    return Err(IrlError::Infeasible {
                        start: gap.start + 1,
                        end: gap.end + 1,
                    });
                }
                ll += lz;
            }
            total += ll - log_z;
        }
        Ok(total)
    }
}

/// Log-weight terms of `Pr(Y ∪ Z)` that involve observed steps only.
fn observed_log_weight(y: &ObservedTrajectory, mdp: &Mdp, reward: &[f64]) -> f64 {
    let mut lw = 0.0;
    if let Some((s, _)) = y.observed(0) {
        lw += mdp.start()[s].ln();
    }
    for t in 0..y.len() {
        if let Some((s, a)) = y.observed(t) {
            lw += mdp.discount().powi(t as i32 + 1) * reward[mdp.sa(s, a)];
            if let Some((ns, _)) = y.observed(t + 1) {
                lw += mdp.transition_prob(s, a, ns).ln();
            }
        }
    }
    lw
}

/// Exact posterior marginals over a gap by forward-backward.
fn gap_marginal_features(
    factors: &GapFactors,
    alpha: &[Vec<f64>],
    occlusion: &OcclusionModel,
    features: &FeatureSet,
    out: &mut [f64],
) -> Result<()> {
    let mdp = factors.mdp;
    let n_a = mdp.n_actions();
    let len = factors.gap.len();
    let width = mdp.n_states() * n_a;
    let mut beta = vec![vec![f64::NEG_INFINITY; width]; len];
    for (sa, b) in beta[len - 1].iter_mut().enumerate() {
        if occlusion.is_occluded(sa / n_a) {
            *b = factors.exit(sa / n_a, sa % n_a);
        }
    }
    for k in (0..len - 1).rev() {
        // log Σ_{a'} r(s', a') + β_{k+1}(s', a') per next state
        let mut ahead = vec![f64::NEG_INFINITY; mdp.n_states()];
        for s in occlusion.occluded_states() {
            ahead[s] = log_sum_exp((0..n_a).map(|a| {
                factors.step_reward(factors.gap.start + k + 1, s, a) + beta[k + 1][s * n_a + a]
            }));
        }
        for sa in 0..width {
            if !occlusion.is_occluded(sa / n_a) {
                continue;
            }
            beta[k][sa] = log_sum_exp(
                mdp.successors(sa / n_a, sa % n_a)
                    .iter()
                    .filter(|&&(n, _)| occlusion.is_occluded(n))
                    .map(|&(n, p)| p.ln() + ahead[n]),
            );
        }
    }
    let log_z = gap_log_normalizer(factors, alpha);
    if log_z == f64::NEG_INFINITY {
        return Err(IrlError::Infeasible {
            start: factors.gap.start + 1,
            end: factors.gap.end + 1,
        });
    }
    for k in 0..len {
        let scale = mdp.discount().powi((factors.gap.start + k) as i32 + 1);
        for sa in 0..width {
            let lw = alpha[k][sa] + beta[k][sa];
            if lw == f64::NEG_INFINITY || lw.is_nan() {
                continue;
            }
            let w = (lw - log_z).exp() * scale;
            for (o, &b) in out.iter_mut().zip(features.phi(sa / n_a, sa % n_a)) {
                if b == 1 {
                    *o += w;
                }
            }
        }
    }
    Ok(())
}

/// `φ̂^{Z|Y}` over a set of observed trajectories.
pub fn latent_feature_expectations(
    ys: &[ObservedTrajectory],
    theta: &RewardWeights,
    mdp: &Mdp,
    features: &FeatureSet,
    occlusion: &OcclusionModel,
    cfg: &EmConfig,
) -> Result<Vec<f64>> {
    let prepared = prepare_all(ys, mdp, occlusion, cfg)?;
    let ctx = LatentContext {
        mdp,
        features,
        occlusion,
        cfg,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    ctx.feature_expectations(&prepared, theta, &mut rng, &Budget::unlimited())
}

/// Observed-data log-likelihood `Σ_Y log Σ_Z Pr(Y ∪ Z; θ)`.
pub fn observed_ll(
    theta: &RewardWeights,
    ys: &[ObservedTrajectory],
    mdp: &Mdp,
    features: &FeatureSet,
    occlusion: &OcclusionModel,
    cfg: &EmConfig,
) -> Result<f64> {
    let prepared = prepare_all(ys, mdp, occlusion, cfg)?;
    LatentContext {
        mdp,
        features,
        occlusion,
        cfg,
    }
    .log_likelihood(&prepared, theta, &Budget::unlimited())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EmStatus {
    Converged,
    IterationCap,
    /// An M-step hit its iteration cap; its best iterate was used.
    MStepNotConverged,
    DeadlineExpired,
}

#[derive(Debug, Clone)]
pub struct EmResult {
    pub theta: RewardWeights,
    pub em_iterations: usize,
    pub m_step_iterations: usize,
    /// Entropy of the model trajectory distribution at `theta`.
    pub entropy: f64,
    /// Achieved model feature expectations at `theta`.
    pub achieved: Vec<f64>,
    /// Last E-step target.
    pub target: Vec<f64>,
    /// Log-likelihood at the initial θ followed by one entry per iteration;
    /// empty unless tracking was requested.
    pub ll_trace: Vec<f64>,
    pub status: EmStatus,
    pub restart: usize,
}

/// Log-likelihood callback used for the per-iteration trace.
pub type LlFn<'a> = &'a dyn Fn(&RewardWeights) -> Result<f64>;

/// One EM run from `init`. `target` performs the E-step at a given θ.
#[allow(clippy::too_many_arguments)]
pub fn em_run(
    mdp: &Mdp,
    features: &FeatureSet,
    horizon: usize,
    init: &RewardWeights,
    cfg: &EmConfig,
    budget: &Budget,
    mut target: impl FnMut(&RewardWeights) -> Result<Vec<f64>>,
    ll: Option<LlFn>,
) -> Result<EmResult> {
    cfg.check()?;
    let solver = SolverConfig {
        horizon: Some(horizon),
        ..cfg.solver.clone()
    };
    let mut theta = init.clone();
    let mut ll_trace = Vec::new();
    if let Some(f) = ll {
        ll_trace.push(f(&theta)?);
    }
    let mut status = EmStatus::IterationCap;
    let mut m_iters = 0;
    let mut last: Option<MaxEntSolution> = None;
    let mut last_target = Vec::new();
    let mut em_iterations = 0;
    for it in 1..=cfg.max_em_iterations {
        em_iterations = it;
        let phi_hat = target(&theta)?;
        let sol = match maxent_solve(mdp, features, &phi_hat, &solver, &theta, budget) {
            Ok(sol) => sol,
            Err(IrlError::NotConverged { best, .. }) => {
                status = EmStatus::MStepNotConverged;
                *best
            }
            Err(e) => return Err(e),
        };
        m_iters += sol.iterations;
        let step = features
            .canonical(&sol.theta)
            .max_abs_diff(&features.canonical(&theta));
        theta = sol.theta.clone();
        let deadline = sol.status == SolveStatus::DeadlineExpired;
        last = Some(sol);
        last_target = phi_hat;
        if let Some(f) = ll {
            ll_trace.push(f(&theta)?);
        }
        if deadline || budget.expired() {
            status = EmStatus::DeadlineExpired;
            break;
        }
        if status == EmStatus::MStepNotConverged {
            break;
        }
        if step <= cfg.tolerance {
            status = EmStatus::Converged;
            break;
        }
    }
    let last = last.expect("at least one EM iteration");
    Ok(EmResult {
        theta,
        em_iterations,
        m_step_iterations: m_iters,
        entropy: last.entropy,
        achieved: last.achieved,
        target: last_target,
        ll_trace,
        status,
        restart: 0,
    })
}

/// Batch latent max-entropy IRL: EM with random restarts, keeping the
/// solution whose trajectory distribution has the largest entropy.
///
/// Restart 0 starts from `theta_init` when given; the others draw θ
/// uniformly from `[0, 1]^K`. Restarts share `budget`; once it expires the
/// best solution so far is returned with a `DeadlineExpired` status.
pub fn em_solve(
    mdp: &Mdp,
    ys: &[ObservedTrajectory],
    theta_init: Option<&RewardWeights>,
    features: &FeatureSet,
    occlusion: &OcclusionModel,
    cfg: &EmConfig,
    budget: &Budget,
) -> Result<EmResult> {
    cfg.check()?;
    if ys.is_empty() {
        return Err(IrlError::EmptyInput("observed trajectories"));
    }
    let prepared = prepare_all(ys, mdp, occlusion, cfg)?;
    let horizon = cfg
        .solver
        .horizon
        .unwrap_or_else(|| ys.iter().map(ObservedTrajectory::len).max().unwrap_or(1));
    let ctx = LatentContext {
        mdp,
        features,
        occlusion,
        cfg,
    };
    let mut best: Option<EmResult> = None;
    for restart in 0..cfg.restarts {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(restart as u64));
        let init = match (restart, theta_init) {
            (0, Some(t)) => t.clone(),
            _ => RewardWeights::random(features.len(), &mut rng),
        };
        let unlimited = Budget::unlimited();
        let ll = |theta: &RewardWeights| ctx.log_likelihood(&prepared, theta, &unlimited);
        let mut result = em_run(
            mdp,
            features,
            horizon,
            &init,
            cfg,
            budget,
            |theta| ctx.feature_expectations(&prepared, theta, &mut rng, budget),
            cfg.track_ll.then_some(&ll as LlFn),
        )?;
        result.restart = restart;
        let expired = result.status == EmStatus::DeadlineExpired;
        let better = match &best {
            None => true,
            Some(b) => {
                // a completed run always beats one cut short by the deadline
                (b.status == EmStatus::DeadlineExpired && !expired)
                    || ((b.status == EmStatus::DeadlineExpired) == expired
                        && result.entropy > b.entropy)
            }
        };
        if better {
            best = Some(result);
        }
        if budget.expired() {
            if let Some(b) = best.as_mut() {
                b.status = EmStatus::DeadlineExpired;
            }
            break;
        }
    }
    Ok(best.expect("at least one restart"))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Three-state line 0 - 1 - 2 with actions {left, right}; state 1 is
    /// occluded.
    fn line() -> (Mdp, FeatureSet, OcclusionModel) {
        let mut t = Vec::new();
        for s in 0..3usize {
            t.push(vec![(s.saturating_sub(1), 1.0)]);
            t.push(vec![((s + 1).min(2), 1.0)]);
        }
        let mdp = Mdp::new(3, 2, t, 0.9, vec![1.0 / 3.0; 3]).unwrap();
        let f =
            FeatureSet::from_fn(3, 2, 2, |s, a, k| if k == 0 { a == 1 } else { s == 2 }).unwrap();
        let occ = OcclusionModel::new(3, [1]).unwrap();
        (mdp, f, occ)
    }

    #[test]
    fn no_hidden_steps_single_empty_completion() {
        let (mdp, _, occ) = line();
        let y = ObservedTrajectory::new(vec![Step::Observed(0, 1)]).unwrap();
        let c = enumerate_completions(&y, &mdp, &occ, 4).unwrap();
        assert_eq!(
            c,
            vec![Completion {
                assignments: vec![]
            }]
        );
    }

    #[test]
    fn one_hidden_step_two_actions() {
        let (mdp, f, occ) = line();
        // 0 --right--> [1] --right--> 2
        let y = ObservedTrajectory::new(vec![
            Step::Observed(0, 1),
            Step::Hidden,
            Step::Observed(2, 0),
        ])
        .unwrap();
        let c = enumerate_completions(&y, &mdp, &occ, 4).unwrap();
        // only "right" from state 1 reaches 2
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].assignments, vec![(1, 1)]);
        let p = posterior_over_completions(&y, &c, &RewardWeights::zeros(2), &mdp, &f).unwrap();
        assert_eq!(p, vec![1.0]);
        // trailing gap: both actions feasible
        let y2 = ObservedTrajectory::new(vec![Step::Observed(0, 1), Step::Hidden]).unwrap();
        let c2 = enumerate_completions(&y2, &mdp, &occ, 4).unwrap();
        assert_eq!(c2.len(), 2);
        let p2 = posterior_over_completions(&y2, &c2, &RewardWeights::zeros(2), &mdp, &f).unwrap();
        assert!((p2[0] - 0.5).abs() < 1e-12 && (p2[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn odds_follow_exponentiated_reward() {
        let (mdp, f, occ) = line();
        // hidden at t = 2; completions (1, left) and (1, right) differ in feature 0
        let y2 = ObservedTrajectory::new(vec![Step::Observed(0, 1), Step::Hidden]).unwrap();
        let c = enumerate_completions(&y2, &mdp, &occ, 4).unwrap();
        let theta0 = 2f64.ln() / 0.81;
        assert!(theta0 <= 1.0);
        let theta = RewardWeights::new(vec![theta0, 0.0]).unwrap();
        let p = posterior_over_completions(&y2, &c, &theta, &mdp, &f).unwrap();
        let right = c.iter().position(|c| c.assignments[0].1 == 1).unwrap();
        assert!((p[right] / p[1 - right] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn gap_too_long_and_infeasible() {
        let (mdp, _, occ) = line();
        let y = ObservedTrajectory::new(vec![Step::Observed(0, 1), Step::Hidden, Step::Hidden])
            .unwrap();
        assert!(matches!(
            enumerate_completions(&y, &mdp, &occ, 1),
            Err(IrlError::GapTooLong { len: 2, .. })
        ));
        // from 0 moving left stays in 0, which is visible: the hidden step cannot be filled
        let bad = ObservedTrajectory::new(vec![Step::Observed(0, 0), Step::Hidden]).unwrap();
        assert!(matches!(
            enumerate_completions(&bad, &mdp, &occ, 4),
            Err(IrlError::Infeasible { start: 2, end: 2 })
        ));
    }

    #[test]
    fn hidden_step_expectation_arithmetic() {
        let (mdp, _, occ) = line();
        let f = FeatureSet::from_fn(3, 2, 1, |s, a, _| s == 1 && a == 1).unwrap();
        let y = ObservedTrajectory::new(vec![Step::Observed(0, 1), Step::Hidden]).unwrap();
        let cfg = EmConfig::default();
        let e = latent_feature_expectations(&[y], &RewardWeights::zeros(1), &mdp, &f, &occ, &cfg)
            .unwrap();
        assert!((e[0] - 0.405).abs() < 1e-12);
    }

    #[test]
    fn sampled_frequency_near_half() {
        let (mdp, f, occ) = line();
        let y = ObservedTrajectory::new(vec![Step::Observed(0, 1), Step::Hidden]).unwrap();
        let n = 4000;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s =
            sample_completions(&y, &RewardWeights::zeros(2), &mdp, &f, &occ, n, &mut rng).unwrap();
        let right = s.iter().filter(|(c, _)| c.assignments[0].1 == 1).count() as f64 / n as f64;
        assert!((right - 0.5).abs() <= 3.0 / (n as f64).sqrt());
    }

    #[test]
    fn single_completion_samples_identical() {
        let (mdp, f, occ) = line();
        let y = ObservedTrajectory::new(vec![
            Step::Observed(0, 1),
            Step::Hidden,
            Step::Observed(2, 0),
        ])
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s =
            sample_completions(&y, &RewardWeights::zeros(2), &mdp, &f, &occ, 50, &mut rng).unwrap();
        assert!(s
            .iter()
            .all(|(c, w)| c.assignments == vec![(1, 1)] && (*w - 0.02).abs() < 1e-15));
    }

    #[test]
    fn validation_rejects_observed_occluded_state() {
        let (mdp, _, occ) = line();
        let y = ObservedTrajectory::new(vec![Step::Observed(1, 0)]).unwrap();
        assert!(y.validate(&mdp, &occ).is_err());
    }

    #[test]
    fn fully_hidden_degenerate_ll_is_zero() {
        let (mdp, f, _) = line();
        let all = OcclusionModel::new(3, [0, 1, 2]).unwrap();
        let y = ObservedTrajectory::new(vec![Step::Hidden, Step::Hidden]).unwrap();
        let theta = RewardWeights::new(vec![0.4, 0.9]).unwrap();
        let ll = observed_ll(&theta, &[y], &mdp, &f, &all, &EmConfig::default()).unwrap();
        assert!(ll.abs() < 1e-12);
    }
}
