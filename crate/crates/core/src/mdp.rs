//! Finite discounted MDPs and their exact solvers.
//!
//! Rewards are passed separately from the model as a state-major table
//! `reward[s * n_actions + a]`, since the learner knows every part of the
//! expert's MDP except its reward.
//!
//! Solver tolerances bound the sup-norm distance of the returned values to
//! the true fixed point; the successive-iterate residual at termination is
//! therefore always well below `tol`.

use serde::{Deserialize, Serialize};

use crate::error::{IrlError, Result};

const STOCHASTIC_EPS: f64 = 1e-9;
/// Q-values within this distance of the row maximum count as tied.
const TIE_EPS: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct Mdp {
    n_states: usize,
    n_actions: usize,
    /// Sparse successor lists, indexed by `s * n_actions + a`.
    transitions: Vec<Vec<(usize, f64)>>,
    discount: f64,
    start: Vec<f64>,
}

impl Mdp {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transitions: Vec<Vec<(usize, f64)>>,
        discount: f64,
        start: Vec<f64>,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(IrlError::InvalidModel("empty state or action set".into()));
        }
        if !(discount > 0.0 && discount < 1.0) {
            return Err(IrlError::InvalidModel(format!(
                "discount {discount} outside (0, 1)"
            )));
        }
        if transitions.len() != n_states * n_actions {
            return Err(IrlError::Dimension {
                expected: n_states * n_actions,
                got: transitions.len(),
            });
        }
        if start.len() != n_states {
            return Err(IrlError::Dimension {
                expected: n_states,
                got: start.len(),
            });
        }
        let mut cleaned = Vec::with_capacity(transitions.len());
        for (idx, row) in transitions.into_iter().enumerate() {
            let (s, a) = (idx / n_actions, idx % n_actions);
            let mut sum = 0.0;
            let mut kept = Vec::with_capacity(row.len());
            for (next, p) in row {
                if next >= n_states {
                    return Err(IrlError::InvalidModel(format!(
                        "T(.|{s},{a}) points at unknown state {next}"
                    )));
                }
                if !(0.0..=1.0).contains(&p) {
                    return Err(IrlError::InvalidModel(format!(
                        "T({next}|{s},{a}) = {p} is not a probability"
                    )));
                }
                sum += p;
                if p > 0.0 {
                    kept.push((next, p));
                }
            }
            if (sum - 1.0).abs() > STOCHASTIC_EPS {
                return Err(IrlError::InvalidModel(format!(
                    "T(.|{s},{a}) sums to {sum}"
                )));
            }
            kept.sort_by_key(|&(n, _)| n);
            cleaned.push(kept);
        }
        let total: f64 = start.iter().sum();
        if start.iter().any(|p| !(0.0..=1.0).contains(p)) || (total - 1.0).abs() > STOCHASTIC_EPS {
            return Err(IrlError::InvalidModel(format!(
                "start distribution sums to {total}"
            )));
        }
        Ok(Self {
            n_states,
            n_actions,
            transitions: cleaned,
            discount,
            start,
        })
    }

    /// Builds a model from a dense `T[s][a][s']` table.
    pub fn from_dense(
        n_states: usize,
        n_actions: usize,
        dense: &[f64],
        discount: f64,
        start: Vec<f64>,
    ) -> Result<Self> {
        if dense.len() != n_states * n_actions * n_states {
            return Err(IrlError::Dimension {
                expected: n_states * n_actions * n_states,
                got: dense.len(),
            });
        }
        let transitions = dense
            .chunks(n_states)
            .map(|row| row.iter().copied().enumerate().collect())
            .collect();
        Self::new(n_states, n_actions, transitions, discount, start)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn start(&self) -> &[f64] {
        &self.start
    }

    #[inline]
    pub fn sa(&self, s: usize, a: usize) -> usize {
        s * self.n_actions + a
    }

    #[inline]
    pub fn successors(&self, s: usize, a: usize) -> &[(usize, f64)] {
        &self.transitions[s * self.n_actions + a]
    }

    pub fn transition_prob(&self, s: usize, a: usize, next: usize) -> f64 {
        self.successors(s, a)
            .iter()
            .find(|&&(n, _)| n == next)
            .map_or(0.0, |&(_, p)| p)
    }

    /// Number of non-zero transition entries; the unit cost of one sweep.
    pub fn support_size(&self) -> usize {
        self.transitions.iter().map(Vec::len).sum()
    }

    /// Same model with a different start distribution.
    pub fn with_start(&self, start: Vec<f64>) -> Result<Self> {
        Self::new(
            self.n_states,
            self.n_actions,
            self.transitions.clone(),
            self.discount,
            start,
        )
    }

    pub fn check_reward(&self, reward: &[f64]) -> Result<()> {
        if reward.len() != self.n_states * self.n_actions {
            return Err(IrlError::Dimension {
                expected: self.n_states * self.n_actions,
                got: reward.len(),
            });
        }
        if reward.iter().any(|r| !r.is_finite()) {
            return Err(IrlError::InvalidParameter("reward is not finite".into()));
        }
        Ok(())
    }

    fn expected_next(&self, s: usize, a: usize, values: &[f64]) -> f64 {
        self.successors(s, a)
            .iter()
            .map(|&(n, p)| p * values[n])
            .sum()
    }

    /// `Q(s,a) = R(s,a) + γ Σ_{s'} T(s'|s,a) V(s')`, state-major.
    pub fn q_values(&self, reward: &[f64], values: &[f64]) -> Vec<f64> {
        (0..self.n_states * self.n_actions)
            .map(|idx| {
                let (s, a) = (idx / self.n_actions, idx % self.n_actions);
                reward[idx] + self.discount * self.expected_next(s, a, values)
            })
            .collect()
    }

    /// Parses the TOML model schema documented in the README.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: MdpFile = toml::from_str(text).map_err(|e| IrlError::Config(e.to_string()))?;
        file.into_mdp()
    }
}

/// On-disk MDP description.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MdpFile {
    pub states: usize,
    pub actions: usize,
    pub discount: f64,
    pub start: Vec<f64>,
    pub transitions: Vec<TransitionEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransitionEntry {
    pub state: usize,
    pub action: usize,
    pub next: usize,
    pub prob: f64,
}

impl MdpFile {
    pub fn into_mdp(self) -> Result<Mdp> {
        let mut rows = vec![Vec::new(); self.states * self.actions];
        for e in &self.transitions {
            if e.state >= self.states || e.action >= self.actions {
                return Err(IrlError::InvalidModel(format!(
                    "transition entry ({}, {}) out of range",
                    e.state, e.action
                )));
            }
            rows[e.state * self.actions + e.action].push((e.next, e.prob));
        }
        Mdp::new(self.states, self.actions, rows, self.discount, self.start)
    }

    pub fn from_mdp(mdp: &Mdp) -> Self {
        let mut transitions = Vec::new();
        for s in 0..mdp.n_states() {
            for a in 0..mdp.n_actions() {
                for &(next, prob) in mdp.successors(s, a) {
                    transitions.push(TransitionEntry {
                        state: s,
                        action: a,
                        next,
                        prob,
                    });
                }
            }
        }
        Self {
            states: mdp.n_states(),
            actions: mdp.n_actions(),
            discount: mdp.discount(),
            start: mdp.start().to_vec(),
            transitions,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Policy {
    /// One action per state.
    Deterministic(Vec<usize>),
    /// State-major action distribution, `n_states * n_actions` entries.
    Stochastic { n_actions: usize, probs: Vec<f64> },
}

impl Policy {
    pub fn n_states(&self) -> usize {
        match self {
            Policy::Deterministic(actions) => actions.len(),
            Policy::Stochastic { n_actions, probs } => probs.len() / n_actions,
        }
    }

    pub fn as_deterministic(&self) -> Option<&[usize]> {
        match self {
            Policy::Deterministic(actions) => Some(actions),
            Policy::Stochastic { .. } => None,
        }
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        match self {
            Policy::Deterministic(actions) => f64::from(u8::from(actions[s] == a)),
            Policy::Stochastic { n_actions, probs } => probs[s * n_actions + a],
        }
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Policy::Stochastic {
            n_actions,
            probs: vec![1.0 / n_actions as f64; n_states * n_actions],
        }
    }

    fn validate(&self, mdp: &Mdp) -> Result<()> {
        if self.n_states() != mdp.n_states() {
            return Err(IrlError::Dimension {
                expected: mdp.n_states(),
                got: self.n_states(),
            });
        }
        match self {
            Policy::Deterministic(actions) => {
                if let Some(&a) = actions.iter().find(|&&a| a >= mdp.n_actions()) {
                    return Err(IrlError::InvalidParameter(format!("unknown action {a}")));
                }
            }
            Policy::Stochastic { n_actions, probs } => {
                if *n_actions != mdp.n_actions() {
                    return Err(IrlError::Dimension {
                        expected: mdp.n_actions(),
                        got: *n_actions,
                    });
                }
                for (s, row) in probs.chunks(*n_actions).enumerate() {
                    let sum: f64 = row.iter().sum();
                    if (sum - 1.0).abs() > STOCHASTIC_EPS {
                        return Err(IrlError::InvalidParameter(format!(
                            "policy row {s} sums to {sum}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValueFunction {
    values: Vec<f64>,
}

impl ValueFunction {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Expected value under a start distribution.
    pub fn expected(&self, start: &[f64]) -> f64 {
        self.values.iter().zip(start).map(|(v, p)| v * p).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    /// Bound on the sup-norm distance to the fixed point.
    pub tol: f64,
    pub max_iterations: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iterations: 10_000,
        }
    }
}

impl SolveOptions {
    pub fn with_tol(tol: f64) -> Self {
        Self {
            tol,
            ..Self::default()
        }
    }

    fn check(&self) -> Result<()> {
        if !(self.tol > 0.0) || self.max_iterations == 0 {
            return Err(IrlError::InvalidParameter(format!(
                "solver tolerance {} / cap {} must be positive",
                self.tol, self.max_iterations
            )));
        }
        Ok(())
    }

    /// Residual threshold that guarantees `tol` distance to the fixed point
    /// for a γ-contraction.
    fn residual_threshold(&self, discount: f64) -> f64 {
        self.tol * (1.0 - discount) / (2.0 * discount)
    }
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub values: ValueFunction,
    pub policy: Policy,
    /// State-major Q-table at the returned values.
    pub q: Vec<f64>,
    /// Sup-norm residual of every sweep.
    pub residuals: Vec<f64>,
}

fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn iterate<F>(
    mdp: &Mdp,
    opts: &SolveOptions,
    what: &'static str,
    mut backup: F,
) -> Result<(Vec<f64>, Vec<f64>)>
where
    F: FnMut(&[f64], &mut [f64]),
{
    opts.check()?;
    let threshold = opts.residual_threshold(mdp.discount());
    let mut values = vec![0.0; mdp.n_states()];
    let mut next = vec![0.0; mdp.n_states()];
    let mut residuals = Vec::new();
    for _ in 0..opts.max_iterations {
        backup(&values, &mut next);
        let residual = sup_diff(&values, &next);
        residuals.push(residual);
        std::mem::swap(&mut values, &mut next);
        if residual <= threshold {
            return Ok((values, residuals));
        }
    }
    Err(IrlError::Convergence {
        what,
        iterations: opts.max_iterations,
        residual: residuals.last().copied().unwrap_or(f64::INFINITY),
    })
}

/// Greedy action per state; ties go to the lowest action index.
pub fn greedy_policy(mdp: &Mdp, q: &[f64]) -> Vec<usize> {
    q.chunks(mdp.n_actions())
        .map(|row| {
            let best = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.iter()
                .position(|&v| v >= best - TIE_EPS * (1.0 + best.abs()))
                .unwrap_or(0)
        })
        .collect()
}

/// Hard value iteration.
pub fn solve_optimal(mdp: &Mdp, reward: &[f64], opts: &SolveOptions) -> Result<Solution> {
    mdp.check_reward(reward)?;
    let n_actions = mdp.n_actions();
    let (values, residuals) = iterate(mdp, opts, "value iteration", |v, out| {
        for (s, slot) in out.iter_mut().enumerate() {
            *slot = (0..n_actions)
                .map(|a| reward[mdp.sa(s, a)] + mdp.discount() * mdp.expected_next(s, a, v))
                .fold(f64::NEG_INFINITY, f64::max);
        }
    })?;
    let q = mdp.q_values(reward, &values);
    let policy = Policy::Deterministic(greedy_policy(mdp, &q));
    Ok(Solution {
        values: ValueFunction::new(values),
        policy,
        q,
        residuals,
    })
}

pub(crate) fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Soft (log-sum-exp, temperature 1) value iteration.
pub fn solve_soft(mdp: &Mdp, reward: &[f64], opts: &SolveOptions) -> Result<Solution> {
    mdp.check_reward(reward)?;
    let n_actions = mdp.n_actions();
    let (values, residuals) = iterate(mdp, opts, "soft value iteration", |v, out| {
        for (s, slot) in out.iter_mut().enumerate() {
            *slot = log_sum_exp(
                (0..n_actions)
                    .map(|a| reward[mdp.sa(s, a)] + mdp.discount() * mdp.expected_next(s, a, v)),
            );
        }
    })?;
    let q = mdp.q_values(reward, &values);
    let mut probs = Vec::with_capacity(q.len());
    for row in q.chunks(n_actions) {
        let norm = log_sum_exp(row.iter().copied());
        let start = probs.len();
        probs.extend(row.iter().map(|&x| (x - norm).exp()));
        let sum: f64 = probs[start..].iter().sum();
        probs[start..].iter_mut().for_each(|p| *p /= sum);
    }
    Ok(Solution {
        values: ValueFunction::new(values),
        policy: Policy::Stochastic { n_actions, probs },
        q,
        residuals,
    })
}

pub fn evaluate_policy(
    mdp: &Mdp,
    reward: &[f64],
    policy: &Policy,
    opts: &SolveOptions,
) -> Result<ValueFunction> {
    mdp.check_reward(reward)?;
    policy.validate(mdp)?;
    let n_actions = mdp.n_actions();
    let (values, _) = iterate(mdp, opts, "policy evaluation", |v, out| {
        for (s, slot) in out.iter_mut().enumerate() {
            *slot = match policy {
                Policy::Deterministic(actions) => {
                    let a = actions[s];
                    reward[mdp.sa(s, a)] + mdp.discount() * mdp.expected_next(s, a, v)
                }
                Policy::Stochastic { probs, .. } => (0..n_actions)
                    .filter(|&a| probs[s * n_actions + a] > 0.0)
                    .map(|a| {
                        probs[s * n_actions + a]
                            * (reward[mdp.sa(s, a)] + mdp.discount() * mdp.expected_next(s, a, v))
                    })
                    .sum(),
            };
        }
    })?;
    Ok(ValueFunction::new(values))
}

/// Inverse learning error: `‖V_expert − V_learned‖₁`.
pub fn ile(expert: &ValueFunction, learned: &ValueFunction) -> Result<f64> {
    if expert.len() != learned.len() {
        return Err(IrlError::Dimension {
            expected: expert.len(),
            got: learned.len(),
        });
    }
    Ok(expert
        .values()
        .iter()
        .zip(learned.values())
        .map(|(a, b)| (a - b).abs())
        .sum())
}

/// Learned behavior accuracy: percentage of states where both policies
/// pick the same action.
pub fn lba(expert: &Policy, learned: &Policy) -> Result<f64> {
    let (Some(e), Some(l)) = (expert.as_deterministic(), learned.as_deterministic()) else {
        return Err(IrlError::InvalidParameter(
            "LBA compares deterministic policies".into(),
        ));
    };
    if e.len() != l.len() {
        return Err(IrlError::Dimension {
            expected: e.len(),
            got: l.len(),
        });
    }
    if e.is_empty() {
        return Err(IrlError::EmptyInput("policy over empty state set"));
    }
    let agree = e.iter().zip(l).filter(|(a, b)| a == b).count();
    Ok(100.0 * agree as f64 / e.len() as f64)
}
