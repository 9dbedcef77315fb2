//! Tabular MDPs, policy evaluation, optimal control and ε-balls.
//!
//! Dynamics are stored densely as a flat `[state][action][next_state]`
//! tensor. Rewards are `R(s, a)`; environments that define rewards on state
//! entry are converted with [`Rewards::from_entry_rewards`].

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Absolute tolerance used for ε-ball membership.
pub const BALL_TOL: f64 = 1e-9;
/// Tolerance on the separation part of the ε-ball property.
pub const SEPARATION_TOL: f64 = 1e-7;
/// Row sums must match one to within this tolerance.
pub const SIMPLEX_TOL: f64 = 1e-9;

pub(crate) const VI_MAX_SWEEPS: usize = 1_000_000;

/// Transition tensor `T(s' | s, a)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dynamics {
    n_states: usize,
    n_actions: usize,
    data: Vec<f64>,
}

impl Dynamics {
    /// Builds a tensor and checks that every row lies on the simplex.
    pub fn new(n_states: usize, n_actions: usize, data: Vec<f64>) -> Result<Self> {
        let t = Self::from_raw(n_states, n_actions, data)?;
        t.validate(SIMPLEX_TOL)?;
        Ok(t)
    }

    /// Builds a tensor checking only the shape.
    pub fn from_raw(n_states: usize, n_actions: usize, data: Vec<f64>) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return invalid("dynamics need at least one state and one action");
        }
        if data.len() != n_states * n_actions * n_states {
            return invalid(format!(
                "dynamics length {} does not match {}x{}x{}",
                data.len(),
                n_states,
                n_actions,
                n_states
            ));
        }
        Ok(Self {
            n_states,
            n_actions,
            data,
        })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        let p = 1.0 / n_states as f64;
        Self {
            n_states,
            n_actions,
            data: vec![p; n_states * n_actions * n_states],
        }
    }

    pub fn from_fn(
        n_states: usize,
        n_actions: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(n_states * n_actions * n_states);
        for s in 0..n_states {
            for a in 0..n_actions {
                for sp in 0..n_states {
                    data.push(f(s, a, sp));
                }
            }
        }
        Self {
            n_states,
            n_actions,
            data,
        }
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn n_rows(&self) -> usize {
        self.n_states * self.n_actions
    }

    #[inline]
    pub fn index(&self, s: usize, a: usize, sp: usize) -> usize {
        (s * self.n_actions + a) * self.n_states + sp
    }

    #[inline]
    pub fn get(&self, s: usize, a: usize, sp: usize) -> f64 {
        self.data[self.index(s, a, sp)]
    }

    #[inline]
    pub fn row(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.n_actions + a) * self.n_states;
        &self.data[start..start + self.n_states]
    }

    #[inline]
    pub fn row_mut(&mut self, s: usize, a: usize) -> &mut [f64] {
        let start = (s * self.n_actions + a) * self.n_states;
        &mut self.data[start..start + self.n_states]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn same_shape(&self, other: &Dynamics) -> bool {
        self.n_states == other.n_states && self.n_actions == other.n_actions
    }

    /// Checks nonnegativity and unit row sums.
    pub fn validate(&self, tol: f64) -> Result<()> {
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                let row = self.row(s, a);
                if let Some(p) = row.iter().find(|p| !p.is_finite() || **p < 0.0) {
                    return invalid(format!("T(.|{s},{a}) has entry {p}"));
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > tol {
                    return invalid(format!("T(.|{s},{a}) sums to {sum}"));
                }
            }
        }
        Ok(())
    }

    /// `T_π(s, s') = Σ_a π(a|s) T(s'|s, a)`.
    pub fn under_policy(&self, policy: &Policy) -> DMatrix<f64> {
        let n = self.n_states;
        let mut m = DMatrix::zeros(n, n);
        for s in 0..n {
            for a in 0..self.n_actions {
                let p = policy.prob(s, a);
                if p == 0.0 {
                    continue;
                }
                for (sp, &t) in self.row(s, a).iter().enumerate() {
                    m[(s, sp)] += p * t;
                }
            }
        }
        m
    }
}

/// Reward table `R(s, a)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rewards {
    n_states: usize,
    n_actions: usize,
    data: Vec<f64>,
}

impl Rewards {
    pub fn new(n_states: usize, n_actions: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n_states * n_actions {
            return invalid(format!(
                "reward table length {} does not match {}x{}",
                data.len(),
                n_states,
                n_actions
            ));
        }
        if data.iter().any(|r| !r.is_finite()) {
            return invalid("reward table contains non-finite entries");
        }
        Ok(Self {
            n_states,
            n_actions,
            data,
        })
    }

    pub fn zeros(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_states,
            n_actions,
            data: vec![0.0; n_states * n_actions],
        }
    }

    /// `R(s, a) = r(s)` for every action.
    pub fn from_state_rewards(state_rewards: &[f64], n_actions: usize) -> Self {
        let n_states = state_rewards.len();
        let data = state_rewards
            .iter()
            .flat_map(|&r| std::iter::repeat_n(r, n_actions))
            .collect();
        Self {
            n_states,
            n_actions,
            data,
        }
    }

    /// `R(s, a) = Σ_{s'} T(s'|s, a) r(s')` for rewards collected on entering `s'`.
    pub fn from_entry_rewards(dynamics: &Dynamics, entry: &[f64]) -> Self {
        let (n, m) = (dynamics.n_states(), dynamics.n_actions());
        let mut data = Vec::with_capacity(n * m);
        for s in 0..n {
            for a in 0..m {
                data.push(dot(dynamics.row(s, a), entry));
            }
        }
        Self {
            n_states: n,
            n_actions: m,
            data,
        }
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    #[inline]
    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.data[s * self.n_actions + a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.data[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// `R_π(s) = Σ_a π(a|s) R(s, a)`.
    pub fn under_policy(&self, policy: &Policy) -> DVector<f64> {
        DVector::from_iterator(
            self.n_states,
            (0..self.n_states).map(|s| dot(policy.row(s), self.row(s))),
        )
    }

    pub(crate) fn check_against(&self, t: &Dynamics) -> Result<()> {
        if self.n_states != t.n_states() || self.n_actions != t.n_actions() {
            return invalid(format!(
                "rewards are {}x{} but dynamics are {}x{}",
                self.n_states,
                self.n_actions,
                t.n_states(),
                t.n_actions()
            ));
        }
        Ok(())
    }
}

/// Row-stochastic map from states to action distributions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    n_states: usize,
    n_actions: usize,
    probs: Vec<f64>,
}

impl Policy {
    pub fn new(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != n_states * n_actions {
            return invalid("policy table has the wrong length");
        }
        let p = Self {
            n_states,
            n_actions,
            probs,
        };
        for s in 0..n_states {
            let row = p.row(s);
            if row.iter().any(|x| !x.is_finite() || *x < 0.0) {
                return invalid(format!("policy row {s} has a negative entry"));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > SIMPLEX_TOL {
                return invalid(format!("policy row {s} sums to {sum}"));
            }
        }
        Ok(p)
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_states,
            n_actions,
            probs: vec![1.0 / n_actions as f64; n_states * n_actions],
        }
    }

    /// One-hot policy taking `actions[s]` in state `s`.
    pub fn deterministic(n_actions: usize, actions: &[usize]) -> Self {
        let n_states = actions.len();
        let mut probs = vec![0.0; n_states * n_actions];
        for (s, &a) in actions.iter().enumerate() {
            probs[s * n_actions + a] = 1.0;
        }
        Self {
            n_states,
            n_actions,
            probs,
        }
    }

    /// Uniform over the given action set in each state.
    pub fn uniform_over(n_actions: usize, sets: &[Vec<usize>]) -> Self {
        let n_states = sets.len();
        let mut probs = vec![0.0; n_states * n_actions];
        for (s, set) in sets.iter().enumerate() {
            let p = 1.0 / set.len() as f64;
            for &a in set {
                probs[s * n_actions + a] = p;
            }
        }
        Self {
            n_states,
            n_actions,
            probs,
        }
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    #[inline]
    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.n_actions + a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn row_mut(&mut self, s: usize) -> &mut [f64] {
        &mut self.probs[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.probs
    }

    /// Most probable action, lowest index on ties.
    pub fn argmax(&self, s: usize) -> usize {
        argmax(self.row(s))
    }

    /// Actions with nonzero probability.
    pub fn support(&self, s: usize) -> Vec<usize> {
        (0..self.n_actions)
            .filter(|&a| self.prob(s, a) > 0.0)
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueMethod {
    ClosedForm,
    Iterative,
}

/// State and state-action values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueResult {
    pub v: Vec<f64>,
    /// `q[s * n_actions + a]`.
    pub q: Vec<f64>,
    pub n_actions: usize,
    pub method: ValueMethod,
}

impl ValueResult {
    pub fn n_states(&self) -> usize {
        self.v.len()
    }

    #[inline]
    pub fn q(&self, s: usize, a: usize) -> f64 {
        self.q[s * self.n_actions + a]
    }

    pub fn q_row(&self, s: usize) -> &[f64] {
        &self.q[s * self.n_actions..(s + 1) * self.n_actions]
    }
}

/// Per-state sets of actions within ε of the best Q-value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpsilonBall {
    pub per_state: Vec<Vec<usize>>,
    pub epsilon: f64,
}

impl EpsilonBall {
    pub fn contains(&self, s: usize, a: usize) -> bool {
        self.per_state[s].contains(&a)
    }

    /// Fraction of states with more than one valid action.
    pub fn stochastic_fraction(&self) -> f64 {
        let multi = self.per_state.iter().filter(|b| b.len() > 1).count();
        multi as f64 / self.per_state.len() as f64
    }
}

/// A complete tabular MDP. `dynamics` is absent when the true transition
/// model is unknown.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularMdp {
    pub n_states: usize,
    pub n_actions: usize,
    pub dynamics: Option<Dynamics>,
    pub reward: Rewards,
    pub discount: f64,
    pub initial_dist: Vec<f64>,
}

impl TabularMdp {
    pub fn new(
        dynamics: Option<Dynamics>,
        reward: Rewards,
        discount: f64,
        initial_dist: Vec<f64>,
    ) -> Result<Self> {
        let (n_states, n_actions) = (reward.n_states(), reward.n_actions());
        if let Some(t) = &dynamics {
            reward.check_against(t)?;
            t.validate(SIMPLEX_TOL)?;
        }
        if !(0.0..1.0).contains(&discount) {
            return invalid(format!("discount {discount} must lie in [0, 1)"));
        }
        if initial_dist.len() != n_states {
            return invalid("initial distribution has the wrong length");
        }
        let sum: f64 = initial_dist.iter().sum();
        if initial_dist.iter().any(|p| *p < 0.0) || (sum - 1.0).abs() > SIMPLEX_TOL {
            return invalid(format!("initial distribution sums to {sum}"));
        }
        Ok(Self {
            n_states,
            n_actions,
            dynamics,
            reward,
            discount,
            initial_dist,
        })
    }

    pub fn true_dynamics(&self) -> Result<&Dynamics> {
        self.dynamics
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("MDP has no dynamics".into()))
    }

    pub fn evaluate_policy_closed_form(&self, policy: &Policy) -> Result<ValueResult> {
        evaluate_policy(self.true_dynamics()?, &self.reward, self.discount, policy)
    }

    pub fn value_iteration(&self, tol: f64) -> Result<ValueResult> {
        value_iteration(self.true_dynamics()?, &self.reward, self.discount, tol)
    }

    pub fn optimal_values(&self) -> Result<ValueResult> {
        optimal_values(self.true_dynamics()?, &self.reward, self.discount)
    }

    /// Same MDP with a different reward table.
    pub fn with_rewards(&self, reward: Rewards) -> Result<Self> {
        Self::new(
            self.dynamics.clone(),
            reward,
            self.discount,
            self.initial_dist.clone(),
        )
    }

    /// `E_{s0 ~ μ0}[v(s0)]`.
    pub fn expected_start_value(&self, v: &[f64]) -> f64 {
        dot(&self.initial_dist, v)
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let spec: MdpSpecFile = serde_json::from_str(&text)?;
        spec.into_mdp()
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(&MdpSpecFile::from_mdp(self))?;
        std::fs::write(path, text)?;
        Ok(())
    }
}

/// On-disk MDP description with dense nested tables.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MdpSpecFile {
    pub n_states: usize,
    pub n_actions: usize,
    pub gamma: f64,
    pub reward: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dynamics: Option<Vec<Vec<Vec<f64>>>>,
    pub initial_dist: Vec<f64>,
}

impl MdpSpecFile {
    pub fn from_mdp(mdp: &TabularMdp) -> Self {
        let (n, m) = (mdp.n_states, mdp.n_actions);
        Self {
            n_states: n,
            n_actions: m,
            gamma: mdp.discount,
            reward: (0..n).map(|s| mdp.reward.row(s).to_vec()).collect(),
            dynamics: mdp.dynamics.as_ref().map(|t| {
                (0..n)
                    .map(|s| (0..m).map(|a| t.row(s, a).to_vec()).collect())
                    .collect()
            }),
            initial_dist: mdp.initial_dist.clone(),
        }
    }

    pub fn into_mdp(self) -> Result<TabularMdp> {
        let (n, m) = (self.n_states, self.n_actions);
        if self.reward.len() != n || self.reward.iter().any(|r| r.len() != m) {
            return invalid("reward table does not match n_states x n_actions");
        }
        let reward = Rewards::new(n, m, self.reward.into_iter().flatten().collect())?;
        let dynamics = match self.dynamics {
            None => None,
            Some(t) => {
                if t.len() != n || t.iter().any(|rows| rows.len() != m) {
                    return invalid("dynamics do not match n_states x n_actions");
                }
                let flat: Vec<f64> = t.into_iter().flatten().flatten().collect();
                Some(Dynamics::new(n, m, flat)?)
            }
        };
        TabularMdp::new(dynamics, reward, self.gamma, self.initial_dist)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn q_from_v(t: &Dynamics, r: &Rewards, gamma: f64, v: &[f64]) -> Vec<f64> {
    let (n, m) = (t.n_states(), t.n_actions());
    let mut q = Vec::with_capacity(n * m);
    for s in 0..n {
        for a in 0..m {
            q.push(r.get(s, a) + gamma * dot(t.row(s, a), v));
        }
    }
    q
}

/// Solves `(I - γ T_π) v = R_π` by LU decomposition.
pub fn solve_values(t: &Dynamics, r: &Rewards, gamma: f64, policy: &Policy) -> Result<Vec<f64>> {
    let n = t.n_states();
    let mut system = t.under_policy(policy);
    system *= -gamma;
    for i in 0..n {
        system[(i, i)] += 1.0;
    }
    let rhs = r.under_policy(policy);
    let v = system
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Singular("I - γT_π is not invertible".into()))?;
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Singular("policy value is not finite".into()));
    }
    Ok(v.iter().copied().collect())
}

/// Exact `V^π` and `Q^π` through the closed-form linear solve.
pub fn evaluate_policy(
    t: &Dynamics,
    r: &Rewards,
    gamma: f64,
    policy: &Policy,
) -> Result<ValueResult> {
    r.check_against(t)?;
    if policy.n_states() != t.n_states() || policy.n_actions() != t.n_actions() {
        return invalid("policy shape does not match the dynamics");
    }
    let v = solve_values(t, r, gamma, policy)?;
    let q = q_from_v(t, r, gamma, &v);
    Ok(ValueResult {
        v,
        q,
        n_actions: t.n_actions(),
        method: ValueMethod::ClosedForm,
    })
}

/// Iterative policy evaluation; stops once the sup-norm error bound is below `tol`.
pub fn evaluate_policy_iterative(
    t: &Dynamics,
    r: &Rewards,
    gamma: f64,
    policy: &Policy,
    tol: f64,
) -> Result<ValueResult> {
    r.check_against(t)?;
    let (n, m) = (t.n_states(), t.n_actions());
    let threshold = stop_threshold(gamma, tol);
    let mut v = vec![0.0; n];
    let mut residual = f64::INFINITY;
    for _ in 0..VI_MAX_SWEEPS {
        let mut next = vec![0.0; n];
        for (s, out) in next.iter_mut().enumerate() {
            *out = (0..m)
                .map(|a| policy.prob(s, a) * (r.get(s, a) + gamma * dot(t.row(s, a), &v)))
                .sum();
        }
        residual = sup_diff(&next, &v);
        v = next;
        if residual <= threshold {
            let q = q_from_v(t, r, gamma, &v);
            return Ok(ValueResult {
                v,
                q,
                n_actions: m,
                method: ValueMethod::Iterative,
            });
        }
    }
    Err(Error::NotConverged {
        what: "policy evaluation",
        iterations: VI_MAX_SWEEPS,
        residual,
    })
}

pub(crate) fn stop_threshold(gamma: f64, tol: f64) -> f64 {
    if gamma == 0.0 {
        tol
    } else {
        tol * ((1.0 - gamma) / gamma).min(1.0)
    }
}

pub(crate) fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Optimal values by Bellman sweeps. The sweep stops once both the Bellman
/// residual and the implied distance to `V*` are at most `tol`.
pub fn value_iteration(t: &Dynamics, r: &Rewards, gamma: f64, tol: f64) -> Result<ValueResult> {
    if tol <= 0.0 {
        return invalid("value iteration tolerance must be positive");
    }
    r.check_against(t)?;
    let (n, m) = (t.n_states(), t.n_actions());
    let threshold = stop_threshold(gamma, tol);
    let mut v = vec![0.0; n];
    let mut residual = f64::INFINITY;
    for _ in 0..VI_MAX_SWEEPS {
        let q = q_from_v(t, r, gamma, &v);
        let next: Vec<f64> = (0..n)
            .map(|s| {
                q[s * m..(s + 1) * m]
                    .iter()
                    .copied()
                    .fold(f64::MIN, f64::max)
            })
            .collect();
        residual = sup_diff(&next, &v);
        v = next;
        if residual <= threshold {
            let q = q_from_v(t, r, gamma, &v);
            return Ok(ValueResult {
                v,
                q,
                n_actions: m,
                method: ValueMethod::Iterative,
            });
        }
    }
    Err(Error::NotConverged {
        what: "value iteration",
        iterations: VI_MAX_SWEEPS,
        residual,
    })
}

/// Optimal values by policy iteration, returning exact `V*` and `Q*` up to
/// linear-solver precision.
pub fn optimal_values(t: &Dynamics, r: &Rewards, gamma: f64) -> Result<ValueResult> {
    optimal_values_from(t, r, gamma, None)
}

/// Policy iteration warm-started from `start` (one action per state).
pub fn optimal_values_from(
    t: &Dynamics,
    r: &Rewards,
    gamma: f64,
    start: Option<&[usize]>,
) -> Result<ValueResult> {
    r.check_against(t)?;
    let (n, m) = (t.n_states(), t.n_actions());
    let mut actions: Vec<usize> = match start {
        Some(a) if a.len() == n => a.to_vec(),
        _ => (0..n).map(|s| argmax(r.row(s))).collect(),
    };
    // n * m bounds the number of strict improvements in practice; the cap is a guard.
    for _ in 0..(10 * n * m + 100) {
        let policy = Policy::deterministic(m, &actions);
        let v = solve_values(t, r, gamma, &policy)?;
        let q = q_from_v(t, r, gamma, &v);
        let scale = 1.0 + v.iter().fold(0.0f64, |acc, x| acc.max(x.abs()));
        let mut changed = false;
        for s in 0..n {
            let row = &q[s * m..(s + 1) * m];
            let best = argmax(row);
            if row[best] > row[actions[s]] + 1e-12 * scale {
                actions[s] = best;
                changed = true;
            }
        }
        if !changed {
            return Ok(ValueResult {
                v,
                q,
                n_actions: m,
                method: ValueMethod::ClosedForm,
            });
        }
    }
    Err(Error::NotConverged {
        what: "policy iteration",
        iterations: 10 * n * m + 100,
        residual: f64::NAN,
    })
}

/// One-hot policy on the best action of each state, lowest index on ties.
pub fn greedy_policy(values: &ValueResult) -> Policy {
    Policy::deterministic(values.n_actions, &greedy_actions(values))
}

/// Greedy actions; Q-values within [`BALL_TOL`] of the maximum count as tied
/// so solver noise cannot flip the lowest-index rule.
pub fn greedy_actions(values: &ValueResult) -> Vec<usize> {
    (0..values.n_states())
        .map(|s| argmax_tol(values.q_row(s), BALL_TOL))
        .collect()
}

/// Lowest index whose entry is within `tol` of the maximum.
pub fn argmax_tol(xs: &[f64], tol: f64) -> usize {
    let best = xs.iter().copied().fold(f64::MIN, f64::max);
    xs.iter().position(|&x| x >= best - tol).unwrap_or(0)
}

/// Per state, the actions whose Q-value is within `epsilon` of the best.
pub fn epsilon_ball(values: &ValueResult, epsilon: f64) -> EpsilonBall {
    let per_state = (0..values.n_states())
        .map(|s| ball_row(values.q_row(s), epsilon))
        .collect();
    EpsilonBall { per_state, epsilon }
}

pub(crate) fn ball_row(q: &[f64], epsilon: f64) -> Vec<usize> {
    let best = q.iter().copied().fold(f64::MIN, f64::max);
    (0..q.len())
        .filter(|&a| best - q[a] <= epsilon + BALL_TOL)
        .collect()
}

/// A failure of the ε-ball property at one state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum BallViolation {
    /// The ε-ball of the candidate dynamics disagrees with the reference on `action`.
    Membership {
        state: usize,
        action: usize,
        in_reference: bool,
    },
    /// A valid action is not ε above an invalid one.
    Separation {
        state: usize,
        valid: usize,
        invalid: usize,
        gap: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BallCheck {
    pub holds: bool,
    pub violations: Vec<BallViolation>,
}

/// Checks the ε-ball property of `t` against reference valid sets on `states`.
pub fn epsilon_ball_property_holds(
    t: &Dynamics,
    r: &Rewards,
    gamma: f64,
    reference: &EpsilonBall,
    states: &[usize],
    epsilon: f64,
) -> Result<BallCheck> {
    if states.is_empty() {
        return Ok(BallCheck {
            holds: true,
            violations: Vec::new(),
        });
    }
    let q = optimal_values(t, r, gamma)?;
    Ok(ball_property_from_q(&q, reference, states, epsilon))
}

pub(crate) fn ball_property_from_q(
    q: &ValueResult,
    reference: &EpsilonBall,
    states: &[usize],
    epsilon: f64,
) -> BallCheck {
    let mut violations = Vec::new();
    for &s in states {
        let row = q.q_row(s);
        let ball = ball_row(row, epsilon);
        let valid = &reference.per_state[s];
        for a in 0..row.len() {
            let in_ball = ball.contains(&a);
            let in_ref = valid.contains(&a);
            if in_ball != in_ref {
                violations.push(BallViolation::Membership {
                    state: s,
                    action: a,
                    in_reference: in_ref,
                });
            }
        }
        for &a in valid {
            for invalid in (0..row.len()).filter(|b| !valid.contains(b)) {
                let gap = row[a] - row[invalid];
                if gap < epsilon - SEPARATION_TOL {
                    violations.push(BallViolation::Separation {
                        state: s,
                        valid: a,
                        invalid,
                        gap,
                    });
                }
            }
        }
    }
    BallCheck {
        holds: violations.is_empty(),
        violations,
    }
}
