//! Expert-consistency constraints on transition dynamics.
//!
//! For a state `s`, a policy `π` and dynamics `T`, every constraint bounds
//! `g = Q^π(s,a;T) − Q^π(s,a';T) = R(s,a) − R(s,a') + γ (T(·|s,a) − T(·|s,a'))ᵀ v`
//! with `v = (I − γT_π)⁻¹ R_π`. Separation asks `g ≥ ε` for a valid `a` and
//! invalid `a'`; closeness asks `|g| ≤ ε` for two valid actions. Freezing `v`
//! at a reference point makes both linear in `T`.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::EstimatedExpertPolicy;
use crate::error::{invalid, Error, Result};
use crate::mdp::{greedy_actions, optimal_values, solve_values, Dynamics, Policy, Rewards};

/// Exact constraints count as violated beyond this slack.
pub const EXACT_TOL: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintKind {
    Separation,
    Closeness,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSpec {
    pub state: usize,
    pub valid_action: usize,
    /// The invalid action for separation, the second valid action for closeness.
    pub other_action: usize,
    pub kind: ConstraintKind,
    pub epsilon: f64,
}

impl ConstraintSpec {
    /// Feasible interval for `g`.
    pub fn bounds(&self) -> (f64, f64) {
        match self.kind {
            ConstraintKind::Separation => (self.epsilon, f64::INFINITY),
            ConstraintKind::Closeness => (-self.epsilon, self.epsilon),
        }
    }

    /// Signed distance of `g` to the feasible interval; negative when violated.
    pub fn slack(&self, g: f64) -> f64 {
        let (lo, hi) = self.bounds();
        (g - lo).min(hi - g)
    }
}

/// One separation spec per (valid, invalid) pair and one closeness spec per
/// unordered pair of valid actions, for each listed state.
pub fn enumerate_constraints(
    valid_sets: &[Vec<usize>],
    states: &[usize],
    n_actions: usize,
    epsilon: f64,
) -> Result<Vec<ConstraintSpec>> {
    let mut specs = Vec::new();
    for &s in states {
        let valid = valid_sets
            .get(s)
            .ok_or_else(|| Error::InvalidInput(format!("no valid set for state {s}")))?;
        if valid.is_empty() {
            return invalid(format!("state {s} has an empty valid set"));
        }
        for &a in valid {
            for b in (0..n_actions).filter(|b| !valid.contains(b)) {
                specs.push(ConstraintSpec {
                    state: s,
                    valid_action: a,
                    other_action: b,
                    kind: ConstraintKind::Separation,
                    epsilon,
                });
            }
        }
        for (i, &a) in valid.iter().enumerate() {
            for &b in &valid[i + 1..] {
                specs.push(ConstraintSpec {
                    state: s,
                    valid_action: a,
                    other_action: b,
                    kind: ConstraintKind::Closeness,
                    epsilon,
                });
            }
        }
    }
    Ok(specs)
}

/// `lower ≤ Σ coeffs · x ≤ upper` over the flattened dynamics tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearRow {
    pub coeffs: Vec<(usize, f64)>,
    pub lower: f64,
    pub upper: f64,
    /// Index of the originating spec.
    pub spec: usize,
    pub kind: ConstraintKind,
}

impl LinearRow {
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.coeffs.iter().map(|&(i, c)| c * x[i]).sum()
    }

    /// Amount by which `x` violates the row, zero if feasible.
    pub fn violation(&self, x: &[f64]) -> f64 {
        let v = self.eval(x);
        (self.lower - v).max(v - self.upper).max(0.0)
    }
}

/// Linear constraints on dynamics. Simplex equalities (one per `(s, a)` row)
/// and nonnegativity are implied by the shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearConstraintSet {
    pub n_states: usize,
    pub n_actions: usize,
    pub rows: Vec<LinearRow>,
    /// Reference points `(π, T)` the rows were built at.
    pub linearization_points: Vec<(Policy, Dynamics)>,
}

impl LinearConstraintSet {
    pub fn empty(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_states,
            n_actions,
            rows: Vec::new(),
            linearization_points: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.n_states * self.n_actions * self.n_states
    }

    pub fn n_simplex_rows(&self) -> usize {
        self.n_states * self.n_actions
    }

    /// Appends `other`. A row whose coefficients equal an existing row's
    /// only tightens that row's bounds, which keeps the system free of
    /// duplicate constraints when a linearization point repeats.
    pub fn extend(&mut self, other: LinearConstraintSet) {
        for row in other.rows {
            match self.rows.iter_mut().find(|r| r.coeffs == row.coeffs) {
                Some(r) => {
                    r.lower = r.lower.max(row.lower);
                    r.upper = r.upper.min(row.upper);
                }
                None => self.rows.push(row),
            }
        }
        self.linearization_points.extend(other.linearization_points);
    }

    /// Largest violation over rows, simplex sums and nonnegativity.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let rows = self.rows.iter().map(|r| r.violation(x)).fold(0.0, f64::max);
        let neg = x.iter().map(|v| (-v).max(0.0)).fold(0.0, f64::max);
        let simplex = x
            .chunks(self.n_states)
            .map(|c| (c.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max);
        rows.max(neg).max(simplex)
    }
}

/// Freezes `v = (I − γT_π)⁻¹R_π` at `(policy, reference)` and turns every spec
/// into rows on the flattened tensor, one per spec.
/// `margin` tightens every row: separation lower bounds rise by it, and
/// closeness bands shrink by it when `ε > 2·margin`.
pub fn linearize(
    specs: &[ConstraintSpec],
    policy: &Policy,
    reference: &Dynamics,
    rewards: &Rewards,
    gamma: f64,
    margin: f64,
) -> Result<LinearConstraintSet> {
    let v = solve_values(reference, rewards, gamma, policy)?;
    let (n, m) = (reference.n_states(), reference.n_actions());
    let vmax = v.iter().copied().fold(f64::MIN, f64::max);
    let vmin = v.iter().copied().fold(f64::MAX, f64::min);
    // Σ coeffs·x over two simplex rows never leaves [−span, span].
    let span = gamma * (vmax - vmin) + 1.0;
    let mut rows = Vec::with_capacity(specs.len());
    for (k, sp) in specs.iter().enumerate() {
        let (s, a, b) = (sp.state, sp.valid_action, sp.other_action);
        if s >= n || a >= m || b >= m || a == b {
            return invalid(format!("malformed constraint spec {sp:?}"));
        }
        let mut coeffs = Vec::with_capacity(2 * n);
        let base_a = (s * m + a) * n;
        let base_b = (s * m + b) * n;
        for (sp_, &vv) in v.iter().enumerate() {
            let c = gamma * vv;
            if c != 0.0 {
                coeffs.push((base_a + sp_, c));
            }
        }
        for (sp_, &vv) in v.iter().enumerate() {
            let c = -gamma * vv;
            if c != 0.0 {
                coeffs.push((base_b + sp_, c));
            }
        }
        coeffs.sort_unstable_by_key(|&(i, _)| i);
        let c0 = rewards.get(s, a) - rewards.get(s, b);
        match sp.kind {
            ConstraintKind::Separation => rows.push(LinearRow {
                coeffs,
                lower: sp.epsilon + margin - c0,
                upper: span.max(sp.epsilon + margin - c0),
                spec: k,
                kind: sp.kind,
            }),
            ConstraintKind::Closeness => {
                let band = if sp.epsilon > 2.0 * margin {
                    sp.epsilon - margin
                } else {
                    sp.epsilon
                };
                rows.push(LinearRow {
                    coeffs,
                    lower: -band - c0,
                    upper: band - c0,
                    spec: k,
                    kind: sp.kind,
                });
            }
        }
    }
    Ok(LinearConstraintSet {
        n_states: n,
        n_actions: m,
        rows,
        linearization_points: vec![(policy.clone(), reference.clone())],
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub spec: usize,
    /// `Q^π(s,a) − Q^π(s,a')` at the checked dynamics.
    pub value: f64,
    pub slack: f64,
}

/// `Q^π(s,a;T) − Q^π(s,a';T)` for every spec, from one closed-form solve.
pub fn constraint_values(
    t: &Dynamics,
    specs: &[ConstraintSpec],
    policy: &Policy,
    rewards: &Rewards,
    gamma: f64,
) -> Result<Vec<f64>> {
    let v = solve_values(t, rewards, gamma, policy)?;
    Ok(specs
        .iter()
        .map(|sp| {
            let q = |a: usize| {
                rewards.get(sp.state, a) + gamma * crate::mdp::dot(t.row(sp.state, a), &v)
            };
            q(sp.valid_action) - q(sp.other_action)
        })
        .collect())
}

/// Specs violated beyond [`EXACT_TOL`] at `t`, evaluated without linearization.
pub fn check_exact(
    t: &Dynamics,
    specs: &[ConstraintSpec],
    policy: &Policy,
    rewards: &Rewards,
    gamma: f64,
) -> Result<Vec<Violation>> {
    let values = constraint_values(t, specs, policy, rewards, gamma)?;
    Ok(specs
        .iter()
        .zip(values)
        .enumerate()
        .filter_map(|(k, (sp, g))| {
            let slack = sp.slack(g);
            (slack < -EXACT_TOL).then_some(Violation {
                spec: k,
                value: g,
                slack,
            })
        })
        .collect())
}

/// Result of checking dynamics against the expert constraints.
#[derive(Clone, Debug, PartialEq)]
pub struct ExactCheck {
    pub policy: Policy,
    pub specs: Vec<ConstraintSpec>,
    pub violations: Vec<Violation>,
}

impl ExactCheck {
    pub fn is_feasible(&self) -> bool {
        self.violations.is_empty()
    }

    /// Violation with the most negative slack; ties go to the earlier spec.
    pub fn most_violated(&self) -> Option<&Violation> {
        self.violations
            .iter()
            .fold(None, |best: Option<&Violation>, v| match best {
                Some(b) if b.slack <= v.slack => Some(b),
                _ => Some(v),
            })
    }
}

/// The constraint system induced by an estimated expert. The policy used for
/// `Q^π` is the expert on observed states and greedy under the dynamics being
/// checked elsewhere.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertConstraints {
    pub expert: EstimatedExpertPolicy,
    pub rewards: Rewards,
    pub gamma: f64,
    pub epsilon: f64,
    /// Also separate the greedy action from the rest on unobserved states.
    pub include_unobserved: bool,
    observed_specs: Vec<ConstraintSpec>,
}

impl ExpertConstraints {
    pub fn new(
        expert: EstimatedExpertPolicy,
        rewards: Rewards,
        gamma: f64,
        epsilon: f64,
        include_unobserved: bool,
    ) -> Result<Self> {
        if epsilon < 0.0 || !epsilon.is_finite() {
            return invalid(format!("epsilon {epsilon} must be finite and nonnegative"));
        }
        let valid = expert.valid_or_all();
        let observed_specs = enumerate_constraints(
            &valid,
            &expert.observed_states(),
            rewards.n_actions(),
            epsilon,
        )?;
        Ok(Self {
            expert,
            rewards,
            gamma,
            epsilon,
            include_unobserved,
            observed_specs,
        })
    }

    pub fn n_states(&self) -> usize {
        self.rewards.n_states()
    }

    pub fn n_actions(&self) -> usize {
        self.rewards.n_actions()
    }

    pub fn observed_specs(&self) -> &[ConstraintSpec] {
        &self.observed_specs
    }

    /// Greedy actions of `t` (lowest index on ties).
    pub fn greedy_under(&self, t: &Dynamics) -> Result<Vec<usize>> {
        Ok(greedy_actions(&optimal_values(
            t,
            &self.rewards,
            self.gamma,
        )?))
    }

    /// Expert rows on observed states, `greedy` elsewhere.
    pub fn assemble_policy(&self, greedy: Option<&[usize]>) -> Policy {
        let mut p = self.expert.policy.clone();
        if let Some(g) = greedy {
            for s in 0..self.n_states() {
                if !self.expert.is_observed(s) {
                    let row = p.row_mut(s);
                    row.iter_mut().for_each(|x| *x = 0.0);
                    row[g[s]] = 1.0;
                }
            }
        }
        p
    }

    /// Policy and specs to enforce at `t`.
    pub fn system_at(&self, t: &Dynamics) -> Result<(Policy, Vec<ConstraintSpec>)> {
        let all_observed = (0..self.n_states()).all(|s| self.expert.is_observed(s));
        if all_observed {
            return Ok((self.expert.policy.clone(), self.observed_specs.clone()));
        }
        let greedy = self.greedy_under(t)?;
        Ok((
            self.assemble_policy(Some(&greedy)),
            self.specs_with(&greedy)?,
        ))
    }

    /// Observed specs plus, when enabled, separation specs for unobserved
    /// states with `greedy[s]` as the only valid action.
    pub fn specs_with(&self, greedy: &[usize]) -> Result<Vec<ConstraintSpec>> {
        let mut specs = self.observed_specs.clone();
        if self.include_unobserved {
            let sets: Vec<Vec<usize>> = greedy.iter().map(|&a| vec![a]).collect();
            let unobserved: Vec<usize> = (0..self.n_states())
                .filter(|&s| !self.expert.is_observed(s))
                .collect();
            specs.extend(enumerate_constraints(
                &sets,
                &unobserved,
                self.n_actions(),
                self.epsilon,
            )?);
        }
        Ok(specs)
    }

    pub fn check(&self, t: &Dynamics) -> Result<ExactCheck> {
        let (policy, specs) = self.system_at(t)?;
        let violations = check_exact(t, &specs, &policy, &self.rewards, self.gamma)?;
        Ok(ExactCheck {
            policy,
            specs,
            violations,
        })
    }

    /// `∂g/∂T` of one spec at `t` with the policy held fixed, flattened.
    pub fn gradient(
        &self,
        t: &Dynamics,
        policy: &Policy,
        spec: &ConstraintSpec,
    ) -> Result<Vec<f64>> {
        constraint_gradient(t, policy, &self.rewards, self.gamma, spec)
    }

    /// Text table of every enforced spec at `t` with its value and slack.
    pub fn report(&self, t: &Dynamics) -> Result<String> {
        let (policy, specs) = self.system_at(t)?;
        let values = constraint_values(t, &specs, &policy, &self.rewards, self.gamma)?;
        let mut out = String::from("state\taction\tother\tkind\tvalue\tslack\tviolated\n");
        for (sp, g) in specs.iter().zip(values) {
            let slack = sp.slack(g);
            let kind = match sp.kind {
                ConstraintKind::Separation => "separation",
                ConstraintKind::Closeness => "closeness",
            };
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{:.9}\t{:.9}\t{}",
                sp.state,
                sp.valid_action,
                sp.other_action,
                kind,
                g,
                slack,
                slack < -EXACT_TOL
            );
        }
        Ok(out)
    }
}

/// Gradient of `g = R(s,a) − R(s,a') + γ(T_sa − T_sa')ᵀ(I − γT_π)⁻¹R_π` in `T`:
/// `∂g/∂T(s₂,a₂,s') = γ v(s') [1{(s₂,a₂)=(s,a)} − 1{(s₂,a₂)=(s,a')} + γ z(s₂) π(a₂|s₂)]`
/// with `z = (I − γT_π)⁻ᵀ (T_sa − T_sa')`.
pub fn constraint_gradient(
    t: &Dynamics,
    policy: &Policy,
    rewards: &Rewards,
    gamma: f64,
    spec: &ConstraintSpec,
) -> Result<Vec<f64>> {
    let (n, m) = (t.n_states(), t.n_actions());
    let mut system = t.under_policy(policy);
    system *= -gamma;
    for i in 0..n {
        system[(i, i)] += 1.0;
    }
    let lu = system.clone().lu();
    let v = lu
        .solve(&rewards.under_policy(policy))
        .ok_or_else(|| Error::Singular("I - γT_π is not invertible".into()))?;
    let (s, a, b) = (spec.state, spec.valid_action, spec.other_action);
    let d = DVector::from_iterator(n, (0..n).map(|k| t.get(s, a, k) - t.get(s, b, k)));
    let z = system
        .transpose()
        .lu()
        .solve(&d)
        .ok_or_else(|| Error::Singular("I - γT_π is not invertible".into()))?;
    let mut grad = vec![0.0; n * m * n];
    for s2 in 0..n {
        for a2 in 0..m {
            let mut w = gamma * z[s2] * policy.prob(s2, a2);
            if (s2, a2) == (s, a) {
                w += 1.0;
            }
            if (s2, a2) == (s, b) {
                w -= 1.0;
            }
            if w == 0.0 {
                continue;
            }
            let base = (s2 * m + a2) * n;
            for k in 0..n {
                grad[base + k] = gamma * v[k] * w;
            }
        }
    }
    Ok(grad)
}

/// Dense `(I − γT_π)`, exposed for tests and diagnostics.
pub fn policy_system(t: &Dynamics, policy: &Policy, gamma: f64) -> DMatrix<f64> {
    let mut system = t.under_policy(policy);
    system *= -gamma;
    for i in 0..t.n_states() {
        system[(i, i)] += 1.0;
    }
    system
}
