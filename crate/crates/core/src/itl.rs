//! Iterative point estimation of dynamics under expert constraints.
//!
//! Each outer step linearizes the constraints at the current iterate (and,
//! by default, keeps every earlier linearization), then projects the MLE onto
//! the resulting polytope with counts as weights. The loop stops once the
//! iterate satisfies the exact constraints and either reproduces the
//! expert's valid sets on every observed state or stops getting closer.

use std::time::Instant;

use log::{debug, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constraints::{linearize, ExpertConstraints, LinearConstraintSet, Violation};
use crate::data::{estimate_expert_policy, mle_estimate, BatchDataset};
use crate::error::{invalid, Error, Result};
use crate::mdp::{
    ball_property_from_q, optimal_values, BallViolation, Dynamics, EpsilonBall, Rewards,
};
use crate::metrics;
use crate::qp::{self, QpProblem, QpSettings, QpStatus};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ItlConfig {
    pub epsilon: f64,
    pub max_outer_iters: usize,
    /// Keep the rows of every earlier linearization.
    pub accumulate_linearizations: bool,
    /// Keep the rows built before the loop (uniform policy on unobserved states).
    pub include_prestep: bool,
    /// Also enforce greedy separation on unobserved states.
    pub include_unobserved_constraints: bool,
    /// Tightening of every linearized row, so that binding rows keep the
    /// invalid actions strictly outside the ε-ball and absorb small
    /// perturbations of the estimate.
    pub margin: f64,
    /// Minimum share of a state's visits for an action to count as valid.
    pub min_freq: f64,
    /// Outer iterations allowed without fewer ε-ball disagreements once the
    /// exact constraints hold.
    pub patience: usize,
    pub qp: QpSettings,
}

impl Default for ItlConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.0,
            max_outer_iters: 100,
            accumulate_linearizations: true,
            include_prestep: true,
            include_unobserved_constraints: false,
            margin: 1e-3,
            min_freq: 0.0,
            patience: 5,
            qp: QpSettings::default(),
        }
    }
}

impl ItlConfig {
    pub fn with_epsilon(epsilon: f64) -> Self {
        Self {
            epsilon,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return invalid(format!(
                "epsilon {} must be finite and nonnegative",
                self.epsilon
            ));
        }
        if self.max_outer_iters == 0 {
            return invalid("max_outer_iters must be at least 1");
        }
        if self.margin < 0.0 {
            return invalid("margin must be nonnegative");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItlResult {
    pub t_hat: Dynamics,
    pub outer_iterations: usize,
    pub converged: bool,
    /// Exact constraint violations at `t_hat`.
    pub residual_violations: Vec<Violation>,
    /// ε-ball disagreements at `t_hat` on observed states.
    pub ball_violations: Vec<BallViolation>,
    /// General rows in the QP at each outer iteration.
    pub rows_per_iteration: Vec<usize>,
    pub wall_time: f64,
}

struct Iterate {
    t: Dynamics,
    exact: Vec<Violation>,
    ball: Vec<BallViolation>,
}

impl Iterate {
    fn score(&self) -> (usize, usize) {
        (self.exact.len(), self.ball.len())
    }

    fn done(&self) -> bool {
        self.exact.is_empty() && self.ball.is_empty()
    }
}

fn assess(
    t: Dynamics,
    ec: &ExpertConstraints,
    reference: &EpsilonBall,
    observed: &[usize],
) -> Result<Iterate> {
    let exact = ec.check(&t)?.violations;
    let q = optimal_values(&t, &ec.rewards, ec.gamma)?;
    let ball = ball_property_from_q(&q, reference, observed, ec.epsilon).violations;
    Ok(Iterate { t, exact, ball })
}

fn project(
    data: &BatchDataset,
    mle: &Dynamics,
    set: &LinearConstraintSet,
    settings: &QpSettings,
) -> Result<Dynamics> {
    let problem = QpProblem::new(mle.as_slice().to_vec(), data.counts_f64(), set.clone());
    let sol = qp::solve(&problem, settings)?;
    match sol.status {
        QpStatus::Optimal => {}
        QpStatus::Infeasible => {
            let info = sol
                .infeasibility
                .expect("infeasible status carries a diagnostic");
            return Err(Error::Infeasible {
                row: info.row,
                violation: info.violation,
                conflicting: info.conflicting,
            });
        }
        QpStatus::MaxIter => {
            return Err(Error::NotConverged {
                what: "constrained projection",
                iterations: sol.iterations,
                residual: sol.primal_residual.max(sol.dual_residual),
            })
        }
    }
    // Exact zeros and round-off below zero are cleaned before renormalizing.
    let n = data.n_states();
    let mut x = sol.x;
    for row in x.chunks_mut(n) {
        row.iter_mut().for_each(|v| *v = v.max(0.0));
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    Dynamics::from_raw(n, data.n_actions(), x)
}

/// Fits the constrained point estimate.
pub fn fit(
    data: &BatchDataset,
    rewards: &Rewards,
    gamma: f64,
    config: &ItlConfig,
) -> Result<ItlResult> {
    config.validate()?;
    if data.is_empty() {
        return invalid("ITL needs a nonempty dataset");
    }
    if rewards.n_states() != data.n_states() || rewards.n_actions() != data.n_actions() {
        return invalid("reward table does not match the dataset");
    }
    let start = Instant::now();
    let expert = estimate_expert_policy(data, config.min_freq)?;
    let observed = expert.observed_states();
    let reference = EpsilonBall {
        per_state: expert.valid_or_all(),
        epsilon: config.epsilon,
    };
    let ec = ExpertConstraints::new(
        expert,
        rewards.clone(),
        gamma,
        config.epsilon,
        config.include_unobserved_constraints,
    )?;
    let mle = mle_estimate(data);

    // Pre-step: uniform policy on unobserved states, linearized at the MLE.
    let greedy0 = ec.greedy_under(&mle)?;
    let specs0 = ec.specs_with(&greedy0)?;
    let prestep = linearize(
        &specs0,
        &ec.expert.policy,
        &mle,
        rewards,
        gamma,
        config.margin,
    )?;
    let mut rows_per_iteration = vec![prestep.rows.len()];
    let mut set = prestep;
    let mut current = assess(
        project(data, &mle, &set, &config.qp)?,
        &ec,
        &reference,
        &observed,
    )?;
    let mut best_score = current.score();
    let mut best_t = current.t.clone();
    let mut best_exact = current.exact.clone();
    let mut best_ball = current.ball.clone();
    let mut iterations = 1;
    let mut since_gain = 0;

    while !current.done() && iterations < config.max_outer_iters {
        let greedy = ec.greedy_under(&current.t)?;
        let policy = ec.assemble_policy(Some(&greedy));
        let specs = ec.specs_with(&greedy)?;
        let new = linearize(&specs, &policy, &current.t, rewards, gamma, config.margin)?;
        if config.accumulate_linearizations {
            if !config.include_prestep && iterations == 1 {
                set = LinearConstraintSet::empty(data.n_states(), data.n_actions());
            }
            set.extend(new);
        } else {
            set = new;
        }
        rows_per_iteration.push(set.rows.len());
        let t = match project(data, &mle, &set, &config.qp) {
            Ok(t) => t,
            // Later projections only refine; keep the best iterate so far.
            Err(e @ Error::NotConverged { .. }) => {
                warn!("itl stopped at iteration {iterations}: {e}");
                break;
            }
            Err(e) => return Err(e),
        };
        let stalled = max_abs_diff(&t, &current.t) < 1e-13;
        current = assess(t, &ec, &reference, &observed)?;
        iterations += 1;
        debug!(
            "itl iteration {iterations}: {} exact, {} ball violations",
            current.exact.len(),
            current.ball.len()
        );
        if current.score() < best_score {
            best_score = current.score();
            best_t = current.t.clone();
            best_exact = current.exact.clone();
            best_ball = current.ball.clone();
            since_gain = 0;
        } else {
            since_gain += 1;
        }
        if stalled || (best_exact.is_empty() && since_gain >= config.patience) {
            break;
        }
    }

    let (t_hat, residual_violations, ball_violations) = if current.done() {
        (current.t, current.exact, current.ball)
    } else {
        (best_t, best_exact, best_ball)
    };
    // The ε-ball agreement is not always reachable: a stochastic expert's
    // valid sets constrain Q under its own policy, not Q*. Exact feasibility
    // is what counts.
    let converged = residual_violations.is_empty();
    Ok(ItlResult {
        t_hat,
        outer_iterations: iterations,
        converged,
        residual_violations,
        ball_violations,
        rows_per_iteration,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

fn max_abs_diff(a: &Dynamics, b: &Dynamics) -> f64 {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub epsilon: f64,
    pub reward_index: usize,
    pub best_matching: f64,
    pub epsilon_matching: f64,
    pub converged: bool,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub cells: Vec<SweepCell>,
    /// Mean of best and ε-ball matching over rewards, per grid value.
    pub scores: Vec<f64>,
    pub best_epsilon: f64,
}

/// Fits ITL for every `(ε, reward)` pair and scores the greedy policy of each
/// fit against the validation expert. Failed fits score zero.
pub fn epsilon_sweep(
    train: &BatchDataset,
    validation: &BatchDataset,
    rewards: &[Rewards],
    gamma: f64,
    epsilon_grid: &[f64],
    base: &ItlConfig,
) -> Result<SweepResult> {
    if epsilon_grid.is_empty() || rewards.is_empty() {
        return invalid("epsilon grid and reward list must be nonempty");
    }
    let val_expert = estimate_expert_policy(validation, base.min_freq)?;
    let val_states = val_expert.observed_states();
    let most_frequent: Vec<usize> = (0..validation.n_states())
        .map(|s| {
            let counts: Vec<f64> = (0..validation.n_actions())
                .map(|a| validation.pair_count(s, a) as f64)
                .collect();
            crate::mdp::argmax(&counts)
        })
        .collect();
    let val_sets = val_expert.valid_or_all();

    let jobs: Vec<(f64, usize)> = epsilon_grid
        .iter()
        .flat_map(|&e| (0..rewards.len()).map(move |r| (e, r)))
        .collect();
    let cells: Vec<SweepCell> = jobs
        .par_iter()
        .map(|&(epsilon, reward_index)| {
            let config = ItlConfig {
                epsilon,
                ..base.clone()
            };
            let r = &rewards[reward_index];
            let out = fit(train, r, gamma, &config).and_then(|res| {
                let q = optimal_values(&res.t_hat, r, gamma)?;
                let greedy = crate::mdp::greedy_actions(&q);
                Ok((res.converged, greedy))
            });
            match out {
                Ok((converged, greedy)) => SweepCell {
                    epsilon,
                    reward_index,
                    best_matching: metrics::matching_on(&greedy, &most_frequent, &val_states),
                    epsilon_matching: metrics::set_matching_on(&greedy, &val_sets, &val_states),
                    converged,
                    error: None,
                },
                Err(e) => SweepCell {
                    epsilon,
                    reward_index,
                    best_matching: 0.0,
                    epsilon_matching: 0.0,
                    converged: false,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();

    let scores: Vec<f64> = epsilon_grid
        .iter()
        .map(|&e| {
            let mine: Vec<&SweepCell> = cells.iter().filter(|c| c.epsilon == e).collect();
            mine.iter()
                .map(|c| 0.5 * (c.best_matching + c.epsilon_matching))
                .sum::<f64>()
                / mine.len() as f64
        })
        .collect();
    let best = crate::mdp::argmax(&scores);
    Ok(SweepResult {
        cells,
        scores,
        best_epsilon: epsilon_grid[best],
    })
}
