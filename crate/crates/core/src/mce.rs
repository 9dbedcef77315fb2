//! Maximum causal entropy dynamics learning.
//!
//! Dynamics are softmax rows of logits `θ`. The objective is the average
//! log likelihood of the batch under a soft-optimal policy and `T_θ`:
//! `L(θ) = (1/|D|) Σ_{(s,a,s')} [log π_θ(a|s) + log T_θ(s'|s,a)]` with
//! `π_θ(·|s) = softmax(Q_θ(s,·)/τ)` and `Q_θ` the soft Q function of `T_θ`.
//! Each step runs soft value iteration at the current `θ` and takes one
//! ascent step.

use std::time::Instant;

use log::debug;
use serde::{Deserialize, Serialize};

use crate::data::BatchDataset;
use crate::error::{invalid, Error, Result};
use crate::mdp::{q_from_v, stop_threshold, sup_diff, Dynamics, Rewards, VI_MAX_SWEEPS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MceConfig {
    pub learning_rate: f64,
    pub max_steps: usize,
    pub soft_vi_tol: f64,
    /// Stop once the loss changes by less than this between steps.
    pub convergence_tol: f64,
    pub temperature: f64,
    /// Differentiate through the soft value fixed point instead of holding
    /// next-state values constant.
    pub full_gradient: bool,
    pub seed: u64,
}

impl Default for MceConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            max_steps: 500,
            soft_vi_tol: 1e-8,
            convergence_tol: 1e-6,
            temperature: 1.0,
            full_gradient: false,
            seed: 0,
        }
    }
}

impl MceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return invalid("learning_rate must be positive");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return invalid("temperature must be positive");
        }
        if self.soft_vi_tol.is_nan() || self.soft_vi_tol <= 0.0 {
            return invalid("soft_vi_tol must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MceState {
    /// Logits, flattened like the dynamics tensor.
    pub theta: Vec<f64>,
    pub soft_q: Vec<f64>,
    pub loss_history: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MceResult {
    pub t: Dynamics,
    pub state: MceState,
    pub steps: usize,
    pub converged: bool,
    pub wall_time: f64,
}

/// Row-wise softmax of logits.
pub fn softmax_dynamics(theta: &[f64], n_states: usize, n_actions: usize) -> Result<Dynamics> {
    let mut out = theta.to_vec();
    for row in out.chunks_mut(n_states) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            total += *x;
        }
        row.iter_mut().for_each(|x| *x /= total);
    }
    Dynamics::from_raw(n_states, n_actions, out)
}

fn soft_max_row(q: &[f64], tau: f64) -> f64 {
    let max = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + tau * q.iter().map(|x| ((x - max) / tau).exp()).sum::<f64>().ln()
}

fn soft_values(q: &[f64], m: usize, tau: f64) -> Vec<f64> {
    q.chunks(m).map(|row| soft_max_row(row, tau)).collect()
}

fn soft_policy(q: &[f64], m: usize, tau: f64) -> Vec<f64> {
    let mut pi = vec![0.0; q.len()];
    for (row, out) in q.chunks(m).zip(pi.chunks_mut(m)) {
        let v = soft_max_row(row, tau);
        for (o, x) in out.iter_mut().zip(row) {
            *o = ((x - v) / tau).exp();
        }
    }
    pi
}

/// Fixed point of `Q = R + γ T V` with `V(s) = τ log Σ_a exp(Q(s,a)/τ)`,
/// started from `warm` when given.
pub fn soft_value_iteration(
    t: &Dynamics,
    rewards: &Rewards,
    gamma: f64,
    temperature: f64,
    tol: f64,
    warm: Option<&[f64]>,
) -> Result<Vec<f64>> {
    rewards.check_against(t)?;
    if !(0.0..1.0).contains(&gamma) {
        return invalid(format!("discount {gamma} must lie in [0, 1)"));
    }
    let m = t.n_actions();
    let threshold = stop_threshold(gamma, tol);
    let mut v = match warm {
        Some(q) => soft_values(q, m, temperature),
        None => vec![0.0; t.n_states()],
    };
    let mut residual = f64::INFINITY;
    for _ in 0..VI_MAX_SWEEPS {
        let q = q_from_v(t, rewards, gamma, &v);
        let next = soft_values(&q, m, temperature);
        residual = sup_diff(&next, &v);
        v = next;
        if residual <= threshold {
            return Ok(q_from_v(t, rewards, gamma, &v));
        }
    }
    Err(Error::NotConverged {
        what: "soft value iteration",
        iterations: VI_MAX_SWEEPS,
        residual,
    })
}

/// Average log likelihood of the batch at `theta`, with `soft_q` the soft Q
/// function of the corresponding dynamics.
pub fn loss(data: &BatchDataset, theta: &[f64], soft_q: &[f64], temperature: f64) -> f64 {
    let (n, m) = (data.n_states(), data.n_actions());
    let pi = soft_policy(soft_q, m, temperature);
    let mut total = 0.0;
    for (r, row) in theta.chunks(n).enumerate() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        let counts = data.count_row(r / m, r % m);
        for (k, &c) in counts.iter().enumerate() {
            if c > 0 {
                total += c as f64 * (row[k] - lse + pi[r].ln());
            }
        }
    }
    total / data.len() as f64
}

/// Gradient of [`loss`]. With `full` unset the soft values of next states
/// are held fixed, otherwise the fixed point is differentiated by its
/// adjoint equation.
pub fn gradient(
    data: &BatchDataset,
    theta: &[f64],
    gamma: f64,
    temperature: f64,
    soft_q: &[f64],
    full: bool,
) -> Result<Vec<f64>> {
    let (n, m) = (data.n_states(), data.n_actions());
    let t = softmax_dynamics(theta, n, m)?;
    let pi = soft_policy(soft_q, m, temperature);
    let v = soft_values(soft_q, m, temperature);
    let scale = 1.0 / data.len() as f64;

    // ∂L/∂Q(s,b) = Σ_a N(s,a) (1{a=b} − π(b|s)) / τ
    let mut g_q = vec![0.0; n * m];
    for s in 0..n {
        let ns = data.state_count(s) as f64;
        if ns == 0.0 {
            continue;
        }
        for b in 0..m {
            g_q[s * m + b] =
                (data.pair_count(s, b) as f64 - ns * pi[s * m + b]) / temperature * scale;
        }
    }
    let lambda = if full {
        adjoint(&t, &pi, &g_q, gamma)?
    } else {
        g_q
    };

    let mut grad = vec![0.0; n * m * n];
    for (r, g) in grad.chunks_mut(n).enumerate() {
        let row = t.row(r / m, r % m);
        let counts = data.count_row(r / m, r % m);
        let total: f64 = counts.iter().map(|&c| c as f64).sum();
        let mean_v: f64 = row.iter().zip(&v).map(|(p, x)| p * x).sum();
        for k in 0..n {
            // log T_θ term, then the Q term through Σ_k T_θ(k) V(k)
            g[k] = (counts[k] as f64 - total * row[k]) * scale
                + lambda[r] * gamma * row[k] * (v[k] - mean_v);
        }
    }
    Ok(grad)
}

/// Solves `λ(s,a) = g(s,a) + π(a|s) Σ_{s₂,a₂} γ T(s|s₂,a₂) λ(s₂,a₂)`.
fn adjoint(t: &Dynamics, pi: &[f64], g: &[f64], gamma: f64) -> Result<Vec<f64>> {
    let (n, m) = (t.n_states(), t.n_actions());
    let mut lambda = g.to_vec();
    let scale = g.iter().map(|x| x.abs()).fold(0.0, f64::max).max(1e-300);
    for _ in 0..VI_MAX_SWEEPS {
        let mut mu = vec![0.0; n];
        for (r, &l) in lambda.iter().enumerate() {
            if l != 0.0 {
                for (k, p) in t.row(r / m, r % m).iter().enumerate() {
                    mu[k] += gamma * p * l;
                }
            }
        }
        let next: Vec<f64> = (0..n * m).map(|r| g[r] + pi[r] * mu[r / m]).collect();
        let residual = sup_diff(&next, &lambda);
        lambda = next;
        if residual <= 1e-14 * scale {
            return Ok(lambda);
        }
    }
    Err(Error::NotConverged {
        what: "soft value adjoint",
        iterations: VI_MAX_SWEEPS,
        residual: f64::NAN,
    })
}

/// Gradient ascent from uniform dynamics. Each row's step is divided by the
/// visit count of its state so that one learning rate suits every batch size.
pub fn fit_mce(
    data: &BatchDataset,
    rewards: &Rewards,
    gamma: f64,
    config: &MceConfig,
) -> Result<MceResult> {
    config.validate()?;
    if data.is_empty() {
        return invalid("MCE needs a nonempty dataset");
    }
    let start = Instant::now();
    let (n, m) = (data.n_states(), data.n_actions());
    let tau = config.temperature;
    let precondition: Vec<f64> = (0..n)
        .map(|s| data.len() as f64 / (data.state_count(s) as f64).max(1.0))
        .collect();

    let mut theta = vec![0.0; n * m * n];
    let mut t = softmax_dynamics(&theta, n, m)?;
    let mut soft_q = soft_value_iteration(&t, rewards, gamma, tau, config.soft_vi_tol, None)?;
    let mut history = vec![loss(data, &theta, &soft_q, tau)];
    let mut converged = false;
    let mut steps = 0;
    while steps < config.max_steps {
        let grad = gradient(data, &theta, gamma, tau, &soft_q, config.full_gradient)?;
        for (r, (th, g)) in theta.chunks_mut(n).zip(grad.chunks(n)).enumerate() {
            let lr = config.learning_rate * precondition[r / m];
            th.iter_mut().zip(g).for_each(|(x, d)| *x += lr * d);
        }
        steps += 1;
        t = softmax_dynamics(&theta, n, m)?;
        soft_q = soft_value_iteration(&t, rewards, gamma, tau, config.soft_vi_tol, Some(&soft_q))?;
        let l = loss(data, &theta, &soft_q, tau);
        if !l.is_finite() {
            return Err(Error::Diverged {
                step: steps,
                loss: l,
            });
        }
        let change = (l - history[history.len() - 1]).abs();
        history.push(l);
        if change < config.convergence_tol {
            converged = true;
            break;
        }
    }
    debug!(
        "mce stopped after {steps} steps at loss {}",
        history[history.len() - 1]
    );
    Ok(MceResult {
        t,
        state: MceState {
            theta,
            soft_q,
            loss_history: history,
        },
        steps,
        converged,
        wall_time: start.elapsed().as_secs_f64(),
    })
}
