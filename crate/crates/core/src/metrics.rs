//! Evaluation metrics for estimated dynamics and their policies.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bitl::DynamicsSampleSet;
use crate::error::{invalid, Result};
use crate::mdp::{
    argmax, dot, greedy_actions, optimal_values, solve_values, Dynamics, EpsilonBall, Policy,
    Rewards, TabularMdp,
};

pub const DEFAULT_PAIR_BUDGET: usize = 250_000;

/// Share of `states` where `actions[s] == reference[s]`.
pub fn matching_on(actions: &[usize], reference: &[usize], states: &[usize]) -> f64 {
    if states.is_empty() {
        return f64::NAN;
    }
    let hits = states
        .iter()
        .filter(|&&s| actions[s] == reference[s])
        .count();
    hits as f64 / states.len() as f64
}

/// Share of `states` where `actions[s]` lies in `sets[s]`.
pub fn set_matching_on(actions: &[usize], sets: &[Vec<usize>], states: &[usize]) -> f64 {
    if states.is_empty() {
        return f64::NAN;
    }
    let hits = states
        .iter()
        .filter(|&&s| sets[s].contains(&actions[s]))
        .count();
    hits as f64 / states.len() as f64
}

fn argmax_actions(policy: &Policy) -> Vec<usize> {
    (0..policy.n_states()).map(|s| policy.argmax(s)).collect()
}

fn all_states(n: usize) -> Vec<usize> {
    (0..n).collect()
}

/// Fraction of states where both policies' most probable actions agree.
pub fn best_matching(policy: &Policy, reference: &Policy) -> f64 {
    matching_on(
        &argmax_actions(policy),
        &argmax_actions(reference),
        &all_states(policy.n_states()),
    )
}

/// Fraction of states whose most probable action is in the ε-ball.
pub fn epsilon_matching(policy: &Policy, balls: &EpsilonBall) -> f64 {
    set_matching_on(
        &argmax_actions(policy),
        &balls.per_state,
        &all_states(policy.n_states()),
    )
}

/// `E_μ0[V^π] / E_μ0[V*]` under the true dynamics; `None` if the denominator vanishes.
pub fn normalized_value(policy: &Policy, mdp: &TabularMdp) -> Result<Option<f64>> {
    let t = mdp.true_dynamics()?;
    let v_pi = solve_values(t, &mdp.reward, mdp.discount, policy)?;
    let v_star = optimal_values(t, &mdp.reward, mdp.discount)?;
    let num = mdp.expected_start_value(&v_pi);
    let den = mdp.expected_start_value(&v_star.v);
    Ok((den.abs() >= 1e-12).then(|| num / den))
}

/// `E_μ0[V^π]` under the true dynamics.
pub fn policy_value(policy: &Policy, mdp: &TabularMdp) -> Result<f64> {
    let t = mdp.true_dynamics()?;
    let v = solve_values(t, &mdp.reward, mdp.discount, policy)?;
    Ok(mdp.expected_start_value(&v))
}

/// Mean over ordered pairs `(T, T')` of `E_μ0 |V^{π*(T)}(T) − V^{π*(T')}(T)|`.
/// All pairs are used when `n² ≤ pair_budget`; otherwise `pair_budget`
/// pairs are drawn uniformly with the given seed.
pub fn bayesian_regret(
    samples: &[Dynamics],
    rewards: &Rewards,
    gamma: f64,
    mu0: &[f64],
    pair_budget: usize,
    seed: u64,
) -> Result<f64> {
    let n = samples.len();
    if n < 2 {
        return invalid("Bayesian regret needs at least two samples");
    }
    let greedy: Vec<Vec<usize>> = samples
        .par_iter()
        .map(|t| optimal_values(t, rewards, gamma).map(|q| greedy_actions(&q)))
        .collect::<Result<_>>()?;
    let m = rewards.n_actions();

    let full = n.saturating_mul(n) <= pair_budget;
    let mut sampled: Vec<Vec<usize>> = vec![Vec::new(); n];
    if !full {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..pair_budget {
            let i = rng.random_range(0..n);
            let j = rng.random_range(0..n);
            sampled[i].push(j);
        }
    }

    let per_sample: Vec<(f64, usize)> = (0..n)
        .into_par_iter()
        .map(|i| -> Result<(f64, usize)> {
            let js: Vec<usize> = if full {
                (0..n).collect()
            } else {
                sampled[i].clone()
            };
            if js.is_empty() {
                return Ok((0.0, 0));
            }
            let t = &samples[i];
            let own = mdp_start_value(t, rewards, gamma, &greedy[i], m, mu0)?;
            let mut cache: HashMap<&[usize], f64> = HashMap::new();
            cache.insert(&greedy[i], own);
            let mut total = 0.0;
            for &j in &js {
                let key: &[usize] = &greedy[j];
                let val = match cache.get(key) {
                    Some(v) => *v,
                    None => {
                        let v = mdp_start_value(t, rewards, gamma, key, m, mu0)?;
                        cache.insert(key, v);
                        v
                    }
                };
                total += (own - val).abs();
            }
            Ok((total, js.len()))
        })
        .collect::<Result<_>>()?;
    let (sum, count) = per_sample
        .iter()
        .fold((0.0, 0usize), |(s, c), &(a, b)| (s + a, c + b));
    Ok(sum / count as f64)
}

fn mdp_start_value(
    t: &Dynamics,
    rewards: &Rewards,
    gamma: f64,
    actions: &[usize],
    n_actions: usize,
    mu0: &[f64],
) -> Result<f64> {
    let v = solve_values(
        t,
        rewards,
        gamma,
        &Policy::deterministic(n_actions, actions),
    )?;
    Ok(dot(mu0, &v))
}

/// Mean of the worst `⌈level · n⌉` values.
pub fn cvar(values: &[f64], level: f64) -> Result<f64> {
    if values.is_empty() {
        return invalid("CVaR needs at least one value");
    }
    if !(level > 0.0 && level <= 1.0) {
        return invalid(format!("CVaR level {level} outside (0, 1]"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let k = ((level * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    Ok(sorted[..k].iter().sum::<f64>() / k as f64)
}

/// Summed absolute difference over all rows (no ½ factor).
pub fn total_variation(t: &Dynamics, t_star: &Dynamics) -> f64 {
    t.as_slice()
        .iter()
        .zip(t_star.as_slice())
        .map(|(a, b)| (a - b).abs())
        .sum()
}

/// Average of the one-hot greedy policies of every sample.
pub fn averaged_posterior_policy(
    samples: &[Dynamics],
    rewards: &Rewards,
    gamma: f64,
) -> Result<Policy> {
    if samples.is_empty() {
        return invalid("averaging needs at least one sample");
    }
    let (n, m) = (rewards.n_states(), rewards.n_actions());
    let greedy: Vec<Vec<usize>> = samples
        .par_iter()
        .map(|t| optimal_values(t, rewards, gamma).map(|q| greedy_actions(&q)))
        .collect::<Result<_>>()?;
    let mut counts = vec![0usize; n * m];
    for g in &greedy {
        for (s, &a) in g.iter().enumerate() {
            counts[s * m + a] += 1;
        }
    }
    let k = samples.len() as f64;
    Policy::new(n, m, counts.into_iter().map(|c| c as f64 / k).collect())
}

pub fn averaged_policy_of(
    set: &DynamicsSampleSet,
    rewards: &Rewards,
    gamma: f64,
) -> Result<Policy> {
    averaged_posterior_policy(&set.samples, rewards, gamma)
}

/// The `k` most likely next states of `(s, a)`, ties by state index.
pub fn topk_next_states(t: &Dynamics, s: usize, a: usize, k: usize) -> Result<Vec<(usize, f64)>> {
    if k == 0 {
        return invalid("k must be at least 1");
    }
    if s >= t.n_states() || a >= t.n_actions() {
        return invalid(format!("pair ({s}, {a}) out of range"));
    }
    let mut ranked: Vec<(usize, f64)> = t.row(s, a).iter().copied().enumerate().collect();
    ranked.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
    ranked.truncate(k);
    Ok(ranked)
}

/// Mean and sample standard deviation, ignoring NaN entries.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
    (mean, var.sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Standard,
    Transfer,
}

impl Task {
    pub fn as_str(&self) -> &'static str {
        match self {
            Task::Standard => "standard",
            Task::Transfer => "transfer",
        }
    }
}

/// One metric summarized across datasets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub method: String,
    pub task: Task,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub n_datasets: usize,
}

impl MetricReport {
    pub fn from_values(method: &str, task: Task, metric: &str, values: &[f64]) -> Self {
        let (mean, std) = mean_std(values);
        Self {
            method: method.into(),
            task,
            metric: metric.into(),
            mean,
            std,
            n_datasets: values.iter().filter(|x| !x.is_nan()).count(),
        }
    }
}

/// Greedy policy of `t` under `rewards`.
pub fn greedy_policy_of(t: &Dynamics, rewards: &Rewards, gamma: f64) -> Result<Policy> {
    let q = optimal_values(t, rewards, gamma)?;
    Ok(Policy::deterministic(
        rewards.n_actions(),
        &greedy_actions(&q),
    ))
}

/// Index of the most probable action per state.
pub fn policy_argmax(policy: &Policy) -> Vec<usize> {
    (0..policy.n_states())
        .map(|s| argmax(policy.row(s)))
        .collect()
}
