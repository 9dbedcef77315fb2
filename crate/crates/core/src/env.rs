//! Synthetic environments (Gridworld, Randomworld), their transfer rewards,
//! and ε-optimal experts.

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::mdp::{epsilon_ball, Dynamics, EpsilonBall, Policy, Rewards, TabularMdp, ValueResult};

pub const GRID_ACTIONS: usize = 4;
/// Action labels in index order.
pub const GRID_ACTION_NAMES: [&str; 4] = ["right", "up", "left", "down"];

/// How a slip is distributed over the four movement directions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlipModel {
    /// Uniform over all four directions, the intended one included.
    #[default]
    UniformAll,
    /// Uniform over the three directions other than the intended one.
    OtherDirections,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridworldSpec {
    pub width: usize,
    pub height: usize,
    pub slip_prob: f64,
    pub slip_model: SlipModel,
    pub soft_wall_tiles: Vec<usize>,
    pub soft_wall_penalty: f64,
    pub step_penalty: f64,
    pub goal_reward: f64,
    pub start: usize,
    pub goal: usize,
    pub discount: f64,
}

impl Default for GridworldSpec {
    fn default() -> Self {
        Self {
            width: 5,
            height: 5,
            slip_prob: 0.2,
            slip_model: SlipModel::UniformAll,
            soft_wall_tiles: column_tiles(5, 3, 2..5),
            soft_wall_penalty: -5.0,
            step_penalty: -0.1,
            goal_reward: 10.0,
            start: 20,
            goal: 4,
            discount: 0.95,
        }
    }
}

fn column_tiles(width: usize, col: usize, rows: std::ops::Range<usize>) -> Vec<usize> {
    rows.map(|r| r * width + col).collect()
}

impl GridworldSpec {
    /// The transfer layout: the soft wall moved one column to the left.
    pub fn shifted_wall(&self) -> Self {
        let soft_wall_tiles = self
            .soft_wall_tiles
            .iter()
            .map(|&t| if t % self.width > 0 { t - 1 } else { t })
            .collect();
        Self {
            soft_wall_tiles,
            ..self.clone()
        }
    }

    pub fn n_states(&self) -> usize {
        self.width * self.height
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_states();
        if n == 0 {
            return invalid("gridworld needs a positive size");
        }
        if !(0.0..=1.0).contains(&self.slip_prob) {
            return invalid(format!("slip_prob {} outside [0, 1]", self.slip_prob));
        }
        if self.start >= n || self.goal >= n {
            return invalid("start or goal tile out of range");
        }
        if self.start == self.goal {
            return invalid("start and goal coincide");
        }
        if self.soft_wall_tiles.contains(&self.goal) {
            return invalid("goal tile is a soft wall");
        }
        if let Some(t) = self.soft_wall_tiles.iter().find(|&&t| t >= n) {
            return invalid(format!("soft wall tile {t} out of range"));
        }
        Ok(())
    }

    /// Tile reached by moving `action` from `tile`; edges keep the agent in place.
    pub fn step(&self, tile: usize, action: usize) -> usize {
        let (row, col) = (tile / self.width, tile % self.width);
        match action {
            0 if col + 1 < self.width => tile + 1,
            1 if row > 0 => tile - self.width,
            2 if col > 0 => tile - 1,
            3 if row + 1 < self.height => tile + self.width,
            _ => tile,
        }
    }

    /// Reward collected on entering each tile.
    pub fn entry_rewards(&self) -> Vec<f64> {
        (0..self.n_states())
            .map(|t| {
                if t == self.goal {
                    self.goal_reward
                } else if self.soft_wall_tiles.contains(&t) {
                    self.soft_wall_penalty
                } else {
                    self.step_penalty
                }
            })
            .collect()
    }

    pub fn dynamics(&self) -> Dynamics {
        let n = self.n_states();
        let mut t = Dynamics::from_fn(n, GRID_ACTIONS, |_, _, _| 0.0);
        for s in 0..n {
            for a in 0..GRID_ACTIONS {
                let row = t.row_mut(s, a);
                if s == self.goal {
                    row[s] = 1.0;
                    continue;
                }
                let (intended, others) = match self.slip_model {
                    SlipModel::UniformAll => (
                        1.0 - self.slip_prob + self.slip_prob / 4.0,
                        self.slip_prob / 4.0,
                    ),
                    SlipModel::OtherDirections => (1.0 - self.slip_prob, self.slip_prob / 3.0),
                };
                for d in 0..GRID_ACTIONS {
                    row[self.step(s, d)] += if d == a { intended } else { others };
                }
            }
        }
        t
    }
}

pub fn build_gridworld(spec: &GridworldSpec) -> Result<TabularMdp> {
    spec.validate()?;
    let t = spec.dynamics();
    let r = Rewards::from_entry_rewards(&t, &spec.entry_rewards());
    let mut mu0 = vec![0.0; spec.n_states()];
    mu0[spec.start] = 1.0;
    TabularMdp::new(Some(t), r, spec.discount, mu0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RandomworldSpec {
    pub n_states: usize,
    pub n_actions: usize,
    pub successors_per_pair: usize,
    pub seed: u64,
    pub discount: f64,
}

impl Default for RandomworldSpec {
    fn default() -> Self {
        Self {
            n_states: 15,
            n_actions: 5,
            successors_per_pair: 5,
            seed: 0,
            discount: 0.95,
        }
    }
}

/// Rewards for 1-based state `s` uniform on `[n+1-s-1, n+1-s]`.
fn randomworld_rewards(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (1..=n)
        .map(|s| {
            let hi = (n + 1 - s) as f64;
            rng.random_range(hi - 1.0..hi)
        })
        .collect()
}

/// Rewards for 1-based state `s` uniform on `[s-1, s]`.
fn randomworld_inverted_rewards(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (1..=n)
        .map(|s| rng.random_range(s as f64 - 1.0..s as f64))
        .collect()
}

pub fn build_randomworld(spec: &RandomworldSpec) -> Result<TabularMdp> {
    let (n, m, k) = (spec.n_states, spec.n_actions, spec.successors_per_pair);
    if n == 0 || m == 0 || k == 0 || k > n {
        return invalid(format!(
            "randomworld needs 1 <= successors_per_pair ({k}) <= n_states ({n})"
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut t = Dynamics::from_fn(n, m, |_, _, _| 0.0);
    for s in 0..n {
        for a in 0..m {
            let mut succ = sample_indices(&mut rng, n, k).into_vec();
            succ.sort_unstable();
            // Open interval keeps every chosen successor strictly positive.
            let weights: Vec<f64> = (0..k)
                .map(|_| rng.random_range(f64::EPSILON..1.0))
                .collect();
            let total: f64 = weights.iter().sum();
            let row = t.row_mut(s, a);
            for (sp, w) in succ.into_iter().zip(weights) {
                row[sp] = w / total;
            }
        }
    }
    let r = Rewards::from_state_rewards(&randomworld_rewards(n, &mut rng), m);
    TabularMdp::new(Some(t), r, spec.discount, vec![1.0 / n as f64; n])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TransferVariant {
    GridworldShiftedWall { spec: GridworldSpec },
    RandomworldInverted { seed: u64 },
    CustomTable { reward: Vec<f64> },
}

/// Same dynamics, new reward table.
pub fn transfer_reward(mdp: &TabularMdp, variant: &TransferVariant) -> Result<TabularMdp> {
    let reward = match variant {
        TransferVariant::GridworldShiftedWall { spec } => {
            if spec.n_states() != mdp.n_states || mdp.n_actions != GRID_ACTIONS {
                return Err(Error::InvalidInput(
                    "shifted-wall transfer needs a gridworld MDP".into(),
                ));
            }
            let shifted = spec.shifted_wall();
            Rewards::from_entry_rewards(mdp.true_dynamics()?, &shifted.entry_rewards())
        }
        TransferVariant::RandomworldInverted { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            Rewards::from_state_rewards(
                &randomworld_inverted_rewards(mdp.n_states, &mut rng),
                mdp.n_actions,
            )
        }
        TransferVariant::CustomTable { reward } => {
            Rewards::new(mdp.n_states, mdp.n_actions, reward.clone())?
        }
    };
    mdp.with_rewards(reward)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExpertSpec {
    pub epsilon: f64,
    #[serde(default)]
    pub target_stochastic_fraction: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Expert {
    pub policy: Policy,
    pub ball: EpsilonBall,
    pub epsilon: f64,
    pub stochastic_fraction: f64,
}

pub const EPSILON_GRID_SIZE: usize = 200;

/// Uniform expert over the ε-ball of `Q*(T*)`. With a target fraction, ε is
/// searched on an evenly spaced grid from 0 to the largest Q-gap.
pub fn build_expert(mdp: &TabularMdp, spec: &ExpertSpec) -> Result<Expert> {
    let q = mdp.optimal_values()?;
    let epsilon = match spec.target_stochastic_fraction {
        None => {
            if spec.epsilon < 0.0 {
                return invalid("expert epsilon must be nonnegative");
            }
            spec.epsilon
        }
        Some(target) => {
            if !(0.0..=1.0).contains(&target) {
                return invalid(format!("target fraction {target} outside [0, 1]"));
            }
            search_epsilon(&q, target)
        }
    };
    Ok(expert_from_values(&q, epsilon))
}

pub fn expert_from_values(q: &ValueResult, epsilon: f64) -> Expert {
    let ball = epsilon_ball(q, epsilon);
    let policy = Policy::uniform_over(q.n_actions, &ball.per_state);
    let stochastic_fraction = ball.stochastic_fraction();
    Expert {
        policy,
        ball,
        epsilon,
        stochastic_fraction,
    }
}

/// Picks the grid ε whose stochastic fraction is closest to `target`. The
/// fraction is monotone in ε, so the crossing is found by bisection; among
/// grid points sharing the best fraction the middle one is returned.
pub fn search_epsilon(q: &ValueResult, target: f64) -> f64 {
    let max_gap = (0..q.n_states())
        .map(|s| {
            let row = q.q_row(s);
            let hi = row.iter().copied().fold(f64::MIN, f64::max);
            let lo = row.iter().copied().fold(f64::MAX, f64::min);
            hi - lo
        })
        .fold(0.0, f64::max);
    let grid: Vec<f64> = (0..EPSILON_GRID_SIZE)
        .map(|i| max_gap * i as f64 / (EPSILON_GRID_SIZE - 1) as f64)
        .collect();
    let frac = |i: usize| epsilon_ball(q, grid[i]).stochastic_fraction();

    // First index whose fraction reaches the target.
    let (mut lo, mut hi) = (0, EPSILON_GRID_SIZE - 1);
    if frac(hi) < target {
        lo = hi;
    } else {
        while lo < hi {
            let mid = (lo + hi) / 2;
            if frac(mid) >= target {
                hi = mid;
            } else {
                lo = mid + 1;
            }
        }
    }
    let mut best = lo;
    if lo > 0 && (frac(lo - 1) - target).abs() <= (frac(lo) - target).abs() {
        best = lo - 1;
    }
    let f = frac(best);
    let mut first = best;
    while first > 0 && frac(first - 1) == f {
        first -= 1;
    }
    let mut last = best;
    while last + 1 < EPSILON_GRID_SIZE && frac(last + 1) == f {
        last += 1;
    }
    grid[(first + last) / 2]
}

/// Samples a trajectory of `steps` transitions under `policy`, returning the visited states.
pub fn simulate(
    mdp: &TabularMdp,
    policy: &Policy,
    start: usize,
    steps: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    let t = mdp.true_dynamics()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = start;
    let mut path = Vec::with_capacity(steps + 1);
    path.push(s);
    for _ in 0..steps {
        let a = draw(policy.row(s), &mut rng);
        s = draw(t.row(s, a), &mut rng);
        path.push(s);
    }
    Ok(path)
}

pub(crate) fn draw(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs
        .iter()
        .rposition(|&p| p > 0.0)
        .unwrap_or(probs.len() - 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{greedy_policy, SIMPLEX_TOL};

    #[test]
    fn corner_into_wall_without_slip_stays() {
        let spec = GridworldSpec {
            slip_prob: 0.0,
            ..Default::default()
        };
        let t = spec.dynamics();
        // Tile 0 is the top-left corner; "up" and "left" hit walls.
        assert_eq!(t.get(0, 1, 0), 1.0);
        assert_eq!(t.get(0, 2, 0), 1.0);
    }

    #[test]
    fn interior_slip_distribution() {
        let t = GridworldSpec::default().dynamics();
        let s = 12; // row 2, col 2
        let row = t.row(s, 0);
        assert!((row[13] - 0.85).abs() < 1e-12);
        for other in [7, 11, 17] {
            assert!((row[other] - 0.05).abs() < 1e-12);
        }
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn other_directions_slip_model() {
        let spec = GridworldSpec {
            slip_model: SlipModel::OtherDirections,
            ..Default::default()
        };
        let row = spec.dynamics().row(12, 0).to_vec();
        assert!((row[13] - 0.8).abs() < 1e-12);
        assert!((row[7] - 0.2 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn gridworld_rows_and_goal() {
        let mdp = build_gridworld(&GridworldSpec::default()).unwrap();
        let t = mdp.true_dynamics().unwrap();
        t.validate(SIMPLEX_TOL).unwrap();
        for a in 0..4 {
            assert_eq!(t.get(4, a, 4), 1.0);
            assert!((mdp.reward.get(4, a) - 10.0).abs() < 1e-12);
        }
        assert_eq!(mdp.initial_dist[20], 1.0);
    }

    #[test]
    fn shifted_wall_keeps_dynamics() {
        let spec = GridworldSpec::default();
        let mdp = build_gridworld(&spec).unwrap();
        let moved = transfer_reward(
            &mdp,
            &TransferVariant::GridworldShiftedWall { spec: spec.clone() },
        )
        .unwrap();
        assert_eq!(moved.dynamics, mdp.dynamics);
        assert_ne!(moved.reward, mdp.reward);
        assert_eq!(spec.shifted_wall().soft_wall_tiles, vec![12, 17, 22]);
    }

    #[test]
    fn randomworld_structure() {
        let spec = RandomworldSpec {
            seed: 7,
            ..Default::default()
        };
        let a = build_randomworld(&spec).unwrap();
        let b = build_randomworld(&spec).unwrap();
        assert_eq!(a, b);
        let t = a.true_dynamics().unwrap();
        for s in 0..15 {
            for act in 0..5 {
                let row = t.row(s, act);
                assert_eq!(row.iter().filter(|p| **p > 0.0).count(), 5);
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn randomworld_reward_intervals() {
        let mdp = build_randomworld(&RandomworldSpec::default()).unwrap();
        for s in 0..15 {
            let hi = 15.0 - s as f64;
            let r = mdp.reward.get(s, 0);
            assert!(r >= hi - 1.0 && r <= hi, "state {} reward {r}", s + 1);
        }
        let inv = transfer_reward(&mdp, &TransferVariant::RandomworldInverted { seed: 3 }).unwrap();
        for s in 0..15 {
            let r = inv.reward.get(s, 2);
            assert!(r >= s as f64 && r <= s as f64 + 1.0);
        }
    }

    #[test]
    fn zero_custom_reward_has_zero_value() {
        let mdp = build_gridworld(&GridworldSpec::default()).unwrap();
        let zero = transfer_reward(
            &mdp,
            &TransferVariant::CustomTable {
                reward: vec![0.0; 100],
            },
        )
        .unwrap();
        let v = zero.optimal_values().unwrap();
        assert!(v.v.iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn zero_epsilon_expert_is_greedy() {
        let mdp = build_randomworld(&RandomworldSpec::default()).unwrap();
        let ex = build_expert(
            &mdp,
            &ExpertSpec {
                epsilon: 0.0,
                target_stochastic_fraction: None,
            },
        )
        .unwrap();
        let greedy = greedy_policy(&mdp.optimal_values().unwrap());
        assert_eq!(ex.policy, greedy);
        assert_eq!(ex.stochastic_fraction, 0.0);
    }

    #[test]
    fn zero_target_fraction_on_randomworld() {
        let mdp = build_randomworld(&RandomworldSpec::default()).unwrap();
        let ex = build_expert(
            &mdp,
            &ExpertSpec {
                epsilon: 0.0,
                target_stochastic_fraction: Some(0.0),
            },
        )
        .unwrap();
        assert_eq!(ex.stochastic_fraction, 0.0);
    }

    #[test]
    fn expert_support_equals_ball() {
        let mdp = build_gridworld(&GridworldSpec::default()).unwrap();
        let ex = build_expert(
            &mdp,
            &ExpertSpec {
                epsilon: 1.0,
                target_stochastic_fraction: None,
            },
        )
        .unwrap();
        for s in 0..25 {
            assert_eq!(ex.policy.support(s), ex.ball.per_state[s]);
        }
    }

    #[test]
    fn optimal_gridworld_policy_reaches_goal() {
        let mdp = build_gridworld(&GridworldSpec::default()).unwrap();
        let pi = greedy_policy(&mdp.optimal_values().unwrap());
        let path = simulate(&mdp, &pi, 20, 10_000, 1).unwrap();
        let at_goal = path.iter().filter(|&&s| s == 4).count() as f64 / path.len() as f64;
        assert!(at_goal >= 0.99, "fraction at goal {at_goal}");
    }
}
