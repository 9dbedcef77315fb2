#![allow(dead_code)]

use itl_core::constraints::{ConstraintKind, LinearConstraintSet, LinearRow};
use itl_core::mdp::{Dynamics, Policy, Rewards};
use itl_core::qp::QpProblem;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_row(rng: &mut impl Rng, n: usize, sparsity: f64) -> Vec<f64> {
    let mut row: Vec<f64> = (0..n)
        .map(|_| {
            if rng.random::<f64>() < sparsity {
                0.0
            } else {
                rng.random_range(0.01..1.0)
            }
        })
        .collect();
    if row.iter().all(|&x| x == 0.0) {
        row[rng.random_range(0..n)] = 1.0;
    }
    let total: f64 = row.iter().sum();
    row.iter_mut().for_each(|x| *x /= total);
    row
}

pub fn random_dynamics(rng: &mut impl Rng, n: usize, m: usize, sparsity: f64) -> Dynamics {
    let data: Vec<f64> = (0..n * m).flat_map(|_| random_row(rng, n, sparsity)).collect();
    Dynamics::new(n, m, data).unwrap()
}

pub fn random_rewards(rng: &mut impl Rng, n: usize, m: usize) -> Rewards {
    Rewards::new(n, m, (0..n * m).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn random_policy(rng: &mut impl Rng, n: usize, m: usize) -> Policy {
    Policy::new(n, m, (0..n).flat_map(|_| random_row(rng, m, 0.3)).collect()).unwrap()
}

/// Weighted projection of `y` onto the unit simplex by bisection on the
/// multiplier: `x_i = max(0, y_i + τ / p_i)` with `Σ x = 1`.
pub fn bisect_projection(y: &[f64], p: &[f64]) -> Vec<f64> {
    let at = |tau: f64| -> f64 { y.iter().zip(p).map(|(y, p)| (y + tau / p).max(0.0)).sum() };
    let pmax = p.iter().copied().fold(0.0, f64::max);
    let ymax = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ymin = y.iter().copied().fold(f64::INFINITY, f64::min);
    let mut lo = -(ymax.abs() + 1.0) * pmax;
    let mut hi = (ymin.abs() + 1.0) * pmax;
    while at(lo) > 1.0 {
        lo *= 2.0;
    }
    while at(hi) < 1.0 {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if at(mid) < 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let tau = 0.5 * (lo + hi);
    y.iter().zip(p).map(|(y, p)| (y + tau / p).max(0.0)).collect()
}

/// Long-run accelerated projected gradient ascent on the dual of the
/// weighted projection problem. Each dual step projects onto the product of
/// simplices with [`bisect_projection`].
pub fn dual_oracle(problem: &QpProblem, iterations: usize) -> Vec<f64> {
    let c = &problem.constraints;
    let n = c.n_states;
    let p: Vec<f64> = problem.weights.iter().map(|w| w + problem.ridge).collect();
    let k = c.rows.len();
    let primal = |nu: &[f64]| -> Vec<f64> {
        let mut y = problem.x0.clone();
        for (row, &v) in c.rows.iter().zip(nu) {
            for &(i, a) in &row.coeffs {
                y[i] += v * a / p[i];
            }
        }
        y.chunks(n)
            .zip(p.chunks(n))
            .flat_map(|(yr, pr)| bisect_projection(yr, pr))
            .collect()
    };
    let lipschitz: f64 = c
        .rows
        .iter()
        .map(|r| r.coeffs.iter().map(|&(i, a)| a * a / p[i]).sum::<f64>())
        .sum::<f64>()
        .max(1e-12);
    // Each row has a lower and an upper multiplier, which doubles the constant.
    let step = 0.5 / lipschitz;
    // lambda[2k] for the lower side, lambda[2k+1] for the upper.
    let mut lambda = vec![0.0; 2 * k];
    let mut prev = lambda.clone();
    let mut t = 1.0f64;
    for _ in 0..iterations {
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let beta = (t - 1.0) / t_next;
        let look: Vec<f64> = lambda
            .iter()
            .zip(&prev)
            .map(|(l, q)| (l + beta * (l - q)).max(0.0))
            .collect();
        let nu: Vec<f64> = (0..k).map(|j| look[2 * j] - look[2 * j + 1]).collect();
        let x = primal(&nu);
        prev = lambda.clone();
        for (j, row) in c.rows.iter().enumerate() {
            let v = row.eval(&x);
            lambda[2 * j] = (look[2 * j] + step * (row.lower - v)).max(0.0);
            lambda[2 * j + 1] = (look[2 * j + 1] + step * (v - row.upper)).max(0.0);
        }
        t = t_next;
    }
    let nu: Vec<f64> = (0..k).map(|j| lambda[2 * j] - lambda[2 * j + 1]).collect();
    primal(&nu)
}

/// Random feasible projection instance: rows are built around a random
/// interior tensor, some with a zero-width band.
pub fn random_qp(seed: u64) -> QpProblem {
    let mut rng = rng(seed);
    let n = rng.random_range(2..=4);
    let m = rng.random_range(1..=2);
    let d = n * m * n;
    let anchor = random_dynamics(&mut rng, n, m, 0.0);
    let x0: Vec<f64> = (0..d).map(|_| rng.random_range(-0.2..1.0)).collect();
    let weights: Vec<f64> = (0..d).map(|_| rng.random_range(0.5..5.0)).collect();
    let mut set = LinearConstraintSet::empty(n, m);
    for spec in 0..rng.random_range(1..=4) {
        let mut coeffs = Vec::new();
        for i in 0..d {
            if rng.random::<f64>() < 0.6 {
                coeffs.push((i, rng.random_range(-2.0..2.0)));
            }
        }
        if coeffs.is_empty() {
            continue;
        }
        let row = LinearRow {
            coeffs,
            lower: 0.0,
            upper: 0.0,
            spec,
            kind: ConstraintKind::Separation,
        };
        let v = row.eval(anchor.as_slice());
        let (lo, hi) = if rng.random::<f64>() < 0.25 {
            (v, v)
        } else {
            (v - rng.random_range(0.0..0.3), v + rng.random_range(0.0..0.3))
        };
        set.rows.push(LinearRow {
            lower: lo,
            upper: hi,
            ..row
        });
    }
    QpProblem::new(x0, weights, set)
}

/// Central difference of `f` along coordinate `i`.
pub fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut xp = x.to_vec();
    let mut xm = x.to_vec();
    xp[i] += h;
    xm[i] -= h;
    (f(&xp) - f(&xm)) / (2.0 * h)
}

/// Largest coordinate error between `analytic` and central differences,
/// relative to `max(1, ‖analytic‖∞)`.
pub fn gradient_error(f: impl Fn(&[f64]) -> f64, x: &[f64], analytic: &[f64], h: f64) -> f64 {
    let scale = analytic.iter().map(|g| g.abs()).fold(1.0, f64::max);
    (0..x.len())
        .map(|i| (central_difference(&f, x, i, h) - analytic[i]).abs() / scale)
        .fold(0.0, f64::max)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
