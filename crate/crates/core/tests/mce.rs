mod common;

use common::*;
use itl_core::data::{generate_batch, DEFAULT_DELTA};
use itl_core::env::{build_expert, build_randomworld, ExpertSpec, RandomworldSpec};
use itl_core::mce::{fit_mce, gradient, loss, soft_value_iteration, softmax_dynamics, MceConfig};
use itl_core::mdp::{optimal_values, SIMPLEX_TOL};
use proptest::prelude::*;
use rand::Rng;

fn small_batch(seed: u64) -> (itl_core::TabularMdp, itl_core::BatchDataset) {
    let mdp = build_randomworld(&RandomworldSpec {
        n_states: 4,
        n_actions: 2,
        successors_per_pair: 3,
        seed,
        ..Default::default()
    })
    .unwrap();
    let expert = build_expert(
        &mdp,
        &ExpertSpec {
            epsilon: 0.5,
            target_stochastic_fraction: None,
        },
    )
    .unwrap();
    let data = generate_batch(&mdp, &expert, 1.0, 4, DEFAULT_DELTA, seed).unwrap();
    (mdp, data)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn full_gradient_matches_finite_differences(seed in 1u64..500) {
        let (mdp, data) = small_batch(seed);
        let (n, m, gamma, tau) = (4, 2, mdp.discount, 1.0);
        let mut rng = rng(seed);
        let theta: Vec<f64> = (0..n * m * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let objective = |th: &[f64]| {
            let t = softmax_dynamics(th, n, m).unwrap();
            let q = soft_value_iteration(&t, &mdp.reward, gamma, tau, 1e-14, None).unwrap();
            loss(&data, th, &q, tau)
        };
        let t = softmax_dynamics(&theta, n, m).unwrap();
        let q = soft_value_iteration(&t, &mdp.reward, gamma, tau, 1e-14, None).unwrap();
        let g = gradient(&data, &theta, gamma, tau, &q, true).unwrap();
        prop_assert!(gradient_error(objective, &theta, &g, 1e-5) <= 1e-5);
    }

    #[test]
    fn soft_values_bracket_hard_values(seed in any::<u64>(), tau in 0.01f64..1.0) {
        let mut rng = rng(seed);
        let (n, m) = (rng.random_range(2..=6), rng.random_range(1..=4));
        let t = random_dynamics(&mut rng, n, m, 0.3);
        let r = random_rewards(&mut rng, n, m);
        let gamma = 0.9;
        let soft = soft_value_iteration(&t, &r, gamma, tau, 1e-12, None).unwrap();
        let hard = optimal_values(&t, &r, gamma).unwrap();
        // 0 ≤ Q_soft − Q* ≤ γ τ log m / (1 − γ)
        let slack = gamma * tau * (m as f64).ln() / (1.0 - gamma);
        for (s, h) in soft.iter().zip(&hard.q) {
            prop_assert!(s - h >= -1e-8);
            prop_assert!(s - h <= slack + 1e-8);
        }
    }
}

#[test]
fn zero_logits_are_uniform() {
    let t = softmax_dynamics(&[0.0; 18], 3, 2).unwrap();
    assert!(t.as_slice().iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-15));
    let big = softmax_dynamics(&[800.0, 0.0, 0.0, 0.0], 2, 1).unwrap();
    big.validate(SIMPLEX_TOL).unwrap();
    assert!((big.get(0, 0, 0) - 1.0).abs() < 1e-12);
}

#[test]
fn fitting_raises_the_likelihood() {
    let (mdp, data) = small_batch(7);
    let config = MceConfig {
        max_steps: 300,
        ..Default::default()
    };
    let res = fit_mce(&data, &mdp.reward, mdp.discount, &config).unwrap();
    res.t.validate(SIMPLEX_TOL).unwrap();
    let history = &res.state.loss_history;
    assert_eq!(history.len(), res.steps + 1);
    assert!(history.last().unwrap() > &history[0]);
    let again = fit_mce(&data, &mdp.reward, mdp.discount, &config).unwrap();
    assert_eq!(res.t, again.t);
    let bad = MceConfig {
        learning_rate: 0.0,
        ..Default::default()
    };
    assert!(fit_mce(&data, &mdp.reward, mdp.discount, &bad).is_err());
}
