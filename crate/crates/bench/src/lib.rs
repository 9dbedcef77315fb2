//! Shared fixtures for the benchmarks.

use itl_core::constraints::ExpertConstraints;
use itl_core::data::{estimate_expert_policy, generate_batch, DEFAULT_DELTA};
use itl_core::env::{build_expert, build_gridworld, ExpertSpec, GridworldSpec};
use itl_core::{BatchDataset, TabularMdp};

pub struct Fixture {
    pub mdp: TabularMdp,
    pub data: BatchDataset,
    pub epsilon: f64,
    pub constraints: ExpertConstraints,
}

/// Default gridworld with an expert that is stochastic on `fraction` of states.
pub fn gridworld(coverage: f64, fraction: f64, seed: u64) -> Fixture {
    let mdp = build_gridworld(&GridworldSpec::default()).expect("default gridworld");
    let expert = build_expert(
        &mdp,
        &ExpertSpec {
            epsilon: 0.0,
            target_stochastic_fraction: Some(fraction),
        },
    )
    .expect("expert");
    let data = generate_batch(&mdp, &expert, coverage, 10, DEFAULT_DELTA, seed).expect("batch");
    let constraints = ExpertConstraints::new(
        estimate_expert_policy(&data, 0.0).expect("expert policy"),
        mdp.reward.clone(),
        mdp.discount,
        expert.epsilon,
        false,
    )
    .expect("constraints");
    Fixture {
        epsilon: expert.epsilon,
        mdp,
        data,
        constraints,
    }
}
