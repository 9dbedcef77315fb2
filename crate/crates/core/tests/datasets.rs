use itl_core::data::{
    estimate_expert_policy, generate_batch, load_dataset, mle_estimate, parse_dataset,
    read_dataset, sample_dirichlet_posterior, write_dataset, BatchDataset, DatasetSchema,
    TabularSchema, Transition, DEFAULT_DELTA,
};
use itl_core::env::{build_expert, build_randomworld, ExpertSpec, RandomworldSpec};
use itl_core::error::Error;
use itl_core::mdp::SIMPLEX_TOL;
use proptest::prelude::*;

fn schema(n_states: usize, n_actions: usize) -> DatasetSchema {
    DatasetSchema {
        n_states,
        n_actions,
        delta: DEFAULT_DELTA,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn batch_shape_follows_coverage(seed in any::<u64>(), coverage in 0.05f64..1.0, k in 1usize..6) {
        let mdp = build_randomworld(&RandomworldSpec { seed, ..Default::default() }).unwrap();
        let expert = build_expert(&mdp, &ExpertSpec {
            epsilon: 0.0,
            target_stochastic_fraction: Some(0.4),
        }).unwrap();
        let data = generate_batch(&mdp, &expert, coverage, k, DEFAULT_DELTA, seed).unwrap();
        let states = data.observed_states();
        prop_assert_eq!(states.len(), (coverage * 15.0).ceil() as usize);
        for &s in &states {
            for a in 0..mdp.n_actions {
                let want = if expert.ball.contains(s, a) { k as u64 } else { 0 };
                prop_assert_eq!(data.pair_count(s, a), want);
            }
        }
        let t = mdp.true_dynamics().unwrap();
        for tr in data.transitions() {
            prop_assert!(t.get(tr.s, tr.a, tr.s_next) > 0.0);
        }
    }

    #[test]
    fn mle_is_smoothed_frequency(seed in any::<u64>(), delta in 1e-4f64..2.0) {
        let mdp = build_randomworld(&RandomworldSpec { seed, ..Default::default() }).unwrap();
        let expert = build_expert(&mdp, &ExpertSpec { epsilon: 0.5, target_stochastic_fraction: None }).unwrap();
        let data = generate_batch(&mdp, &expert, 0.5, 3, delta, seed).unwrap();
        let mle = mle_estimate(&data);
        mle.validate(SIMPLEX_TOL).unwrap();
        let n = data.n_states();
        for s in 0..n {
            for a in 0..data.n_actions() {
                let total = data.pair_count(s, a) as f64 + n as f64 * delta;
                for sp in 0..n {
                    let want = (data.count(s, a, sp) as f64 + delta) / total;
                    prop_assert!((mle.get(s, a, sp) - want).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn dirichlet_posterior_moments() {
    let data = BatchDataset::from_transitions(
        3,
        1,
        0.5,
        vec![
            Transition { s: 0, a: 0, s_next: 0 },
            Transition { s: 0, a: 0, s_next: 1 },
            Transition { s: 0, a: 0, s_next: 1 },
        ],
    )
    .unwrap();
    let set = sample_dirichlet_posterior(&data, 20_000, 3).unwrap();
    let mean = set.mean().unwrap();
    // Dir(1.5, 2.5, 0.5): mean α/4.5, variance α(4.5−α)/(4.5²·5.5)
    let alpha = [1.5, 2.5, 0.5];
    for (sp, a) in alpha.iter().enumerate() {
        let m = a / 4.5;
        let var = a * (4.5 - a) / (4.5 * 4.5 * 5.5);
        assert!((mean.get(0, 0, sp) - m).abs() < 4.0 * (var / 20_000.0f64).sqrt());
        let emp: f64 = set
            .samples
            .iter()
            .map(|t| (t.get(0, 0, sp) - m).powi(2))
            .sum::<f64>()
            / 20_000.0;
        assert!((emp - var).abs() < 0.05 * var + 1e-4);
    }
    // Unobserved rows are Dir(δ, δ, δ).
    assert!((mean.get(1, 0, 2) - 1.0 / 3.0).abs() < 0.02);
    let again = sample_dirichlet_posterior(&data, 50, 3).unwrap();
    assert_eq!(again.samples[..], set.samples[..50]);
}

#[test]
fn parse_rejects_bad_rows() {
    let s = schema(3, 2);
    let ok = parse_dataset("s,a,s_next\n0,1,2\n2,0,0\n", &s).unwrap();
    assert_eq!(ok.len(), 2);
    assert_eq!(ok.count(0, 1, 2), 1);
    assert!(matches!(
        parse_dataset("s,a,s_next\n3,0,0\n", &s),
        Err(Error::OutOfRange { line: 2, .. })
    ));
    assert!(matches!(
        parse_dataset("s,a,s_next\n0,0,-1\n", &s),
        Err(Error::OutOfRange { .. })
    ));
    assert!(matches!(
        parse_dataset("s,a,s_next\n0,x,1\n", &s),
        Err(Error::Parse { .. })
    ));
    assert!(parse_dataset("", &s).unwrap().is_empty());
}

#[test]
fn file_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let mdp = build_randomworld(&RandomworldSpec::default()).unwrap();
    let expert = build_expert(
        &mdp,
        &ExpertSpec {
            epsilon: 0.2,
            target_stochastic_fraction: None,
        },
    )
    .unwrap();
    let data = generate_batch(&mdp, &expert, 0.7, 4, 0.01, 5).unwrap();
    let path = dir.path().join("batch.csv");
    write_dataset(&path, &data).unwrap();
    assert_eq!(read_dataset(&path).unwrap(), data);
    let plain = load_dataset(&path, &schema(15, 5)).unwrap();
    assert_eq!(plain.counts(), data.counts());
}

#[test]
fn expert_estimate_thresholds_rare_actions() {
    let mut tr = Vec::new();
    for _ in 0..19 {
        tr.push(Transition { s: 0, a: 0, s_next: 1 });
    }
    tr.push(Transition { s: 0, a: 1, s_next: 1 });
    let data = BatchDataset::from_transitions(2, 2, DEFAULT_DELTA, tr).unwrap();
    let all = estimate_expert_policy(&data, 0.0).unwrap();
    assert_eq!(all.valid_or_all()[0], vec![0, 1]);
    let frequent = estimate_expert_policy(&data, 0.1).unwrap();
    assert_eq!(frequent.valid_or_all()[0], vec![0]);
    assert!(!frequent.is_observed(1));
    assert_eq!(frequent.valid_or_all()[1], vec![0, 1]);
}

#[test]
fn healthcare_schema_indexing() {
    let schema = TabularSchema::healthcare();
    assert_eq!((schema.n_states(), schema.n_actions()), (36, 4));
    for s in 0..36 {
        assert_eq!(schema.state_index(&schema.state_bins(s)).unwrap(), s);
    }
    assert!(schema.state_index(&[3, 0, 0, 0]).is_err());
    let r = schema.rewards();
    assert_eq!(r.get(0, 0), schema.reward_base);
    // Worst bins on every weighted feature.
    let worst = schema.state_index(&[2, 1, 1, 2]).unwrap();
    assert_eq!(r.get(worst, 2), 60.0 - 20.0 - 10.0 - 20.0);
    let moved = schema.transfer_rewards();
    assert_eq!(moved.get(worst, 0), 60.0 - 10.0 - 20.0);
}
