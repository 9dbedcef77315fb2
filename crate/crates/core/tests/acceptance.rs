//! Desk-scale acceptance suite. Prints one line per criterion with the
//! measured value and its tolerance, and exits nonzero when a hard
//! criterion fails. Criterion 7 is recorded but never fails the run.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use itl_core::bitl::{self, transform::Potential, HmcConfig};
use itl_core::constraints::ExpertConstraints;
use itl_core::data::{
    estimate_expert_policy, generate_batch, mle_estimate, parse_dataset,
    sample_dirichlet_posterior, BatchDataset, TabularSchema, DEFAULT_DELTA,
};
use itl_core::env::{
    build_expert, build_gridworld, build_randomworld, Expert, ExpertSpec, GridworldSpec,
    RandomworldSpec,
};
use itl_core::error::Error;
use itl_core::itl::{self, epsilon_sweep, ItlConfig, ItlResult};
use itl_core::mce::{self, MceConfig};
use itl_core::mdp::{
    evaluate_policy, evaluate_policy_iterative, greedy_actions, optimal_values, value_iteration,
    Dynamics, TabularMdp,
};
use itl_core::metrics::{self, DEFAULT_PAIR_BUDGET};
use itl_core::qp::{self, QpSettings, QpStatus};
use itl_core::seed::{cell_seed, Stream};
use rand::Rng;

use common::*;

const BASE_SEED: u64 = 2024;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn failed(e: impl std::fmt::Display) -> Outcome {
    outcome(false, format!("error: {e}"))
}

fn grid() -> TabularMdp {
    build_gridworld(&GridworldSpec::default()).unwrap()
}

fn expert_with_fraction(mdp: &TabularMdp, fraction: f64) -> Expert {
    build_expert(
        mdp,
        &ExpertSpec {
            epsilon: 0.0,
            target_stochastic_fraction: Some(fraction),
        },
    )
    .unwrap()
}

fn constraints_for(data: &BatchDataset, mdp: &TabularMdp, epsilon: f64) -> ExpertConstraints {
    ExpertConstraints::new(
        estimate_expert_policy(data, 0.0).unwrap(),
        mdp.reward.clone(),
        mdp.discount,
        epsilon,
        false,
    )
    .unwrap()
}

fn violations(ec: &ExpertConstraints, t: &Dynamics) -> usize {
    ec.check(t).map(|c| c.violations.len()).unwrap_or(usize::MAX)
}

fn greedy_of(t: &Dynamics, mdp: &TabularMdp) -> Vec<usize> {
    greedy_actions(&optimal_values(t, &mdp.reward, mdp.discount).unwrap())
}

fn all_states(n: usize) -> Vec<usize> {
    (0..n).collect()
}

/// Gridworld datasets shared by the matching, regret and timing criteria.
struct GridCell {
    data: BatchDataset,
    fit: Result<ItlResult, Error>,
}

struct GridSetting {
    mdp: TabularMdp,
    expert: Expert,
    cells: Vec<GridCell>,
}

fn grid_setting(n_datasets: u64) -> GridSetting {
    let mdp = grid();
    let expert = expert_with_fraction(&mdp, 0.4);
    let config = ItlConfig::with_epsilon(expert.epsilon);
    let cells = (0..n_datasets)
        .map(|d| {
            let seed = cell_seed(BASE_SEED, 0, d, 0, Stream::Dataset);
            let data = generate_batch(&mdp, &expert, 0.4, 10, DEFAULT_DELTA, seed).unwrap();
            let fit = itl::fit(&data, &mdp.reward, mdp.discount, &config);
            GridCell { data, fit }
        })
        .collect();
    GridSetting { mdp, expert, cells }
}

fn recovery() -> Outcome {
    let start = Instant::now();
    let mdp = grid();
    let expert = expert_with_fraction(&mdp, 0.0);
    let target = greedy_of(mdp.true_dynamics().unwrap(), &mdp);
    let config = ItlConfig::with_epsilon(expert.epsilon);
    let mut worst: f64 = 1.0;
    for d in 0..10 {
        let seed = cell_seed(BASE_SEED, 0, d, 2, Stream::Dataset);
        let data = generate_batch(&mdp, &expert, 1.0, 10, DEFAULT_DELTA, seed).unwrap();
        match itl::fit(&data, &mdp.reward, mdp.discount, &config) {
            Ok(res) => {
                let g = greedy_of(&res.t_hat, &mdp);
                worst = worst.min(metrics::matching_on(&g, &target, &data.observed_states()));
            }
            Err(e) => return failed(e),
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst == 1.0 && secs < 120.0,
        format!("min best-matching {worst:.3} (need 1.0), {secs:.1}s (need < 120s)"),
    )
}

fn zero_violations() -> Outcome {
    let mut worlds = vec![("gridworld", grid(), 10)];
    for seed in 1..=3 {
        let spec = RandomworldSpec {
            seed,
            ..Default::default()
        };
        worlds.push(("randomworld", build_randomworld(&spec).unwrap(), 5));
    }
    let hmc = HmcConfig {
        burn_in: 200,
        n_samples: 50,
        ..Default::default()
    };
    let (mut itl_viol, mut bitl_viol, mut errors) = (0usize, 0usize, 0usize);
    let (mut mle_viol, mut ps_viol, mut cells) = (0.0, 0.0, 0usize);
    for (w, (_, mdp, k)) in worlds.iter().enumerate() {
        let expert = expert_with_fraction(mdp, 0.4);
        let config = ItlConfig::with_epsilon(expert.epsilon);
        for (c, &coverage) in [0.4, 0.7, 1.0].iter().enumerate() {
            for d in 0..10 {
                let key = |s| cell_seed(BASE_SEED, w as u64, d, c as u64, s);
                let data =
                    generate_batch(mdp, &expert, coverage, *k, DEFAULT_DELTA, key(Stream::Dataset))
                        .unwrap();
                let ec = constraints_for(&data, mdp, expert.epsilon);
                cells += 1;
                mle_viol += violations(&ec, &mle_estimate(&data)) as f64;
                let ps = sample_dirichlet_posterior(&data, hmc.n_samples, key(Stream::Posterior))
                    .unwrap();
                ps_viol += ps.samples.iter().map(|t| violations(&ec, t)).sum::<usize>() as f64
                    / ps.len() as f64;
                let fit = match itl::fit(&data, &mdp.reward, mdp.discount, &config) {
                    Ok(fit) => fit,
                    Err(_) => {
                        errors += 1;
                        continue;
                    }
                };
                itl_viol += violations(&ec, &fit.t_hat);
                let cfg = HmcConfig {
                    seed: key(Stream::Hmc),
                    ..hmc.clone()
                };
                match bitl::sample(&data, Some(&ec), &fit.t_hat, &cfg) {
                    Ok(set) => bitl_viol += set.samples.iter().map(|t| violations(&ec, t)).sum::<usize>(),
                    Err(_) => errors += 1,
                }
            }
        }
    }
    let (mle_mean, ps_mean) = (mle_viol / cells as f64, ps_viol / cells as f64);
    outcome(
        errors == 0 && itl_viol == 0 && bitl_viol == 0 && mle_mean > 0.0 && ps_mean > 0.0,
        format!(
            "{cells} datasets: ITL {itl_viol}, BITL {bitl_viol} (need 0), errors {errors}; \
             mean MLE {mle_mean:.2}, PS {ps_mean:.2} (need > 0)"
        ),
    )
}

fn matching_gap(setting: &GridSetting) -> Outcome {
    let start = Instant::now();
    let n = setting.mdp.n_states;
    let balls = &setting.expert.ball.per_state;
    let (mut itl_sum, mut mle_sum) = (0.0, 0.0);
    for cell in &setting.cells {
        let fit = match &cell.fit {
            Ok(fit) => fit,
            Err(e) => return failed(e),
        };
        let states = all_states(n);
        itl_sum += metrics::set_matching_on(&greedy_of(&fit.t_hat, &setting.mdp), balls, &states);
        mle_sum +=
            metrics::set_matching_on(&greedy_of(&mle_estimate(&cell.data), &setting.mdp), balls, &states);
    }
    let k = setting.cells.len() as f64;
    let (itl_mean, mle_mean) = (itl_sum / k, mle_sum / k);
    let gap = itl_mean - mle_mean;
    outcome(
        gap >= 0.15,
        format!(
            "{} datasets: ITL {itl_mean:.3}, MLE {mle_mean:.3}, gap {gap:.3} (need >= 0.15), \
             scoring {:.1}s",
            setting.cells.len(),
            start.elapsed().as_secs_f64()
        ),
    )
}

fn regret_ordering(setting: &GridSetting) -> Outcome {
    let mdp = &setting.mdp;
    let mut wins = 0;
    let mut pairs = Vec::new();
    for (d, cell) in setting.cells.iter().take(10).enumerate() {
        let fit = match &cell.fit {
            Ok(fit) => fit,
            Err(e) => return failed(e),
        };
        let key = |s| cell_seed(BASE_SEED, 0, d as u64, 0, s);
        let ec = constraints_for(&cell.data, mdp, setting.expert.epsilon);
        let cfg = HmcConfig {
            n_samples: 500,
            seed: key(Stream::Hmc),
            ..Default::default()
        };
        let run = || -> Result<(f64, f64), Error> {
            let b = bitl::sample(&cell.data, Some(&ec), &fit.t_hat, &cfg)?;
            let p = sample_dirichlet_posterior(&cell.data, 500, key(Stream::Posterior))?;
            let regret = |s: &[Dynamics]| {
                metrics::bayesian_regret(
                    s,
                    &mdp.reward,
                    mdp.discount,
                    &mdp.initial_dist,
                    DEFAULT_PAIR_BUDGET,
                    key(Stream::Regret),
                )
            };
            Ok((regret(&b.samples)?, regret(&p.samples)?))
        };
        match run() {
            Ok((b, p)) => {
                wins += usize::from(b < p);
                pairs.push(format!("{b:.2}/{p:.2}"));
            }
            Err(e) => return failed(e),
        }
    }
    outcome(
        wins >= 8,
        format!("BITL below PS in {wins}/10 (need >= 8); BITL/PS {}", pairs.join(" ")),
    )
}

fn sampler_oracle() -> Outcome {
    let spec = RandomworldSpec {
        n_states: 5,
        n_actions: 3,
        successors_per_pair: 3,
        seed: 7,
        ..Default::default()
    };
    let mdp = build_randomworld(&spec).unwrap();
    // Every action is valid, so every pair is observed.
    let expert = build_expert(
        &mdp,
        &ExpertSpec {
            epsilon: 1e6,
            target_stochastic_fraction: None,
        },
    )
    .unwrap();
    let data = generate_batch(&mdp, &expert, 1.0, 5, DEFAULT_DELTA, 1).unwrap();
    let (m, delta) = (data.n_actions(), data.delta());
    let mut closed_form = Vec::new();
    for r in 0..data.n_states() * m {
        let row = data.count_row(r / m, r % m);
        let total: f64 = row.iter().map(|&c| c as f64 + delta).sum();
        closed_form.extend(row.iter().map(|&c| (c as f64 + delta) / total));
    }
    let cfg = HmcConfig {
        n_samples: 20_000,
        seed: 11,
        ..Default::default()
    };
    let set = match bitl::sample(&data, None, &mle_estimate(&data), &cfg) {
        Ok(set) => set,
        Err(e) => return failed(e),
    };
    let gap = max_abs_diff(set.mean().unwrap().as_slice(), &closed_form);
    let accept = set.accept_rate;
    outcome(
        gap <= 0.02 && (0.4..=0.8).contains(&accept),
        format!(
            "{} draws: max mean gap {gap:.4} (need <= 0.02), accept {accept:.3} (need in [0.4, 0.8])",
            set.len()
        ),
    )
}

fn kernel_oracles() -> Outcome {
    // Values.
    let mut value_err: f64 = 0.0;
    for seed in 0..100 {
        let mut rng = rng(seed);
        let (n, m) = (rng.random_range(2..=8), rng.random_range(1..=4));
        let t = random_dynamics(&mut rng, n, m, 0.4);
        let r = random_rewards(&mut rng, n, m);
        let pi = random_policy(&mut rng, n, m);
        let gamma = rng.random_range(0.5..0.95);
        let exact = evaluate_policy(&t, &r, gamma, &pi).unwrap();
        let iter = evaluate_policy_iterative(&t, &r, gamma, &pi, 1e-11).unwrap();
        let star = optimal_values(&t, &r, gamma).unwrap();
        let vi = value_iteration(&t, &r, gamma, 1e-11).unwrap();
        value_err = value_err
            .max(max_abs_diff(&exact.v, &iter.v))
            .max(max_abs_diff(&exact.q, &iter.q))
            .max(max_abs_diff(&star.v, &vi.v));
    }

    // Projections.
    let (mut qp_err, mut kkt_err, mut not_optimal): (f64, f64, usize) = (0.0, 0.0, 0);
    for seed in 0..20 {
        let problem = random_qp(1000 + seed);
        let sol = qp::solve(&problem, &QpSettings::default()).unwrap();
        not_optimal += usize::from(sol.status != QpStatus::Optimal);
        let kkt = qp::kkt_report(&problem, &sol);
        kkt_err = kkt_err
            .max(kkt.primal)
            .max(kkt.stationarity)
            .max(kkt.dual_feasibility)
            .max(kkt.complementarity);
        qp_err = qp_err.max(max_abs_diff(&sol.x, &dual_oracle(&problem, 200_000)));
    }

    // Gradients: 25 MCE points, 25 HMC potential points.
    let mut grad_err: f64 = 0.0;
    for seed in 0..25 {
        let mut rng = rng(500 + seed);
        let (n, m) = (3, 2);
        let t = random_dynamics(&mut rng, n, m, 0.0);
        let r = random_rewards(&mut rng, n, m);
        let mut data = BatchDataset::new(n, m, DEFAULT_DELTA).unwrap();
        for _ in 0..30 {
            let (s, a) = (rng.random_range(0..n), rng.random_range(0..m));
            let s_next = rng.random_range(0..n);
            data.push(itl_core::data::Transition { s, a, s_next }).unwrap();
        }
        let theta: Vec<f64> = (0..t.as_slice().len())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let (gamma, tau) = (0.9, 1.0);
        let soft_q = |th: &[f64]| {
            let t = mce::softmax_dynamics(th, n, m).unwrap();
            mce::soft_value_iteration(&t, &r, gamma, tau, 1e-14, None).unwrap()
        };
        let f = |th: &[f64]| mce::loss(&data, th, &soft_q(th), tau);
        let g = mce::gradient(&data, &theta, gamma, tau, &soft_q(&theta), true).unwrap();
        grad_err = grad_err.max(gradient_error(f, &theta, &g, 1e-5));

        let potential = Potential::from_data(&data).unwrap();
        let w: Vec<f64> = (0..potential.dim())
            .map(|_| rng.random_range(-3.0..3.0))
            .collect();
        let mut g = vec![0.0; w.len()];
        potential.energy_and_grad(&w, &mut g);
        grad_err = grad_err.max(gradient_error(|w| potential.energy(w), &w, &g, 1e-5));
    }

    outcome(
        value_err <= 1e-8 && qp_err <= 1e-4 && kkt_err <= 1e-6 && not_optimal == 0
            && grad_err <= 1e-5,
        format!(
            "values {value_err:.1e} (need <= 1e-8); QP vs oracle {qp_err:.1e} (need <= 1e-4), \
             KKT {kkt_err:.1e} (need <= 1e-6), non-optimal {not_optimal}; \
             gradients {grad_err:.1e} (need <= 1e-5)"
        ),
    )
}

fn speed_ordering(setting: &GridSetting) -> Outcome {
    let mdp = &setting.mdp;
    // Both methods run to their own stopping rule.
    let config = MceConfig {
        max_steps: 20_000,
        ..Default::default()
    };
    let (mut wins, mut itl_total, mut mce_total) = (0, 0.0, 0.0);
    let cells: Vec<&GridCell> = setting.cells.iter().take(10).collect();
    for cell in &cells {
        let fit = match &cell.fit {
            Ok(fit) => fit,
            Err(e) => return failed(e),
        };
        let start = Instant::now();
        let res = mce::fit_mce(&cell.data, &mdp.reward, mdp.discount, &config);
        let mce_time = start.elapsed().as_secs_f64();
        if let Err(e) = res {
            return failed(e);
        }
        itl_total += fit.wall_time;
        mce_total += mce_time;
        wins += usize::from(fit.wall_time < mce_time);
    }
    outcome(
        wins == cells.len(),
        format!(
            "ITL faster on {wins}/{} datasets; total ITL {itl_total:.1}s, MCE {mce_total:.1}s",
            cells.len()
        ),
    )
}

fn healthcare() -> Outcome {
    let schema = TabularSchema::healthcare();
    let (n, m) = (schema.n_states(), schema.n_actions());
    let world = build_randomworld(&RandomworldSpec {
        n_states: n,
        n_actions: m,
        successors_per_pair: 6,
        seed: 36,
        discount: schema.gamma,
    })
    .unwrap();
    let mdp = world.with_rewards(schema.rewards()).unwrap();
    let expert = build_expert(
        &mdp,
        &ExpertSpec {
            epsilon: schema.epsilon,
            target_stochastic_fraction: None,
        },
    )
    .unwrap();
    let log = |seed| {
        let data = generate_batch(&mdp, &expert, 0.6, 3, schema.delta, seed).unwrap();
        let mut text = String::from("s,a,s_next\n");
        for tr in data.transitions() {
            text.push_str(&format!("{},{},{}\n", tr.s, tr.a, tr.s_next));
        }
        (data, text)
    };
    let (reference, text) = log(1);
    let (_, val_text) = log(2);
    let ds = schema.dataset_schema();

    let train = match parse_dataset(&text, &ds) {
        Ok(d) => d,
        Err(e) => return failed(e),
    };
    let ingest_ok = train.counts() == reference.counts() && train.n_states() == 36 && train.n_actions() == 4;
    let bad_state = format!("{text}36,0,1\n");
    let bad_action = format!("{text}0,4,1\n");
    let rejects = matches!(parse_dataset(&bad_state, &ds), Err(Error::OutOfRange { .. }))
        && matches!(parse_dataset(&bad_action, &ds), Err(Error::OutOfRange { .. }));

    let mle = mle_estimate(&train);
    let unobserved: Vec<(usize, usize)> = (0..n)
        .flat_map(|s| (0..m).map(move |a| (s, a)))
        .filter(|&(s, a)| train.pair_count(s, a) == 0)
        .collect();
    let uniform_err = unobserved
        .iter()
        .flat_map(|&(s, a)| mle.row(s, a).iter().map(|p| (p - 1.0 / n as f64).abs()))
        .fold(0.0, f64::max);
    let top_tied = unobserved.first().is_some_and(|&(s, a)| {
        metrics::topk_next_states(&mle, s, a, 3)
            .unwrap()
            .iter()
            .map(|x| x.0)
            .eq(0..3)
    });

    let validation = parse_dataset(&val_text, &ds).unwrap();
    let base = ItlConfig {
        min_freq: schema.min_freq,
        ..Default::default()
    };
    let start = Instant::now();
    let sweep = epsilon_sweep(
        &train,
        &validation,
        &[schema.rewards(), schema.transfer_rewards()],
        schema.gamma,
        &[0.0, 2.5, 5.0, 10.0],
        &base,
    );
    let secs = start.elapsed().as_secs_f64();
    let (sweep_ok, sweep_msg) = match sweep {
        Ok(s) => {
            let fitted = s.cells.iter().filter(|c| c.error.is_none()).count();
            (
                fitted > 0 && s.scores.iter().all(|x| x.is_finite()),
                format!(
                    "sweep {fitted}/{} fits, best ε {} ({secs:.1}s)",
                    s.cells.len(),
                    s.best_epsilon
                ),
            )
        }
        Err(e) => (false, format!("sweep error: {e}")),
    };
    outcome(
        ingest_ok && rejects && !unobserved.is_empty() && uniform_err <= 1e-12 && top_tied && sweep_ok,
        format!(
            "ingest {ingest_ok}, out-of-range rejected {rejects}, {} unobserved pairs with \
             uniform MLE error {uniform_err:.1e}, ties by index {top_tied}; {sweep_msg}",
            unobserved.len()
        ),
    )
}

fn main() -> ExitCode {
    let start = Instant::now();
    let mut hard_failures = 0;
    let mut report = |id: u32, name: &str, hard: bool, out: Outcome| {
        let tag = match (out.pass, hard) {
            (true, _) => "PASS",
            (false, true) => "FAIL",
            (false, false) => "SOFT-FAIL",
        };
        if !out.pass && hard {
            hard_failures += 1;
        }
        println!("[{tag}] {id} {name}: {}", out.detail);
    };

    report(1, "optimal expert recovery", true, recovery());
    report(2, "zero constraint violations", true, zero_violations());
    let setting = grid_setting(20);
    report(3, "matching gap over MLE", true, matching_gap(&setting));
    report(4, "Bayesian regret ordering", true, regret_ordering(&setting));
    report(5, "unconstrained sampler oracle", true, sampler_oracle());
    report(6, "numerical kernel oracles", true, kernel_oracles());
    report(7, "ITL faster than MCE", false, speed_ordering(&setting));
    report(8, "healthcare-schema pipeline", true, healthcare());

    println!(
        "acceptance: {hard_failures} hard failure(s), {:.1}s",
        start.elapsed().as_secs_f64()
    );
    if hard_failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
