mod common;

use std::fs;

use common::{config, files_in, SMALL};
use itl_cli::experiment::{read_rows, RESULTS_CSV};
use itl_cli::{run_experiment, METRICS, TASKS};

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut a = config(SMALL, &dir.path().join("a"));
    a.workers = 1;
    let mut b = config(SMALL, &dir.path().join("b"));
    b.workers = 3;
    let sa = run_experiment(&a).unwrap();
    run_experiment(&b).unwrap();
    assert_eq!(sa.failures, 0);
    let read = |run: &str, file: &str| fs::read(dir.path().join(run).join(file)).unwrap();
    assert_eq!(read("a", RESULTS_CSV), read("b", RESULTS_CSV));
    let cells = files_in(&dir.path().join("a/cells"));
    assert_eq!(cells.len(), 4);
    assert_eq!(cells, files_in(&dir.path().join("b/cells")));
    for cell in &cells {
        assert_eq!(read("a", &format!("cells/{cell}")), read("b", &format!("cells/{cell}")));
    }
    for tensor in files_in(&dir.path().join("a/tensors")) {
        assert_eq!(read("a", &format!("tensors/{tensor}")), read("b", &format!("tensors/{tensor}")));
    }
}

#[test]
fn results_have_one_row_per_method_task_metric_and_coverage() {
    let dir = tempfile::tempdir().unwrap();
    let config = config(SMALL, dir.path());
    let summary = run_experiment(&config).unwrap();
    let rows = read_rows(&dir.path().join(RESULTS_CSV)).unwrap();
    let same = |a: f64, b: f64| a == b || (a.is_nan() && b.is_nan());
    assert_eq!(rows.len(), summary.rows.len());
    for (a, b) in rows.iter().zip(&summary.rows) {
        assert_eq!((&a.method, &a.task, &a.metric, a.coverage), (&b.method, &b.task, &b.metric, b.coverage));
        assert!(same(a.mean, b.mean) && same(a.std, b.std), "{a:?} vs {b:?}");
    }
    assert_eq!(rows.len(), config.methods.len() * TASKS.len() * METRICS.len() * config.coverage.len());
    let header = fs::read_to_string(dir.path().join(RESULTS_CSV)).unwrap();
    assert_eq!(
        header.lines().next().unwrap(),
        "method,task,coverage,metric,mean,std,n_datasets,config_hash"
    );
    assert!(rows.iter().all(|r| r.config_hash == config.hash()));
    for r in &rows {
        match (r.method.as_str(), r.metric.as_str()) {
            // Constrained estimates satisfy every exact constraint.
            ("itl" | "bitl", "violations") if r.task == "standard" => assert_eq!((r.mean, r.n_datasets), (0.0, 2)),
            (_, "violations") if r.task == "transfer" => assert_eq!(r.n_datasets, 0),
            ("mle" | "itl", "bayesian_regret") => assert!(r.mean.is_nan()),
            ("ps" | "bitl", "bayesian_regret") => assert!(r.mean >= 0.0),
            (_, "best_matching" | "epsilon_matching") => assert!((0.0..=1.0).contains(&r.mean)),
            _ => {}
        }
    }
    let timing = fs::read_to_string(dir.path().join("timing.csv")).unwrap();
    assert_eq!(timing.lines().count(), 1 + 4 * 4);
}

#[test]
fn a_single_mle_run_persists_one_tensor() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = config(SMALL, dir.path());
    config.methods = vec![itl_cli::Method::Mle];
    config.coverage = vec![0.5];
    config.n_datasets = 1;
    run_experiment(&config).unwrap();
    assert_eq!(files_in(&dir.path().join("tensors")), ["mle_cov0_d0.json"]);
    assert!(!dir.path().join("samples").exists());
}

#[test]
fn method_failures_are_recorded_and_skipped() {
    let dir = tempfile::tempdir().unwrap();
    // An out-of-range leapfrog step makes every BITL run fail.
    let text = SMALL.replace("n_samples = 20", "n_samples = 20\nstep_size = 1e9\nadapt_step_size = false");
    let config = config(&text, dir.path());
    let summary = run_experiment(&config).unwrap();
    assert_eq!(summary.failures, 4);
    for r in summary.rows.iter().filter(|r| r.metric == "best_matching") {
        assert_eq!(r.n_datasets, if r.method == "bitl" { 0 } else { 2 }, "{r:?}");
    }
    let cell: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("cells/cov0_d0.json")).unwrap()).unwrap();
    let bitl = &cell["methods"][3];
    assert_eq!(bitl["method"], "bitl");
    assert!(bitl["error"].as_str().unwrap().contains("step"));
}

#[test]
fn samples_are_saved_on_request() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = config(SMALL, dir.path());
    config.coverage = vec![1.0];
    config.n_datasets = 1;
    config.evaluation.save_samples = true;
    run_experiment(&config).unwrap();
    let (manifest, set) = itl_core::persist::load_samples(dir.path().join("samples/bitl_cov0_d0")).unwrap();
    assert_eq!((manifest.count, set.len()), (20, 20));
    assert_eq!(manifest.config_hash, config.hash());
    assert_eq!(files_in(&dir.path().join("samples")), ["bitl_cov0_d0", "ps_cov0_d0"]);
}

/// ITL's normalized value rises toward one with coverage on the gridworld,
/// while the MLE stays far below.
#[test]
fn itl_value_approaches_optimal_with_coverage() {
    let dir = tempfile::tempdir().unwrap();
    let text = r#"
        seed = 20
        methods = ["mle", "itl"]
        coverage = [0.2, 0.4, 0.6, 0.8, 1.0]
        n_datasets = 20
        k = 10
        workers = 4
        [world]
        kind = "gridworld"
        [expert]
        epsilon = 0.0
        target_stochastic_fraction = 0.4
    "#;
    let summary = run_experiment(&config(text, dir.path())).unwrap();
    assert_eq!(summary.failures, 0);
    let series = |method: &str| -> Vec<f64> {
        summary
            .rows
            .iter()
            .filter(|r| r.method == method && r.task == "standard" && r.metric == "normalized_value")
            .map(|r| r.mean)
            .collect()
    };
    let (itl, mle) = (series("itl"), series("mle"));
    assert_eq!(itl.len(), 5);
    assert!(itl.windows(2).all(|w| w[1] >= w[0] - 0.02), "{itl:?}");
    assert!(itl[4] > itl[0], "{itl:?}");
    assert!(itl[4] >= 0.98, "{itl:?}");
    assert!(mle[4] <= itl[4] - 0.2, "MLE {mle:?} vs ITL {itl:?}");
}
