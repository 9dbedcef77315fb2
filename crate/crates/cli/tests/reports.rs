mod common;

use std::fs;

use common::files_in;
use itl_cli::experiment::{write_rows, ResultRow, RESULTS_CSV};
use itl_cli::{render_plots, report_counterfactual};
use itl_core::data::{mle_estimate, BatchDataset, Transition};
use itl_core::Dynamics;

fn row(method: &str, coverage: f64, metric: &str, mean: f64) -> ResultRow {
    ResultRow {
        method: method.into(),
        task: "standard".into(),
        coverage,
        metric: metric.into(),
        mean,
        std: 0.0,
        n_datasets: 3,
        config_hash: "h".into(),
    }
}

fn polylines(svg: &str) -> Vec<Vec<(f64, f64)>> {
    svg.lines()
        .filter(|l| l.starts_with("<polyline"))
        .map(|l| {
            let pts = l.split("points=\"").nth(1).unwrap().split('"').next().unwrap();
            pts.split(' ')
                .map(|p| {
                    let (x, y) = p.split_once(',').unwrap();
                    (x.parse().unwrap(), y.parse().unwrap())
                })
                .collect()
        })
        .collect()
}

#[test]
fn empty_bundles_produce_no_files() {
    let dir = tempfile::tempdir().unwrap();
    assert!(render_plots(dir.path()).unwrap().is_empty());
    fs::write(dir.path().join(RESULTS_CSV), "method,task,coverage,metric,mean,std,n_datasets,config_hash\n").unwrap();
    assert!(render_plots(dir.path()).unwrap().is_empty());
    assert_eq!(files_in(dir.path()), [RESULTS_CSV]);
}

#[test]
fn one_method_gives_one_line_through_each_coverage() {
    let dir = tempfile::tempdir().unwrap();
    let rows = [
        row("itl", 0.2, "normalized_value", 0.5),
        row("itl", 0.6, "normalized_value", 0.8),
        row("itl", 1.0, "normalized_value", 0.95),
        row("itl", 1.0, "violations", 0.0),
    ];
    write_rows(&dir.path().join(RESULTS_CSV), &rows).unwrap();
    let written = render_plots(dir.path()).unwrap();
    // No regret column, so the scatter is skipped.
    assert_eq!(written.len(), 1);
    let svg = fs::read_to_string(&written[0]).unwrap();
    let lines = polylines(&svg);
    assert_eq!(lines.len(), 1);
    let pts = &lines[0];
    assert_eq!(pts.len(), 3);
    // Coverage increases left to right and value increases upward.
    assert!(pts.windows(2).all(|w| w[1].0 > w[0].0 && w[1].1 < w[0].1));
    assert!(svg.contains(r#"class="x-label""#) && svg.contains(">coverage</text>"));
    assert!(svg.contains(">normalized_value</text>"));
}

#[test]
fn regret_scatter_uses_sampling_methods_only() {
    let dir = tempfile::tempdir().unwrap();
    let rows = [
        row("itl", 0.5, "normalized_value", 0.9),
        row("itl", 0.5, "bayesian_regret", f64::NAN),
        row("bitl", 0.5, "normalized_value", 0.8),
        row("bitl", 0.5, "bayesian_regret", 2.0),
        row("ps", 0.5, "normalized_value", 0.3),
        row("ps", 0.5, "bayesian_regret", 40.0),
    ];
    write_rows(&dir.path().join(RESULTS_CSV), &rows).unwrap();
    let written = render_plots(dir.path()).unwrap();
    assert_eq!(written.len(), 2);
    let scatter = fs::read_to_string(&written[1]).unwrap();
    assert!(scatter.contains(">bayesian_regret</text>"));
    assert_eq!(scatter.matches("<circle").count(), 2);
    assert!(!scatter.contains(r#"data-series="itl""#));
}

#[test]
fn counterfactuals_compare_models_side_by_side() {
    let n = 5;
    let mut data = BatchDataset::new(n, 2, 0.001).unwrap();
    for s_next in [3, 3, 4] {
        data.push(Transition { s: 0, a: 0, s_next }).unwrap();
    }
    let mle = mle_estimate(&data);
    let peaked = Dynamics::from_fn(n, 2, |_, _, sp| if sp == 2 { 0.6 } else { 0.1 });
    let models = [("mle".to_string(), mle), ("other".to_string(), peaked)];

    let seen = report_counterfactual(&models, 0, 0, 2).unwrap();
    assert_eq!(seen.columns[0].1.iter().map(|x| x.0).collect::<Vec<_>>(), [3, 4]);
    // An unobserved pair is uniform under the MLE, so ties resolve by index.
    let unseen = report_counterfactual(&models, 0, 1, 3).unwrap();
    let mle_col = &unseen.columns[0].1;
    assert_eq!(mle_col.iter().map(|x| x.0).collect::<Vec<_>>(), [0, 1, 2]);
    assert!(mle_col.iter().all(|x| (x.1 - 1.0 / n as f64).abs() < 1e-12));
    assert_eq!(unseen.columns[1].1[0], (2, 0.6));

    let text = unseen.to_text();
    let header = text.lines().nth(1).unwrap();
    assert!(header.find("mle").unwrap() < header.find("other").unwrap());
    assert_eq!(text.lines().count(), 2 + 3);
    assert_eq!(unseen.to_csv().unwrap().lines().count(), 1 + 2 * 3);
    assert_eq!(unseen, report_counterfactual(&models, 0, 1, 3).unwrap());

    let small = Dynamics::uniform(4, 2);
    assert!(report_counterfactual(&[models[0].clone(), ("small".into(), small)], 0, 0, 1).is_err());
    assert!(report_counterfactual(&[], 0, 0, 1).is_err());
    assert!(report_counterfactual(&models, 9, 0, 1).is_err());
}
