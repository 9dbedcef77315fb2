use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use itl_core::bitl;
use itl_core::data::{estimate_expert_policy, generate_batch, mle_estimate, sample_dirichlet_posterior};
use itl_core::itl::{self, ItlResult};
use itl_core::mce::fit_mce;
use itl_core::mdp::epsilon_ball;
use itl_core::metrics::{
    averaged_posterior_policy, bayesian_regret, best_matching, cvar, epsilon_matching, greedy_policy_of,
    normalized_value, policy_value, total_variation, MetricReport, Task,
};
use itl_core::persist::{save_dynamics, save_samples};
use itl_core::seed::{cell_seed, Stream};
use itl_core::{BatchDataset, Dynamics, DynamicsSampleSet, Expert, ExpertConstraints, ItlConfig, Policy, TabularMdp};
use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Method};
use crate::world::World;

pub const TASKS: [Task; 2] = [Task::Standard, Task::Transfer];

/// Metric columns in output order. `cvar_value` exists only after
/// aggregation over datasets.
pub const METRICS: [&str; 8] = [
    "best_matching",
    "epsilon_matching",
    "value",
    "normalized_value",
    "cvar_value",
    "violations",
    "total_variation",
    "bayesian_regret",
];

pub const RESULTS_CSV: &str = "results.csv";
pub const TIMING_CSV: &str = "timing.csv";

pub enum Fitted {
    Point(Dynamics),
    Samples(DynamicsSampleSet),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CellSeeds {
    pub dataset: u64,
    pub posterior: u64,
    pub hmc: u64,
    pub mce: u64,
    pub regret: u64,
}

impl CellSeeds {
    pub fn new(base: u64, dataset: usize, coverage_index: usize) -> Self {
        let s = |stream| cell_seed(base, 0, dataset as u64, coverage_index as u64, stream);
        Self {
            dataset: s(Stream::Dataset),
            posterior: s(Stream::Posterior),
            hmc: s(Stream::Hmc),
            mce: s(Stream::Mce),
            regret: s(Stream::Regret),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub task: Task,
    pub values: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MethodRecord {
    pub method: Method,
    pub error: Option<String>,
    pub diagnostics: BTreeMap<String, f64>,
    pub metrics: Vec<TaskMetrics>,
}

impl MethodRecord {
    fn metric(&self, task: Task, name: &str) -> f64 {
        self.metrics
            .iter()
            .find(|m| m.task == task)
            .and_then(|m| m.values.get(name).copied())
            .unwrap_or(f64::NAN)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CellRecord {
    pub coverage: f64,
    pub coverage_index: usize,
    pub dataset: usize,
    pub seeds: CellSeeds,
    pub expert_epsilon: f64,
    pub n_transitions: usize,
    pub observed_states: usize,
    pub error: Option<String>,
    pub methods: Vec<MethodRecord>,
}

impl CellRecord {
    pub fn file_name(&self) -> String {
        format!("cov{}_d{}.json", self.coverage_index, self.dataset)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub task: String,
    pub coverage: f64,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub n_datasets: usize,
    pub config_hash: String,
}

pub struct Summary {
    pub out: PathBuf,
    pub cells: Vec<CellRecord>,
    pub rows: Vec<ResultRow>,
    pub failures: usize,
}

struct CellOutput {
    record: CellRecord,
    timings: Vec<(Method, f64)>,
    fitted: Vec<(Method, Fitted)>,
}

/// Metrics of one fitted model on one task. `constraints` enables the
/// violation count, which is only defined for the task the expert optimizes.
pub fn evaluate_fitted(
    fitted: &Fitted,
    mdp: &TabularMdp,
    epsilon: f64,
    constraints: Option<&ExpertConstraints>,
    regret: Option<(usize, u64)>,
) -> Result<BTreeMap<String, f64>> {
    let t_star = mdp.true_dynamics()?;
    let q_star = mdp.optimal_values()?;
    let pi_star = Policy::deterministic(mdp.n_actions, &itl_core::mdp::greedy_actions(&q_star));
    let ball = epsilon_ball(&q_star, epsilon);
    let (policy, samples): (Policy, &[Dynamics]) = match fitted {
        Fitted::Point(t) => (greedy_policy_of(t, &mdp.reward, mdp.discount)?, std::slice::from_ref(t)),
        Fitted::Samples(set) => (
            averaged_posterior_policy(&set.samples, &mdp.reward, mdp.discount)?,
            &set.samples,
        ),
    };
    let mean_over = |f: &dyn Fn(&Dynamics) -> Result<f64>| -> Result<f64> {
        let total = samples.iter().map(f).sum::<Result<f64>>()?;
        Ok(total / samples.len() as f64)
    };
    let mut out = BTreeMap::new();
    out.insert("best_matching".into(), best_matching(&policy, &pi_star));
    out.insert("epsilon_matching".into(), epsilon_matching(&policy, &ball));
    out.insert("value".into(), policy_value(&policy, mdp)?);
    out.insert("normalized_value".into(), normalized_value(&policy, mdp)?.unwrap_or(f64::NAN));
    let violations = match constraints {
        Some(ec) => mean_over(&|t| Ok(ec.check(t)?.violations.len() as f64))?,
        None => f64::NAN,
    };
    out.insert("violations".into(), violations);
    out.insert("total_variation".into(), mean_over(&|t| Ok(total_variation(t, t_star)))?);
    let regret = match (fitted, regret) {
        (Fitted::Samples(set), Some((budget, seed))) => {
            bayesian_regret(&set.samples, &mdp.reward, mdp.discount, &mdp.initial_dist, budget, seed)?
        }
        _ => f64::NAN,
    };
    out.insert("bayesian_regret".into(), regret);
    Ok(out)
}

pub fn expert_constraints(
    data: &BatchDataset,
    world: &World,
    epsilon: f64,
    itl: &ItlConfig,
) -> Result<ExpertConstraints> {
    Ok(ExpertConstraints::new(
        estimate_expert_policy(data, world.min_freq)?,
        world.standard.reward.clone(),
        world.standard.discount,
        epsilon,
        itl.include_unobserved_constraints,
    )?)
}

pub fn itl_config(config: &ExperimentConfig, world: &World, epsilon: f64) -> ItlConfig {
    ItlConfig {
        epsilon,
        min_freq: world.min_freq,
        ..config.itl.clone()
    }
}

/// Fits every requested method, sharing one ITL fit between ITL and the
/// BITL starting point.
pub struct Fitter<'a> {
    pub config: &'a ExperimentConfig,
    pub world: &'a World,
    pub data: &'a BatchDataset,
    pub epsilon: f64,
    pub seeds: CellSeeds,
    itl: Option<Result<ItlResult, String>>,
}

impl<'a> Fitter<'a> {
    pub fn new(
        config: &'a ExperimentConfig,
        world: &'a World,
        data: &'a BatchDataset,
        epsilon: f64,
        seeds: CellSeeds,
    ) -> Self {
        Self {
            config,
            world,
            data,
            epsilon,
            seeds,
            itl: None,
        }
    }

    fn itl(&mut self) -> Result<&ItlResult> {
        if self.itl.is_none() {
            let cfg = itl_config(self.config, self.world, self.epsilon);
            let res = itl::fit(self.data, &self.world.standard.reward, self.world.standard.discount, &cfg);
            self.itl = Some(res.map_err(|e| e.to_string()));
        }
        match self.itl.as_ref().expect("set above") {
            Ok(r) => Ok(r),
            Err(e) => Err(anyhow::anyhow!("ITL fit failed: {e}")),
        }
    }

    pub fn fit(&mut self, method: Method) -> Result<(Fitted, BTreeMap<String, f64>)> {
        let mdp = &self.world.standard;
        let mut diag = BTreeMap::new();
        let fitted = match method {
            Method::Mle => Fitted::Point(mle_estimate(self.data)),
            Method::Itl => {
                let res = self.itl()?;
                diag.insert("outer_iterations".into(), res.outer_iterations as f64);
                diag.insert("converged".into(), res.converged as u8 as f64);
                diag.insert("residual_violations".into(), res.residual_violations.len() as f64);
                Fitted::Point(res.t_hat.clone())
            }
            Method::Mce => {
                let cfg = itl_core::MceConfig {
                    seed: self.seeds.mce,
                    ..self.config.mce.clone()
                };
                let res = fit_mce(self.data, &mdp.reward, mdp.discount, &cfg)?;
                diag.insert("steps".into(), res.steps as f64);
                diag.insert("converged".into(), res.converged as u8 as f64);
                Fitted::Point(res.t)
            }
            Method::Ps => {
                let set = sample_dirichlet_posterior(self.data, self.config.hmc.n_samples, self.seeds.posterior)?;
                Fitted::Samples(set)
            }
            Method::Bitl => {
                let init = self.itl()?.t_hat.clone();
                let ec = expert_constraints(self.data, self.world, self.epsilon, &self.config.itl)?;
                let cfg = itl_core::HmcConfig {
                    seed: self.seeds.hmc,
                    ..self.config.hmc.clone()
                };
                let set = bitl::sample(self.data, Some(&ec), &init, &cfg)?;
                diag.insert("accept_rate".into(), set.accept_rate);
                diag.insert("step_size".into(), set.diagnostics.step_size);
                diag.insert("reflections".into(), set.diagnostics.reflections as f64);
                Fitted::Samples(set)
            }
        };
        Ok((fitted, diag))
    }
}

fn run_cell(config: &ExperimentConfig, world: &World, expert: &Expert, coverage_index: usize, dataset: usize) -> CellOutput {
    let coverage = config.coverage[coverage_index];
    let seeds = CellSeeds::new(config.seed, dataset, coverage_index);
    let mut record = CellRecord {
        coverage,
        coverage_index,
        dataset,
        seeds: seeds.clone(),
        expert_epsilon: expert.epsilon,
        n_transitions: 0,
        observed_states: 0,
        error: None,
        methods: Vec::new(),
    };
    let mut out = CellOutput {
        record: record.clone(),
        timings: Vec::new(),
        fitted: Vec::new(),
    };
    let data = match generate_batch(&world.standard, expert, coverage, config.k, world.delta, seeds.dataset) {
        Ok(d) => d,
        Err(e) => {
            warn!("cell {coverage_index}/{dataset}: data generation failed: {e}");
            record.error = Some(e.to_string());
            out.record = record;
            return out;
        }
    };
    record.n_transitions = data.len();
    record.observed_states = data.observed_states().len();
    let constraints = expert_constraints(&data, world, expert.epsilon, &config.itl)
        .map_err(|e| warn!("cell {coverage_index}/{dataset}: no constraint check: {e}"))
        .ok();
    let mut fitter = Fitter::new(config, world, &data, expert.epsilon, seeds.clone());
    for &method in &config.methods {
        let start = Instant::now();
        let fit = fitter.fit(method);
        out.timings.push((method, start.elapsed().as_secs_f64()));
        let evaluated = fit.and_then(|(fitted, diag)| {
            let mut metrics = Vec::with_capacity(TASKS.len());
            for task in TASKS {
                let ec = constraints.as_ref().filter(|_| task == Task::Standard);
                let regret = Some((config.evaluation.regret_pair_budget, seeds.regret));
                let values = evaluate_fitted(&fitted, world.task(task), expert.epsilon, ec, regret)?;
                metrics.push(TaskMetrics { task, values });
            }
            Ok((fitted, diag, metrics))
        });
        match evaluated {
            Ok((fitted, diagnostics, metrics)) => {
                record.methods.push(MethodRecord {
                    method,
                    error: None,
                    diagnostics,
                    metrics,
                });
                out.fitted.push((method, fitted));
            }
            Err(e) => {
                warn!("cell {coverage_index}/{dataset}: {method} failed: {e:#}");
                record.methods.push(MethodRecord {
                    method,
                    error: Some(format!("{e:#}")),
                    diagnostics: BTreeMap::new(),
                    metrics: Vec::new(),
                });
            }
        }
    }
    out.record = record;
    out
}

/// Summaries per (method, task, coverage, metric) in a fixed order.
pub fn aggregate(config: &ExperimentConfig, cells: &[CellRecord], config_hash: &str) -> Result<Vec<ResultRow>> {
    let mut rows = Vec::new();
    for &method in &config.methods {
        for task in TASKS {
            for (ci, &coverage) in config.coverage.iter().enumerate() {
                let records: Vec<Option<&MethodRecord>> = cells
                    .iter()
                    .filter(|c| c.coverage_index == ci)
                    .map(|c| c.methods.iter().find(|m| m.method == method && m.error.is_none()))
                    .collect();
                let values = |name: &str| -> Vec<f64> {
                    records
                        .iter()
                        .map(|r| r.map_or(f64::NAN, |r| r.metric(task, name)))
                        .collect()
                };
                for metric in METRICS {
                    let report = if metric == "cvar_value" {
                        let finite: Vec<f64> = values("value").into_iter().filter(|v| !v.is_nan()).collect();
                        MetricReport {
                            method: method.to_string(),
                            task,
                            metric: metric.into(),
                            mean: if finite.is_empty() {
                                f64::NAN
                            } else {
                                cvar(&finite, config.evaluation.cvar_level)?
                            },
                            std: f64::NAN,
                            n_datasets: finite.len(),
                        }
                    } else {
                        MetricReport::from_values(method.as_str(), task, metric, &values(metric))
                    };
                    rows.push(ResultRow {
                        method: report.method,
                        task: task.as_str().into(),
                        coverage,
                        metric: report.metric,
                        mean: report.mean,
                        std: report.std,
                        n_datasets: report.n_datasets,
                        config_hash: config_hash.into(),
                    });
                }
            }
        }
    }
    Ok(rows)
}

pub fn write_rows(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

fn cell_tag(method: Method, coverage_index: usize, dataset: usize) -> String {
    format!("{method}_cov{coverage_index}_d{dataset}")
}

/// Runs every (dataset, coverage) cell of the sweep and writes the bundle:
/// `cells/*.json`, `tensors/`, optional `samples/`, `results.csv` and
/// `timing.csv`. Failed cells and methods are recorded and skipped.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Summary> {
    config.validate()?;
    let world = World::build(config)?;
    let expert = world.expert(config)?;
    let hash = config.hash();
    let out = config.out.clone();
    fs::create_dir_all(out.join("cells")).with_context(|| format!("creating {}", out.display()))?;
    info!(
        "sweep: {} methods, {} coverages, {} datasets, expert ε {:.4}",
        config.methods.len(),
        config.coverage.len(),
        config.n_datasets,
        expert.epsilon
    );

    let jobs: Vec<(usize, usize)> = (0..config.coverage.len())
        .flat_map(|ci| (0..config.n_datasets).map(move |d| (ci, d)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(config.workers).build()?;
    let outputs: Vec<CellOutput> =
        pool.install(|| jobs.par_iter().map(|&(ci, d)| run_cell(config, &world, &expert, ci, d)).collect());

    let mut timing = csv::Writer::from_path(out.join(TIMING_CSV))?;
    timing.write_record(["method", "coverage", "dataset", "seconds"])?;
    let mut failures = 0;
    let mut cells = Vec::with_capacity(outputs.len());
    for output in outputs {
        let rec = output.record;
        failures += rec.error.is_some() as usize + rec.methods.iter().filter(|m| m.error.is_some()).count();
        fs::write(out.join("cells").join(rec.file_name()), serde_json::to_string_pretty(&rec)?)?;
        for (method, secs) in &output.timings {
            timing.write_record([method.as_str(), &rec.coverage.to_string(), &rec.dataset.to_string(), &format!("{secs:.6}")])?;
        }
        for (method, fitted) in &output.fitted {
            let tag = cell_tag(*method, rec.coverage_index, rec.dataset);
            match fitted {
                Fitted::Point(t) if config.evaluation.save_tensors => {
                    fs::create_dir_all(out.join("tensors"))?;
                    save_dynamics(out.join("tensors").join(format!("{tag}.json")), t)?;
                }
                Fitted::Samples(set) if config.evaluation.save_samples => {
                    let seed = if *method == Method::Ps { rec.seeds.posterior } else { rec.seeds.hmc };
                    save_samples(out.join("samples").join(&tag), set, seed, &hash)?;
                }
                _ => {}
            }
        }
        cells.push(rec);
    }
    timing.flush()?;

    let rows = aggregate(config, &cells, &hash)?;
    write_rows(&out.join(RESULTS_CSV), &rows)?;
    fs::write(out.join("config.json"), serde_json::to_string_pretty(config)?)?;
    if failures > 0 {
        warn!("{failures} cell or method failures recorded in {}", out.join("cells").display());
    }
    Ok(Summary {
        out,
        cells,
        rows,
        failures,
    })
}
