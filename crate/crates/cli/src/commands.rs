use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use itl_core::data::{generate_batch, write_dataset};
use itl_core::itl::{epsilon_sweep, SweepResult};
use itl_core::metrics::Task;
use itl_core::persist::{load_dynamics, save_dynamics, save_samples};
use itl_core::seed::Stream;
use log::info;
use serde::Serialize;

use crate::config::{ExperimentConfig, Method};
use crate::experiment::{evaluate_fitted, expert_constraints, itl_config, CellSeeds, Fitted, Fitter, METRICS, TASKS};
use crate::world::{batch_for, World};

/// Writes the world, its transfer task, the expert, and one log per sweep
/// cell. Logs use the same seeds as `sweep`.
pub fn generate(config: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let world = World::build(config)?;
    let expert = world.expert(config)?;
    let out = &config.out;
    fs::create_dir_all(out.join("data"))?;
    let mut written = vec![out.join("world.json"), out.join("transfer.json"), out.join("expert.json")];
    world.standard.save_json(&written[0])?;
    world.transfer.save_json(&written[1])?;
    fs::write(&written[2], serde_json::to_string_pretty(&expert)?)?;
    for (ci, &coverage) in config.coverage.iter().enumerate() {
        for d in 0..config.n_datasets {
            let seeds = CellSeeds::new(config.seed, d, ci);
            let data = generate_batch(&world.standard, &expert, coverage, config.k, world.delta, seeds.dataset)?;
            let path = out.join("data").join(format!("cov{ci}_d{d}.csv"));
            write_dataset(&path, &data)?;
            written.push(path);
        }
    }
    Ok(written)
}

#[derive(Serialize)]
struct RunMetadata<'a> {
    method: Method,
    config_hash: String,
    data: Option<&'a Path>,
    n_transitions: usize,
    epsilon: f64,
    diagnostics: std::collections::BTreeMap<String, f64>,
    wall_time: f64,
    config: &'a ExperimentConfig,
}

fn run_methods(config: &ExperimentConfig, data_path: Option<&Path>, samplers: bool) -> Result<Vec<PathBuf>> {
    let world = World::build(config)?;
    let batch = batch_for(config, &world, data_path, Stream::Dataset)?;
    let seeds = CellSeeds::new(config.seed, 0, 0);
    let hash = config.hash();
    let mut fitter = Fitter::new(config, &world, &batch.data, batch.epsilon, seeds.clone());
    let mut written = Vec::new();
    for &method in &config.methods {
        if method.is_sampler() != samplers {
            let other = if samplers { "fit" } else { "sample" };
            bail!("{method} is handled by the {other} command");
        }
        let start = Instant::now();
        let (fitted, diagnostics) = fitter.fit(method).with_context(|| format!("{method} failed"))?;
        let wall_time = start.elapsed().as_secs_f64();
        let path = match &fitted {
            Fitted::Point(t) => {
                let path = config.out.join("tensors").join(format!("{method}.json"));
                fs::create_dir_all(path.parent().expect("has parent"))?;
                save_dynamics(&path, t)?;
                path
            }
            Fitted::Samples(set) => {
                let seed = if method == Method::Ps { seeds.posterior } else { seeds.hmc };
                let dir = config.out.join("samples").join(method.as_str());
                save_samples(&dir, set, seed, &hash)?;
                dir
            }
        };
        let meta = RunMetadata {
            method,
            config_hash: hash.clone(),
            data: data_path,
            n_transitions: batch.data.len(),
            epsilon: batch.epsilon,
            diagnostics,
            wall_time,
            config,
        };
        let meta_path = config.out.join(format!("{method}_run.json"));
        fs::write(&meta_path, serde_json::to_string_pretty(&meta)?)?;
        info!("{method}: wrote {} in {wall_time:.2}s", path.display());
        written.push(path);
    }
    Ok(written)
}

/// Fits the point estimators (mle, itl, mce) on the configured log or on a
/// generated one.
pub fn fit(config: &ExperimentConfig, data: Option<&Path>) -> Result<Vec<PathBuf>> {
    run_methods(config, data, false)
}

/// Draws posterior samples (ps, bitl).
pub fn sample(config: &ExperimentConfig, data: Option<&Path>) -> Result<Vec<PathBuf>> {
    run_methods(config, data, true)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvaluationRow {
    pub tensor: String,
    pub task: String,
    pub metric: String,
    pub value: f64,
}

/// Metrics of saved tensors against the world's true dynamics. Violations
/// are counted when a log is available.
pub fn evaluate(config: &ExperimentConfig, tensors: &[PathBuf], data: Option<&Path>) -> Result<Vec<EvaluationRow>> {
    if tensors.is_empty() {
        bail!("no tensors to evaluate");
    }
    let world = World::build(config)?;
    let expert = world.expert(config)?;
    let constraints = match data {
        Some(path) => Some(expert_constraints(&world.read_log(path)?, &world, expert.epsilon, &config.itl)?),
        None => None,
    };
    let mut rows = Vec::new();
    for path in tensors {
        let t = load_dynamics(path).with_context(|| format!("loading {}", path.display()))?;
        let fitted = Fitted::Point(t);
        for task in TASKS {
            let ec = constraints.as_ref().filter(|_| task == Task::Standard);
            let values = evaluate_fitted(&fitted, world.task(task), expert.epsilon, ec, None)?;
            for metric in METRICS {
                if let Some(&value) = values.get(metric) {
                    rows.push(EvaluationRow {
                        tensor: path.display().to_string(),
                        task: task.as_str().into(),
                        metric: metric.into(),
                        value,
                    });
                }
            }
        }
    }
    fs::create_dir_all(&config.out)?;
    let mut w = csv::Writer::from_path(config.out.join("evaluation.csv"))?;
    for row in &rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(rows)
}

/// Scores ITL over the configured ε grid on a validation log, for the
/// standard and transfer rewards.
pub fn tune_epsilon(config: &ExperimentConfig, train: Option<&Path>, validation: Option<&Path>) -> Result<SweepResult> {
    if config.epsilon_grid.is_empty() {
        bail!("epsilon_grid is empty");
    }
    let world = World::build(config)?;
    let train = batch_for(config, &world, train, Stream::Dataset)?;
    let validation = batch_for(config, &world, validation, Stream::Validation)?;
    let rewards = [world.standard.reward.clone(), world.transfer.reward.clone()];
    let base = itl_config(config, &world, 0.0);
    let sweep = epsilon_sweep(
        &train.data,
        &validation.data,
        &rewards,
        world.standard.discount,
        &config.epsilon_grid,
        &base,
    )?;
    fs::create_dir_all(&config.out)?;
    fs::write(config.out.join("epsilon_sweep.json"), serde_json::to_string_pretty(&sweep)?)?;
    Ok(sweep)
}
