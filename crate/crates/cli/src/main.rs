use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use itl_cli::commands;
use itl_cli::{render_plots, report_counterfactual, run_experiment, ExperimentConfig, Method};
use itl_core::persist::load_dynamics;

#[derive(Parser)]
#[command(name = "itl", version, about = "Fit and compare transition models learned from expert demonstrations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Output directory, overriding the config.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    /// Methods to run, overriding the config.
    #[arg(long = "method", value_enum, num_args = 1..)]
    methods: Vec<Method>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut config = ExperimentConfig::load(&self.config)?;
        if let Some(out) = &self.out {
            config.out = out.clone();
        }
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(workers) = self.workers {
            config.workers = workers;
        }
        if !self.methods.is_empty() {
            config.methods = self.methods.clone();
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write the world, expert and one log per sweep cell.
    Generate(Common),
    /// Fit point estimates (mle, itl, mce).
    Fit {
        #[command(flatten)]
        common: Common,
        /// Log to fit instead of the config's `data` or a generated one.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Draw posterior samples (ps, bitl).
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Score saved tensors against the true dynamics.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long = "tensor", required = true, num_args = 1..)]
        tensors: Vec<PathBuf>,
        /// Log whose expert constraints are checked.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Run every method on every (coverage, dataset) cell.
    Sweep(Common),
    /// Render SVG charts from a sweep's results.csv.
    Plot {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Sweep output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare the most likely next states of saved tensors.
    Counterfactual {
        /// Models as NAME=PATH.
        #[arg(long = "tensor", required = true, num_args = 1..)]
        tensors: Vec<String>,
        #[arg(long)]
        state: usize,
        #[arg(long)]
        action: usize,
        #[arg(long, default_value_t = 3)]
        k: usize,
        /// Also write counterfactual.csv here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pick the ITL tolerance that best matches a validation log.
    TuneEpsilon {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        validation: Option<PathBuf>,
    },
}

fn print_paths(paths: &[PathBuf]) {
    for p in paths {
        println!("{}", p.display());
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(common) => print_paths(&commands::generate(&common.load()?)?),
        Command::Fit { common, data } => {
            let config = common.load()?;
            let data = data.or_else(|| config.data.clone());
            print_paths(&commands::fit(&config, data.as_deref())?);
        }
        Command::Sample { common, data } => {
            let config = common.load()?;
            let data = data.or_else(|| config.data.clone());
            print_paths(&commands::sample(&config, data.as_deref())?);
        }
        Command::Evaluate { common, tensors, data } => {
            let config = common.load()?;
            for row in commands::evaluate(&config, &tensors, data.as_deref())? {
                println!("{}\t{}\t{}\t{}", row.tensor, row.task, row.metric, row.value);
            }
        }
        Command::Sweep(common) => {
            let summary = run_experiment(&common.load()?)?;
            println!(
                "{} cells, {} failures, {} rows -> {}",
                summary.cells.len(),
                summary.failures,
                summary.rows.len(),
                summary.out.join(itl_cli::experiment::RESULTS_CSV).display()
            );
        }
        Command::Plot { config, out } => {
            let bundle = match (out, config) {
                (Some(out), _) => out,
                (None, Some(path)) => ExperimentConfig::load(path)?.out,
                (None, None) => bail!("plot needs --out or --config"),
            };
            print_paths(&render_plots(&bundle)?);
        }
        Command::Counterfactual {
            tensors,
            state,
            action,
            k,
            out,
        } => {
            let models = tensors
                .iter()
                .map(|spec| {
                    let (name, path) = spec.split_once('=').with_context(|| format!("expected NAME=PATH, got {spec}"))?;
                    Ok((name.to_string(), load_dynamics(path).with_context(|| format!("loading {path}"))?))
                })
                .collect::<Result<Vec<_>>>()?;
            let report = report_counterfactual(&models, state, action, k)?;
            print!("{}", report.to_text());
            if let Some(dir) = out {
                fs::create_dir_all(&dir)?;
                fs::write(dir.join("counterfactual.csv"), report.to_csv()?)?;
            }
        }
        Command::TuneEpsilon { common, data, validation } => {
            let config = common.load()?;
            let data = data.or_else(|| config.data.clone());
            let validation = validation.or_else(|| config.validation_data.clone());
            let sweep = commands::tune_epsilon(&config, data.as_deref(), validation.as_deref())?;
            println!("epsilon\tscore");
            for (e, s) in config.epsilon_grid.iter().zip(&sweep.scores) {
                println!("{e}\t{s:.4}");
            }
            println!("best epsilon {}", sweep.best_epsilon);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
