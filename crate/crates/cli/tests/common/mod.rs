#![allow(dead_code)]

use std::path::Path;

use itl_cli::ExperimentConfig;

/// A small random world that keeps sweeps fast.
pub const SMALL: &str = r#"
seed = 5
methods = ["mle", "itl", "ps", "bitl"]
coverage = [0.5, 1.0]
n_datasets = 2
k = 5

[world]
kind = "randomworld"
n_states = 6
n_actions = 3
successors_per_pair = 3
seed = 4

[expert]
epsilon = 0.0
target_stochastic_fraction = 0.4

[hmc]
burn_in = 50
n_samples = 20
"#;

pub fn config(text: &str, out: &Path) -> ExperimentConfig {
    let mut config = ExperimentConfig::from_toml(text).unwrap();
    config.out = out.to_path_buf();
    config
}

pub fn files_in(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = match std::fs::read_dir(dir) {
        Ok(entries) => entries.map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect(),
        Err(_) => Vec::new(),
    };
    names.sort();
    names
}
