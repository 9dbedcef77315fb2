//! Config-driven experiment harness for inverse transition learning.

pub mod commands;
pub mod config;
pub mod counterfactual;
pub mod experiment;
pub mod plot;
pub mod world;

pub use config::{ExperimentConfig, Method, WorldConfig};
pub use counterfactual::{report_counterfactual, Counterfactual};
pub use experiment::{run_experiment, ResultRow, Summary, METRICS, TASKS};
pub use plot::render_plots;
pub use world::World;
