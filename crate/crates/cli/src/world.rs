use std::path::Path;

use anyhow::{bail, Context, Result};
use itl_core::data::{generate_batch, load_dataset, read_dataset, schema_path, DatasetSchema, DEFAULT_DELTA};
use itl_core::env::{build_expert, build_gridworld, build_randomworld, transfer_reward};
use itl_core::metrics::Task;
use itl_core::seed::{self, cell_seed, Stream};
use itl_core::{BatchDataset, Expert, TabularMdp, TransferVariant};

use crate::config::{ExperimentConfig, WorldConfig};

/// The standard and transfer tasks of one configured world.
#[derive(Clone, Debug)]
pub struct World {
    pub standard: TabularMdp,
    pub transfer: TabularMdp,
    pub delta: f64,
    pub min_freq: f64,
    /// Expert tolerance for logs from a world without dynamics.
    pub declared_epsilon: f64,
}

impl World {
    pub fn build(config: &ExperimentConfig) -> Result<Self> {
        let (standard, default_transfer) = match &config.world {
            WorldConfig::Gridworld(spec) => (
                build_gridworld(spec)?,
                Some(TransferVariant::GridworldShiftedWall { spec: spec.clone() }),
            ),
            WorldConfig::Randomworld(spec) => (
                build_randomworld(spec)?,
                Some(TransferVariant::RandomworldInverted {
                    seed: seed::derive(spec.seed, &[Stream::Transfer as u64]),
                }),
            ),
            WorldConfig::Schema { schema, simulator } => {
                let (n, m) = (schema.n_states(), schema.n_actions());
                let mdp = match simulator {
                    Some(sim) => {
                        if (sim.n_states, sim.n_actions) != (n, m) {
                            bail!("simulator is {}x{} but the schema has {n} states and {m} actions", sim.n_states, sim.n_actions);
                        }
                        let mut sim = sim.clone();
                        sim.discount = schema.gamma;
                        build_randomworld(&sim)?.with_rewards(schema.rewards())?
                    }
                    None => TabularMdp::new(None, schema.rewards(), schema.gamma, vec![1.0 / n as f64; n])?,
                };
                let transfer = mdp.with_rewards(schema.transfer_rewards())?;
                let world = Self {
                    standard: mdp,
                    transfer: match &config.transfer {
                        Some(v) => transfer_reward(&transfer, v)?,
                        None => transfer,
                    },
                    delta: config.delta.unwrap_or(schema.delta),
                    min_freq: schema.min_freq,
                    declared_epsilon: schema.epsilon,
                };
                return Ok(world);
            }
        };
        let variant = config.transfer.clone().or(default_transfer).expect("synthetic worlds have a transfer default");
        Ok(Self {
            transfer: transfer_reward(&standard, &variant)?,
            standard,
            delta: config.delta.unwrap_or(DEFAULT_DELTA),
            min_freq: config.itl.min_freq,
            declared_epsilon: config.expert.epsilon,
        })
    }

    pub fn task(&self, task: Task) -> &TabularMdp {
        match task {
            Task::Standard => &self.standard,
            Task::Transfer => &self.transfer,
        }
    }

    pub fn has_dynamics(&self) -> bool {
        self.standard.dynamics.is_some()
    }

    pub fn expert(&self, config: &ExperimentConfig) -> Result<Expert> {
        if !self.has_dynamics() {
            bail!("the world has no dynamics; configure a simulator or supply data");
        }
        Ok(build_expert(&self.standard, &config.expert)?)
    }

    pub fn dataset_schema(&self) -> DatasetSchema {
        DatasetSchema {
            n_states: self.standard.n_states,
            n_actions: self.standard.n_actions,
            delta: self.delta,
        }
    }

    /// Reads a log, using its sidecar schema when present and the world's
    /// shape otherwise.
    pub fn read_log(&self, path: &Path) -> Result<BatchDataset> {
        let data = if schema_path(path).exists() {
            read_dataset(path)
        } else {
            load_dataset(path, &self.dataset_schema())
        }
        .with_context(|| format!("reading {}", path.display()))?;
        if (data.n_states(), data.n_actions()) != (self.standard.n_states, self.standard.n_actions) {
            bail!("{} does not match the world's state and action counts", path.display());
        }
        Ok(data)
    }
}

/// A dataset and the expert tolerance it was generated with.
pub struct Batch {
    pub data: BatchDataset,
    pub epsilon: f64,
}

/// The configured log, or the first generated cell when none is given.
pub fn batch_for(config: &ExperimentConfig, world: &World, path: Option<&Path>, stream: Stream) -> Result<Batch> {
    if let Some(path) = path {
        let epsilon = match world.has_dynamics() {
            true => world.expert(config)?.epsilon,
            false => world.declared_epsilon,
        };
        return Ok(Batch {
            data: world.read_log(path)?,
            epsilon,
        });
    }
    let expert = world.expert(config)?;
    let data = generate_batch(
        &world.standard,
        &expert,
        config.coverage[0],
        config.k,
        world.delta,
        cell_seed(config.seed, 0, 0, 0, stream),
    )?;
    Ok(Batch {
        data,
        epsilon: expert.epsilon,
    })
}
