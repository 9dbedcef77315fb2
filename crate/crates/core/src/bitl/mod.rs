//! Posterior sampling over dynamics restricted to the expert-consistent set.
//!
//! Each row of `T` is mapped to `ℝ^{n−1}` by stick-breaking with a logit
//! link, where the Dirichlet posterior becomes a smooth unconstrained density.
//! Hamiltonian trajectories that leave the constraint set are reflected off
//! the most violated constraint.

mod hmc;
pub mod transform;

use serde::{Deserialize, Serialize};

use crate::mdp::Dynamics;

pub use hmc::{reflect_momentum, rejection_sample, sample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HmcConfig {
    pub leapfrog_steps: usize,
    /// Initial step size; adapted during burn-in when `adapt_step_size` is set.
    pub step_size: f64,
    pub adapt_step_size: bool,
    pub target_accept: f64,
    pub burn_in: usize,
    pub n_samples: usize,
    /// Keep every `thinning`-th state after burn-in.
    pub thinning: usize,
    /// Reflect trajectories at constraint boundaries. When off, proposals
    /// leaving the set are only rejected at the end.
    pub reflect: bool,
    pub seed: u64,
}

impl Default for HmcConfig {
    fn default() -> Self {
        Self {
            leapfrog_steps: 20,
            step_size: 0.05,
            adapt_step_size: true,
            target_accept: 0.65,
            burn_in: 1000,
            n_samples: 500,
            thinning: 1,
            reflect: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleDiagnostics {
    /// Proposals made after burn-in.
    pub proposals: usize,
    pub accepted: usize,
    pub reflections: usize,
    /// Proposals whose end point violated the constraints.
    pub cleanup_rejections: usize,
    /// Step size used after burn-in.
    pub step_size: f64,
    /// Mean and largest `|H(end) − H(start)|` over post-burn-in trajectories
    /// that ended inside the set.
    pub mean_energy_error: f64,
    pub max_energy_error: f64,
    /// Draws tried by the rejection sampler, zero for HMC.
    pub attempts: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicsSampleSet {
    pub samples: Vec<Dynamics>,
    /// Share of post-burn-in proposals accepted.
    pub accept_rate: f64,
    /// Potential energy of each sample, empty for exact samplers.
    pub energies: Vec<f64>,
    pub diagnostics: SampleDiagnostics,
}

impl DynamicsSampleSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Elementwise mean of the samples.
    pub fn mean(&self) -> Option<Dynamics> {
        let first = self.samples.first()?;
        let mut acc = vec![0.0; first.as_slice().len()];
        for t in &self.samples {
            for (x, y) in acc.iter_mut().zip(t.as_slice()) {
                *x += y;
            }
        }
        let k = self.samples.len() as f64;
        acc.iter_mut().for_each(|x| *x /= k);
        Dynamics::from_raw(first.n_states(), first.n_actions(), acc).ok()
    }
}
