use log::debug;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::transform::{clamp_rows, pullback, to_simplex, to_unconstrained, Potential};
use super::{DynamicsSampleSet, HmcConfig, SampleDiagnostics};
use crate::constraints::{ExactCheck, ExpertConstraints};
use crate::data::{sample_dirichlet_dynamics, BatchDataset};
use crate::error::{invalid, Error, Result};
use crate::mdp::Dynamics;
use crate::seed;

const MIN_STEP: f64 = 1e-8;
const MAX_STEP: f64 = 1e2;

// dual averaging constants
const DA_GAMMA: f64 = 0.05;
const DA_T0: f64 = 10.0;
const DA_KAPPA: f64 = 0.75;

struct DualAveraging {
    mu: f64,
    h_bar: f64,
    log_bar: f64,
    m: f64,
    target: f64,
}

impl DualAveraging {
    fn new(step: f64, target: f64) -> Self {
        Self {
            mu: (10.0 * step).ln(),
            h_bar: 0.0,
            log_bar: step.ln(),
            m: 0.0,
            target,
        }
    }

    fn update(&mut self, accept: f64) -> f64 {
        self.m += 1.0;
        let w = 1.0 / (self.m + DA_T0);
        self.h_bar = (1.0 - w) * self.h_bar + w * (self.target - accept);
        let log_step = self.mu - self.m.sqrt() / DA_GAMMA * self.h_bar;
        let eta = self.m.powf(-DA_KAPPA);
        self.log_bar = eta * log_step + (1.0 - eta) * self.log_bar;
        log_step.exp()
    }

    fn final_step(&self) -> f64 {
        self.log_bar.exp()
    }
}

fn check_step(step: f64) -> Result<()> {
    if !(step > MIN_STEP && step < MAX_STEP) {
        return Err(Error::PathologicalStepSize(step));
    }
    Ok(())
}

struct Sampler<'a> {
    potential: Potential,
    constraints: Option<&'a ExpertConstraints>,
    n_states: usize,
    n_actions: usize,
    reflect: bool,
}

enum Position {
    Feasible,
    Outside(ExactCheck, Dynamics),
}

impl Sampler<'_> {
    fn locate(&self, w: &[f64]) -> Result<Position> {
        let Some(ec) = self.constraints else {
            return Ok(Position::Feasible);
        };
        let t = to_simplex(w, self.n_states, self.n_actions)?;
        let check = ec.check(&t)?;
        Ok(if check.is_feasible() {
            Position::Feasible
        } else {
            Position::Outside(check, t)
        })
    }

    /// Reflects `p` off the most violated constraint. Returns false when the
    /// constraint normal vanishes, in which case `p` is negated.
    fn reflect(&self, w: &[f64], p: &mut [f64], check: &ExactCheck, t: &Dynamics) -> Result<bool> {
        let ec = self.constraints.expect("only called with constraints");
        let worst = check
            .most_violated()
            .expect("infeasible check has a violation");
        let spec = &check.specs[worst.spec];
        let g_t = ec.gradient(t, &check.policy, spec)?;
        let mut normal = vec![0.0; w.len()];
        pullback(w, self.n_states, &g_t, &mut normal);
        Ok(reflect_momentum(p, &normal))
    }
}

/// `p ← p − 2 (p·n̂) n̂`. A zero or non-finite normal negates `p` instead and
/// returns false.
pub fn reflect_momentum(p: &mut [f64], normal: &[f64]) -> bool {
    let norm2: f64 = normal.iter().map(|x| x * x).sum();
    if !(norm2 > 0.0 && norm2.is_finite()) {
        p.iter_mut().for_each(|x| *x = -*x);
        return false;
    }
    let dot: f64 = p.iter().zip(normal).map(|(a, b)| a * b).sum();
    let c = 2.0 * dot / norm2;
    p.iter_mut().zip(normal).for_each(|(a, b)| *a -= c * b);
    true
}

struct Proposal {
    w: Vec<f64>,
    accept_prob: f64,
    energy_error: f64,
    accepted: bool,
    cleanup_rejected: bool,
    reflections: usize,
}

fn propose(
    sampler: &Sampler,
    w0: &[f64],
    e0: f64,
    grad0: &[f64],
    step: f64,
    steps: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Proposal> {
    let d = w0.len();
    let mut p: Vec<f64> = (0..d)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    let h0 = e0 + 0.5 * p.iter().map(|x| x * x).sum::<f64>();
    let mut w = w0.to_vec();
    let mut grad = grad0.to_vec();
    let mut reflections = 0;

    p.iter_mut()
        .zip(&grad)
        .for_each(|(a, g)| *a -= 0.5 * step * g);
    for l in 0..steps {
        w.iter_mut().zip(&p).for_each(|(x, v)| *x += step * v);
        if l + 1 == steps {
            break;
        }
        match sampler.locate(&w)? {
            Position::Feasible => {
                sampler.potential.energy_and_grad(&w, &mut grad);
                p.iter_mut().zip(&grad).for_each(|(a, g)| *a -= step * g);
            }
            Position::Outside(check, t) => {
                if sampler.reflect {
                    sampler.reflect(&w, &mut p, &check, &t)?;
                    reflections += 1;
                } else {
                    sampler.potential.energy_and_grad(&w, &mut grad);
                    p.iter_mut().zip(&grad).for_each(|(a, g)| *a -= step * g);
                }
            }
        }
    }
    let e1 = sampler.potential.energy_and_grad(&w, &mut grad);
    p.iter_mut()
        .zip(&grad)
        .for_each(|(a, g)| *a -= 0.5 * step * g);

    let cleanup_rejected = matches!(sampler.locate(&w)?, Position::Outside(..));
    let h1 = e1 + 0.5 * p.iter().map(|x| x * x).sum::<f64>();
    let accept_prob = if cleanup_rejected || !h1.is_finite() {
        0.0
    } else {
        (h0 - h1).exp().min(1.0)
    };
    let accepted = accept_prob > 0.0 && rng.random::<f64>() < accept_prob;
    Ok(Proposal {
        w,
        accept_prob,
        energy_error: h1 - h0,
        accepted,
        cleanup_rejected,
        reflections,
    })
}

/// Draws dynamics from the count posterior restricted to the set where
/// `constraints` hold, starting from `init` (typically the ITL estimate).
/// Without constraints this samples the plain Dirichlet posterior.
pub fn sample(
    data: &BatchDataset,
    constraints: Option<&ExpertConstraints>,
    init: &Dynamics,
    config: &HmcConfig,
) -> Result<DynamicsSampleSet> {
    if config.n_samples == 0 || config.leapfrog_steps == 0 || config.thinning == 0 {
        return invalid("n_samples, leapfrog_steps and thinning must be positive");
    }
    if !(config.target_accept > 0.0 && config.target_accept < 1.0) {
        return invalid("target_accept must lie in (0, 1)");
    }
    check_step(config.step_size)?;
    if !init.same_shape(&Dynamics::uniform(data.n_states(), data.n_actions())) {
        return invalid("initial dynamics do not match the dataset");
    }
    let sampler = Sampler {
        potential: Potential::from_data(data)?,
        constraints,
        n_states: data.n_states(),
        n_actions: data.n_actions(),
        reflect: config.reflect,
    };
    let (clamped, _) = clamp_rows(init);
    if let Some(ec) = constraints {
        let check = ec.check(&clamped)?;
        if !check.is_feasible() {
            return Err(Error::InitInfeasible(check.violations.len()));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut w = to_unconstrained(init);
    let mut grad = vec![0.0; w.len()];
    let mut energy = sampler.potential.energy_and_grad(&w, &mut grad);
    let mut step = config.step_size;
    let mut adapt = DualAveraging::new(step, config.target_accept);
    let mut diag = SampleDiagnostics::default();
    let mut samples = Vec::with_capacity(config.n_samples);
    let mut energies = Vec::with_capacity(config.n_samples);
    let mut energy_errors = (0.0, 0usize);

    let total = config.burn_in + config.n_samples * config.thinning;
    for it in 0..total {
        let prop = propose(
            &sampler,
            &w,
            energy,
            &grad,
            step,
            config.leapfrog_steps,
            &mut rng,
        )?;
        let burning = it < config.burn_in;
        if burning && config.adapt_step_size {
            step = adapt.update(prop.accept_prob);
            check_step(step)?;
            if it + 1 == config.burn_in {
                step = adapt.final_step();
                check_step(step)?;
                debug!("hmc step size adapted to {step}");
            }
        }
        if !burning {
            diag.proposals += 1;
            diag.reflections += prop.reflections;
            diag.cleanup_rejections += usize::from(prop.cleanup_rejected);
            diag.accepted += usize::from(prop.accepted);
            if !prop.cleanup_rejected && prop.energy_error.is_finite() {
                let e = prop.energy_error.abs();
                energy_errors.0 += e;
                energy_errors.1 += 1;
                diag.max_energy_error = diag.max_energy_error.max(e);
            }
        }
        if prop.accepted {
            w = prop.w;
            energy = sampler.potential.energy_and_grad(&w, &mut grad);
        }
        if !burning && (it - config.burn_in + 1).is_multiple_of(config.thinning) {
            samples.push(to_simplex(&w, data.n_states(), data.n_actions())?);
            energies.push(energy);
        }
    }
    diag.step_size = step;
    diag.mean_energy_error = energy_errors.0 / energy_errors.1.max(1) as f64;
    Ok(DynamicsSampleSet {
        accept_rate: diag.accepted as f64 / diag.proposals.max(1) as f64,
        samples,
        energies,
        diagnostics: diag,
    })
}

/// Exact sampler for small problems: Dirichlet draws kept when they satisfy
/// the constraints. Fails if fewer than `n_samples` survive `max_attempts`.
pub fn rejection_sample(
    data: &BatchDataset,
    constraints: &ExpertConstraints,
    n_samples: usize,
    max_attempts: usize,
    seed: u64,
) -> Result<DynamicsSampleSet> {
    if n_samples == 0 {
        return invalid("n_samples must be at least 1");
    }
    const BATCH: usize = 4096;
    let mut samples = Vec::with_capacity(n_samples);
    let mut attempts = 0;
    while samples.len() < n_samples && attempts < max_attempts {
        let hi = (attempts + BATCH).min(max_attempts);
        let batch: Vec<Option<Dynamics>> = (attempts..hi)
            .into_par_iter()
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, &[i as u64]));
                let t = sample_dirichlet_dynamics(data, &mut rng);
                Ok(constraints.check(&t)?.is_feasible().then_some(t))
            })
            .collect::<Result<_>>()?;
        for t in batch {
            if samples.len() == n_samples {
                break;
            }
            attempts += 1;
            if let Some(t) = t {
                samples.push(t);
            }
        }
    }
    if samples.len() < n_samples {
        return Err(Error::NotConverged {
            what: "rejection sampling",
            iterations: attempts,
            residual: (n_samples - samples.len()) as f64,
        });
    }
    Ok(DynamicsSampleSet {
        accept_rate: n_samples as f64 / attempts as f64,
        samples,
        energies: Vec::new(),
        diagnostics: SampleDiagnostics {
            proposals: attempts,
            accepted: n_samples,
            attempts,
            ..Default::default()
        },
    })
}
