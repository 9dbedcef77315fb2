//! Batch datasets: generation from an ε-optimal expert, file ingestion,
//! the smoothed MLE and the unconstrained Dirichlet posterior.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bitl::{DynamicsSampleSet, SampleDiagnostics};
use crate::env::{draw, Expert};
use crate::error::{invalid, Error, Result};
use crate::mdp::{Dynamics, Policy, Rewards, TabularMdp};
use crate::seed;

pub const DEFAULT_DELTA: f64 = 0.001;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Transition {
    pub s: usize,
    pub a: usize,
    pub s_next: usize,
}

/// Transition triples with their dense count tensor `N[s][a][s']`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchDataset {
    n_states: usize,
    n_actions: usize,
    transitions: Vec<Transition>,
    counts: Vec<u64>,
    delta: f64,
}

impl BatchDataset {
    pub fn new(n_states: usize, n_actions: usize, delta: f64) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return invalid("dataset needs at least one state and one action");
        }
        if !(delta > 0.0 && delta.is_finite()) {
            return invalid(format!("smoothing delta {delta} must be positive"));
        }
        Ok(Self {
            n_states,
            n_actions,
            transitions: Vec::new(),
            counts: vec![0; n_states * n_actions * n_states],
            delta,
        })
    }

    pub fn from_transitions(
        n_states: usize,
        n_actions: usize,
        delta: f64,
        transitions: impl IntoIterator<Item = Transition>,
    ) -> Result<Self> {
        let mut d = Self::new(n_states, n_actions, delta)?;
        for tr in transitions {
            d.push(tr)?;
        }
        Ok(d)
    }

    pub fn push(&mut self, tr: Transition) -> Result<()> {
        if tr.s >= self.n_states || tr.a >= self.n_actions || tr.s_next >= self.n_states {
            return invalid(format!(
                "transition ({}, {}, {}) outside {} states x {} actions",
                tr.s, tr.a, tr.s_next, self.n_states, self.n_actions
            ));
        }
        let i = self.index(tr.s, tr.a, tr.s_next);
        self.counts[i] += 1;
        self.transitions.push(tr);
        Ok(())
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn with_delta(mut self, delta: f64) -> Result<Self> {
        if !(delta > 0.0 && delta.is_finite()) {
            return invalid(format!("smoothing delta {delta} must be positive"));
        }
        self.delta = delta;
        Ok(self)
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    #[inline]
    fn index(&self, s: usize, a: usize, sp: usize) -> usize {
        (s * self.n_actions + a) * self.n_states + sp
    }

    #[inline]
    pub fn count(&self, s: usize, a: usize, sp: usize) -> u64 {
        self.counts[self.index(s, a, sp)]
    }

    pub fn count_row(&self, s: usize, a: usize) -> &[u64] {
        let start = (s * self.n_actions + a) * self.n_states;
        &self.counts[start..start + self.n_states]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    /// Counts as reals, in the flattened dynamics layout.
    pub fn counts_f64(&self) -> Vec<f64> {
        self.counts.iter().map(|&c| c as f64).collect()
    }

    pub fn pair_count(&self, s: usize, a: usize) -> u64 {
        self.count_row(s, a).iter().sum()
    }

    pub fn state_count(&self, s: usize) -> u64 {
        (0..self.n_actions).map(|a| self.pair_count(s, a)).sum()
    }

    pub fn is_observed(&self, s: usize) -> bool {
        self.state_count(s) > 0
    }

    pub fn observed_states(&self) -> Vec<usize> {
        (0..self.n_states)
            .filter(|&s| self.is_observed(s))
            .collect()
    }

    pub fn observed_pairs(&self) -> Vec<(usize, usize)> {
        (0..self.n_states)
            .flat_map(|s| (0..self.n_actions).map(move |a| (s, a)))
            .filter(|&(s, a)| self.pair_count(s, a) > 0)
            .collect()
    }
}

/// Samples a dataset: `⌈coverage · |S|⌉` states without replacement, then
/// `k` next states from the true dynamics for every ε-ball action there.
pub fn generate_batch(
    mdp: &TabularMdp,
    expert: &Expert,
    coverage: f64,
    k: usize,
    delta: f64,
    seed: u64,
) -> Result<BatchDataset> {
    if !(coverage > 0.0 && coverage <= 1.0) {
        return invalid(format!("coverage {coverage} outside (0, 1]"));
    }
    if k == 0 {
        return invalid("k must be at least 1");
    }
    let t = mdp.true_dynamics()?;
    let n = mdp.n_states;
    let n_selected = ((coverage * n as f64).ceil() as usize).clamp(1, n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut states = sample_indices(&mut rng, n, n_selected).into_vec();
    states.sort_unstable();
    let mut data = BatchDataset::new(n, mdp.n_actions, delta)?;
    for s in states {
        for &a in &expert.ball.per_state[s] {
            for _ in 0..k {
                let s_next = draw(t.row(s, a), &mut rng);
                data.push(Transition { s, a, s_next })?;
            }
        }
    }
    Ok(data)
}

/// Declares the index ranges of an ingested log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSchema {
    pub n_states: usize,
    pub n_actions: usize,
    #[serde(default = "default_delta")]
    pub delta: f64,
}

fn default_delta() -> f64 {
    DEFAULT_DELTA
}

#[derive(Deserialize)]
struct Row {
    s: String,
    a: String,
    s_next: String,
}

fn parse_index(field: &str, name: &str, bound: usize, line: u64) -> Result<usize> {
    let v: i64 = field.trim().parse().map_err(|_| Error::Parse {
        line,
        msg: format!("{name} = {field:?} is not an integer"),
    })?;
    if v < 0 || v as usize >= bound {
        return Err(Error::OutOfRange {
            line,
            msg: format!("{name} = {v} not in 0..{bound}"),
        });
    }
    Ok(v as usize)
}

/// Reads `s,a,s_next` rows after one header line. An empty file is an empty dataset.
pub fn load_dataset(path: impl AsRef<Path>, schema: &DatasetSchema) -> Result<BatchDataset> {
    let text = std::fs::read_to_string(path)?;
    parse_dataset(&text, schema)
}

pub fn parse_dataset(text: &str, schema: &DatasetSchema) -> Result<BatchDataset> {
    let mut data = BatchDataset::new(schema.n_states, schema.n_actions, schema.delta)?;
    if text.trim().is_empty() {
        return Ok(data);
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["s", "a", "s_next"] {
        return Err(Error::Parse {
            line: 1,
            msg: format!("expected header s,a,s_next, found {:?}", headers),
        });
    }
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            msg: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let row: Row = record
            .deserialize(Some(&headers))
            .map_err(|e| Error::Parse {
                line,
                msg: e.to_string(),
            })?;
        data.push(Transition {
            s: parse_index(&row.s, "s", schema.n_states, line)?,
            a: parse_index(&row.a, "a", schema.n_actions, line)?,
            s_next: parse_index(&row.s_next, "s_next", schema.n_states, line)?,
        })?;
    }
    Ok(data)
}

/// Path of the schema sidecar written next to a dataset file.
pub fn schema_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".schema.json");
    path.with_file_name(name)
}

/// Writes the CSV and its JSON schema sidecar.
pub fn write_dataset(path: impl AsRef<Path>, data: &BatchDataset) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["s", "a", "s_next"])?;
    for tr in &data.transitions {
        w.serialize((tr.s, tr.a, tr.s_next))?;
    }
    w.flush()?;
    let schema = DatasetSchema {
        n_states: data.n_states,
        n_actions: data.n_actions,
        delta: data.delta,
    };
    std::fs::write(schema_path(path), serde_json::to_string_pretty(&schema)?)?;
    Ok(())
}

/// Reads a dataset together with its sidecar schema.
pub fn read_dataset(path: impl AsRef<Path>) -> Result<BatchDataset> {
    let path = path.as_ref();
    let schema: DatasetSchema = serde_json::from_str(&std::fs::read_to_string(schema_path(path))?)?;
    load_dataset(path, &schema)
}

/// Laplace-smoothed frequencies `(N + δ) / Σ(N + δ)`.
pub fn mle_estimate(data: &BatchDataset) -> Dynamics {
    let (n, m, delta) = (data.n_states, data.n_actions, data.delta);
    let mut out = Vec::with_capacity(n * m * n);
    for s in 0..n {
        for a in 0..m {
            let row = data.count_row(s, a);
            let total: f64 = row.iter().map(|&c| c as f64 + delta).sum();
            out.extend(row.iter().map(|&c| (c as f64 + delta) / total));
        }
    }
    Dynamics::from_raw(n, m, out).expect("shape matches dataset")
}

/// Log of a Gamma(`shape`, 1) draw, accurate for shapes far below one.
fn log_gamma_draw(shape: f64, rng: &mut impl Rng) -> f64 {
    if shape >= 1.0 {
        let g: f64 = Gamma::new(shape, 1.0).expect("positive shape").sample(rng);
        return g.ln();
    }
    // Gamma(α) = Gamma(α + 1) · U^{1/α}
    let g: f64 = Gamma::new(shape + 1.0, 1.0)
        .expect("positive shape")
        .sample(rng);
    let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    g.ln() + u.ln() / shape
}

/// One Dirichlet draw written into `out`.
pub fn sample_dirichlet_row(alpha: &[f64], rng: &mut impl Rng, out: &mut [f64]) {
    let mut max = f64::NEG_INFINITY;
    for (o, &a) in out.iter_mut().zip(alpha) {
        *o = log_gamma_draw(a, rng);
        max = max.max(*o);
    }
    let mut total = 0.0;
    for o in out.iter_mut() {
        *o = (*o - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// One draw of the full tensor from `Dir(N + δ)` per row.
pub fn sample_dirichlet_dynamics(data: &BatchDataset, rng: &mut impl Rng) -> Dynamics {
    let (n, m) = (data.n_states, data.n_actions);
    let mut out = vec![0.0; n * m * n];
    let mut alpha = vec![0.0; n];
    for (r, chunk) in out.chunks_mut(n).enumerate() {
        let (s, a) = (r / m, r % m);
        for (al, &c) in alpha.iter_mut().zip(data.count_row(s, a)) {
            *al = c as f64 + data.delta;
        }
        sample_dirichlet_row(&alpha, rng, chunk);
    }
    Dynamics::from_raw(n, m, out).expect("shape matches dataset")
}

/// Independent posterior draws. Sample `i` uses its own stream derived from
/// `seed`, so the result does not depend on the thread count.
pub fn sample_dirichlet_posterior(
    data: &BatchDataset,
    n_samples: usize,
    seed: u64,
) -> Result<DynamicsSampleSet> {
    if n_samples == 0 {
        return invalid("n_samples must be at least 1");
    }
    let samples: Vec<Dynamics> = (0..n_samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, &[i as u64]));
            sample_dirichlet_dynamics(data, &mut rng)
        })
        .collect();
    Ok(DynamicsSampleSet {
        energies: Vec::new(),
        samples,
        accept_rate: 1.0,
        diagnostics: SampleDiagnostics {
            proposals: n_samples,
            ..Default::default()
        },
    })
}

/// Expert policy estimated from data: uniform over valid actions on observed
/// states and uniform over all actions elsewhere.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatedExpertPolicy {
    pub policy: Policy,
    /// `Some(valid actions)` for observed states.
    pub valid_actions: Vec<Option<Vec<usize>>>,
}

impl EstimatedExpertPolicy {
    pub fn observed_states(&self) -> Vec<usize> {
        (0..self.valid_actions.len())
            .filter(|&s| self.valid_actions[s].is_some())
            .collect()
    }

    pub fn is_observed(&self, s: usize) -> bool {
        self.valid_actions[s].is_some()
    }

    /// Valid sets with unobserved states mapped to every action.
    pub fn valid_or_all(&self) -> Vec<Vec<usize>> {
        let m = self.policy.n_actions();
        self.valid_actions
            .iter()
            .map(|v| v.clone().unwrap_or_else(|| (0..m).collect()))
            .collect()
    }
}

/// An action is valid at an observed state if it was taken at least once and
/// in at least a `min_freq` share of that state's visits.
pub fn estimate_expert_policy(data: &BatchDataset, min_freq: f64) -> Result<EstimatedExpertPolicy> {
    if !(0.0..1.0).contains(&min_freq) {
        return invalid(format!("min_freq {min_freq} outside [0, 1)"));
    }
    let (n, m) = (data.n_states, data.n_actions);
    let mut valid_actions = Vec::with_capacity(n);
    let mut sets = Vec::with_capacity(n);
    for s in 0..n {
        let total = data.state_count(s);
        if total == 0 {
            valid_actions.push(None);
            sets.push((0..m).collect());
            continue;
        }
        let valid: Vec<usize> = (0..m)
            .filter(|&a| {
                let c = data.pair_count(s, a);
                c > 0 && c as f64 / total as f64 >= min_freq
            })
            .collect();
        sets.push(valid.clone());
        valid_actions.push(Some(valid));
    }
    Ok(EstimatedExpertPolicy {
        policy: Policy::uniform_over(m, &sets),
        valid_actions,
    })
}

/// A discretized feature contributing `bins` values to the state index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Feature {
    pub name: String,
    pub bins: usize,
    /// Reward contribution per bin step.
    #[serde(default)]
    pub weight: f64,
    #[serde(default)]
    pub transfer_weight: f64,
}

/// Mixed-radix state space over discretized features with linear rewards
/// `base + Σ weight_i · bin_i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularSchema {
    pub name: String,
    pub features: Vec<Feature>,
    pub actions: Vec<String>,
    pub reward_base: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default)]
    pub epsilon: f64,
    #[serde(default)]
    pub min_freq: f64,
}

fn default_gamma() -> f64 {
    0.95
}

impl TabularSchema {
    /// Four ICU features (O2 ratio, mean BP, GCS, creatinine) and four treatments.
    pub fn healthcare() -> Self {
        let f = |name: &str, bins, weight, transfer_weight| Feature {
            name: name.into(),
            bins,
            weight,
            transfer_weight,
        };
        Self {
            name: "healthcare".into(),
            features: vec![
                f("o2", 3, -10.0, 0.0),
                f("bp", 2, -10.0, -10.0),
                f("gcs", 2, 0.0, 0.0),
                f("crea", 3, -10.0, -10.0),
            ],
            actions: vec![
                "none".into(),
                "vasopressor".into(),
                "iv_fluid".into(),
                "vasopressor_and_iv_fluid".into(),
            ],
            reward_base: 60.0,
            gamma: 0.95,
            delta: DEFAULT_DELTA,
            epsilon: 5.0,
            min_freq: 0.05,
        }
    }

    pub fn n_states(&self) -> usize {
        self.features.iter().map(|f| f.bins).product()
    }

    pub fn n_actions(&self) -> usize {
        self.actions.len()
    }

    pub fn dataset_schema(&self) -> DatasetSchema {
        DatasetSchema {
            n_states: self.n_states(),
            n_actions: self.n_actions(),
            delta: self.delta,
        }
    }

    /// Row-major index, first feature most significant.
    pub fn state_index(&self, bins: &[usize]) -> Result<usize> {
        if bins.len() != self.features.len() {
            return invalid("bin tuple length does not match the features");
        }
        let mut idx = 0;
        for (b, f) in bins.iter().zip(&self.features) {
            if *b >= f.bins {
                return invalid(format!("{} bin {b} out of range", f.name));
            }
            idx = idx * f.bins + b;
        }
        Ok(idx)
    }

    pub fn state_bins(&self, mut idx: usize) -> Vec<usize> {
        let mut bins = vec![0; self.features.len()];
        for (b, f) in bins.iter_mut().zip(&self.features).rev() {
            *b = idx % f.bins;
            idx /= f.bins;
        }
        bins
    }

    fn rewards_with(&self, weight: impl Fn(&Feature) -> f64) -> Rewards {
        let per_state: Vec<f64> = (0..self.n_states())
            .map(|s| {
                self.state_bins(s)
                    .iter()
                    .zip(&self.features)
                    .map(|(&b, f)| weight(f) * b as f64)
                    .sum::<f64>()
                    + self.reward_base
            })
            .collect();
        Rewards::from_state_rewards(&per_state, self.n_actions())
    }

    pub fn rewards(&self) -> Rewards {
        self.rewards_with(|f| f.weight)
    }

    pub fn transfer_rewards(&self) -> Rewards {
        self.rewards_with(|f| f.transfer_weight)
    }
}

/// Distinct states from a transition list, sorted.
pub fn distinct_states(transitions: &[Transition]) -> Vec<usize> {
    transitions
        .iter()
        .map(|t| t.s)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}
