//! On-disk formats for dynamics tensors and sample stacks.
//!
//! A tensor is a JSON object with its shape and flat data. A sample stack is
//! a directory holding `manifest.json` and `samples.jsonl`, one flat tensor
//! per line.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bitl::{DynamicsSampleSet, SampleDiagnostics};
use crate::error::{invalid, Result};
use crate::mdp::Dynamics;

pub const MANIFEST: &str = "manifest.json";
pub const SAMPLES: &str = "samples.jsonl";

pub fn save_dynamics(path: impl AsRef<Path>, t: &Dynamics) -> Result<()> {
    fs::write(path, serde_json::to_string(t)?)?;
    Ok(())
}

pub fn load_dynamics(path: impl AsRef<Path>) -> Result<Dynamics> {
    let t: Dynamics = serde_json::from_str(&fs::read_to_string(path)?)?;
    Dynamics::new(t.n_states(), t.n_actions(), t.into_vec())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleManifest {
    pub count: usize,
    pub n_states: usize,
    pub n_actions: usize,
    pub seed: u64,
    pub config_hash: String,
    pub accept_rate: f64,
    pub diagnostics: SampleDiagnostics,
}

pub fn save_samples(
    dir: impl AsRef<Path>,
    set: &DynamicsSampleSet,
    seed: u64,
    config_hash: &str,
) -> Result<SampleManifest> {
    let dir = dir.as_ref();
    let Some(first) = set.samples.first() else {
        return invalid("cannot save an empty sample set");
    };
    fs::create_dir_all(dir)?;
    let manifest = SampleManifest {
        count: set.samples.len(),
        n_states: first.n_states(),
        n_actions: first.n_actions(),
        seed,
        config_hash: config_hash.to_string(),
        accept_rate: set.accept_rate,
        diagnostics: set.diagnostics.clone(),
    };
    let mut out = BufWriter::new(File::create(dir.join(SAMPLES))?);
    for t in &set.samples {
        serde_json::to_writer(&mut out, t.as_slice())?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn load_samples(dir: impl AsRef<Path>) -> Result<(SampleManifest, DynamicsSampleSet)> {
    let dir = dir.as_ref();
    let manifest: SampleManifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST))?)?;
    let reader = BufReader::new(File::open(dir.join(SAMPLES))?);
    let mut samples = Vec::with_capacity(manifest.count);
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let data: Vec<f64> = serde_json::from_str(&line)?;
        samples.push(Dynamics::new(manifest.n_states, manifest.n_actions, data)?);
    }
    if samples.len() != manifest.count {
        return invalid(format!(
            "manifest lists {} samples but {} were read",
            manifest.count,
            samples.len()
        ));
    }
    let set = DynamicsSampleSet {
        samples,
        accept_rate: manifest.accept_rate,
        energies: Vec::new(),
        diagnostics: manifest.diagnostics.clone(),
    };
    Ok((manifest, set))
}
