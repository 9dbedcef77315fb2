//! Counter-based seed derivation.
//!
//! Every random stream in an experiment is keyed by a base seed and a tuple
//! of small integers, so any single cell can be regenerated in isolation.

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// SplitMix64 finalizer.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds `keys` into `base` one word at a time.
pub fn derive(base: u64, keys: &[u64]) -> u64 {
    keys.iter().fold(mix(base), |acc, &k| mix(acc ^ mix(k)))
}

/// Named streams used by the harness.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    World = 1,
    Transfer = 2,
    Dataset = 3,
    Validation = 4,
    Posterior = 5,
    Hmc = 6,
    Mce = 7,
    Regret = 8,
}

/// Seed for `stream` in the cell `(world, dataset, coverage_index)`.
pub fn cell_seed(base: u64, world: u64, dataset: u64, coverage_index: u64, stream: Stream) -> u64 {
    derive(base, &[world, dataset, coverage_index, stream as u64])
}
