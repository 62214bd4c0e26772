//! Seed derivation.
//!
//! Every random stream in the crate is a ChaCha8 generator seeded from a
//! base seed mixed with a path of integers (column index, attempt counter,
//! repetition, ...). Mixing uses the SplitMix64 finalizer so neighbouring
//! paths give unrelated streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

fn splitmix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministically combine `base` with each element of `path`.
pub fn derive(base: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix(base.wrapping_add(GOLDEN)), |acc, &p| {
        splitmix(acc ^ splitmix(p.wrapping_add(GOLDEN).wrapping_mul(GOLDEN)))
    })
}

pub fn rng(base: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(base, path))
}
