//! Deterministic RNG substreams.
//!
//! Every random draw in the crate comes from a [`ChaCha8Rng`] keyed by a
//! master seed plus a path of integer labels (candidate index, replication,
//! grid cell, ...). Work items own their stream, so parallel and serial
//! evaluation produce identical results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a master seed with a path of labels into a child seed.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(seed), |acc, &label| splitmix64(acc ^ splitmix64(label)))
}

/// RNG for the substream `(seed, path...)`.
pub fn substream(seed: u64, path: &[u64]) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, path))
}
