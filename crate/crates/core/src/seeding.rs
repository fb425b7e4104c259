//! Seed derivation and RNG stream layout.
//!
//! Every stochastic component takes a `ChaCha8Rng`. A run is keyed by one
//! `u64` seed; independent streams of the same generator separate the
//! randomness that drives the trajectory (or the real demand process) from
//! the randomness used for risk-estimation samples, so that runs with
//! different risk parameters still see identical environment draws.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream carrying the trajectory / environment draws.
pub const STREAM_ENV: u64 = 0;
/// Stream carrying the per-step risk-estimation samples.
pub const STREAM_RISK: u64 = 1;

/// SplitMix64 step, used to derive independent per-replication seeds from a
/// master seed: `replication_seed(master, k) = splitmix64(master + (k+1)·GAMMA)`.
pub fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for replication `k` of a run keyed by `master`.
pub fn replication_seed(master: u64, k: u64) -> u64 {
    splitmix64(master.wrapping_add((k + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)))
}

/// A generator on the given stream of the seed's keystream.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
