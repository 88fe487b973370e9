//! Seeded random streams.
//!
//! Every stochastic step draws from a ChaCha stream whose seed is derived from
//! `(global seed, index, iteration, purpose)`, so results never depend on
//! scheduling or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Purpose tags keep streams for different phases disjoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Sweep = 2,
    Batch = 3,
    Eval = 4,
    Synth = 5,
    Generate = 6,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub fn stream_seed(global: u64, index: u64, iteration: u64, purpose: Purpose) -> u64 {
    let mut h = splitmix64(global);
    h = splitmix64(h ^ index);
    h = splitmix64(h ^ iteration.rotate_left(21));
    splitmix64(h ^ (purpose as u64).rotate_left(43))
}

pub fn stream(global: u64, index: u64, iteration: u64, purpose: Purpose) -> StreamRng {
    StreamRng::seed_from_u64(stream_seed(global, index, iteration, purpose))
}

pub fn seeded(seed: u64) -> StreamRng {
    StreamRng::seed_from_u64(seed)
}
