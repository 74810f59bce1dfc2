//! Counter-based random streams.
//!
//! Every stochastic quantity in a run is drawn from a stream identified by a
//! tuple `(master_seed, domain, generation, index)`. The stream seed is a pure
//! function of that tuple, so any worker can regenerate any candidate's noise
//! (or any episode's environment seed) without coordination, and a resumed run
//! only needs to know the generation counter.
//!
//! The mixing function is the SplitMix64 finalizer:
//!
//! ```text
//! mix(z):  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
//!          z = (z ^ (z >> 27)) * 0x94D049BB133111EB
//!          z ^ (z >> 31)
//! ```
//!
//! and the seed for a tuple is
//!
//! ```text
//! h = mix(master_seed + 0x9E3779B97F4A7C15)
//! h = mix(h ^ domain)
//! h = mix(h ^ (generation + 0x9E3779B97F4A7C15))
//! h = mix(h ^ (index    + 0x632BE59BD9B4E019))
//! ```
//!
//! with wrapping arithmetic. The stream itself is ChaCha8 seeded from `h`
//! through `SeedableRng::seed_from_u64`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The generator type behind every stream.
pub type Stream = ChaCha8Rng;

/// Stream domains. Distinct domains never share a seed for the same counters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    /// Parameter-space perturbation noise.
    Perturbation = 0x7065_7274,
    /// Environment reset seeds.
    EnvReset = 0x656e_7672,
    /// Action-space exploration noise.
    ActionNoise = 0x6163_746e,
    /// Network initialisation.
    Init = 0x696e_6974,
    /// Minibatch shuffling.
    Shuffle = 0x7368_7566,
    /// Evaluation episodes.
    Eval = 0x6576_616c,
    /// Bootstrap resampling.
    Bootstrap = 0x626f_6f74,
    /// Environment resets during PPO collection.
    PpoEnv = 0x7070_6f65,
    /// Action sampling during PPO collection.
    PpoAction = 0x7070_6f61,
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;
const GOLDEN2: u64 = 0x632B_E59B_D9B4_E019;

#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for the stream `(master, domain, generation, index)`.
pub fn derive_seed(master: u64, domain: Domain, generation: u64, index: u64) -> u64 {
    let mut h = mix64(master.wrapping_add(GOLDEN));
    h = mix64(h ^ domain as u64);
    h = mix64(h ^ generation.wrapping_add(GOLDEN));
    mix64(h ^ index.wrapping_add(GOLDEN2))
}

pub fn stream(master: u64, domain: Domain, generation: u64, index: u64) -> Stream {
    Stream::seed_from_u64(derive_seed(master, domain, generation, index))
}

pub fn stream_from_seed(seed: u64) -> Stream {
    Stream::seed_from_u64(seed)
}
