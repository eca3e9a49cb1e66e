//! Seeded random streams.
//!
//! Every run derives all randomness from one root seed through named
//! substreams, so enabling or disabling one pipeline stage never shifts the
//! draws of another.

use rand::SeedableRng;

pub type Prng = rand_chacha::ChaCha12Rng;

/// FNV-1a over the label, folded with the root seed.
fn mix(root: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ root.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Root stream for a run.
pub fn root(seed: u64) -> Prng {
    Prng::seed_from_u64(seed)
}

/// Independent named stream derived from the root seed.
pub fn substream(seed: u64, label: &str) -> Prng {
    Prng::seed_from_u64(mix(seed, label))
}
