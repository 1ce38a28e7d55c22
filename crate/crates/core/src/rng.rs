//! Seed plumbing shared by every stochastic component.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with a path of stream keys (clip id, epoch, purpose tag)
/// into an independent seed.
pub fn derive_seed(base: u64, keys: &[u64]) -> u64 {
    keys.iter()
        .fold(splitmix64(base), |acc, &k| splitmix64(acc ^ splitmix64(k)))
}

pub fn rng_from(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stable 64-bit key for a string identifier (FNV-1a).
pub fn key_of(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01B3)
    })
}
