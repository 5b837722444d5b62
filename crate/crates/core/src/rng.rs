//! Seed derivation. Every random draw in the crate comes from a ChaCha8
//! stream keyed by a base seed and a list of stream coordinates.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a seed with stream coordinates, e.g. `(seed, [epoch, image])`.
pub fn derive(seed: u64, coords: &[u64]) -> u64 {
    coords.iter().fold(splitmix(seed), |h, &c| splitmix(h ^ splitmix(c)))
}

pub fn stream(seed: u64, coords: &[u64]) -> Rng {
    Rng::seed_from_u64(derive(seed, coords))
}
