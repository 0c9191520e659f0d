//! Seeded random streams.
//!
//! Every stochastic step (masks, augmentations, subset draws, init) pulls
//! from a stream keyed by the run seed plus a tuple of integers such as
//! `(image_id, epoch)`, so work can be split across threads without changing
//! any draw.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent stream for `seed` and the key path `keys`.
pub fn stream(seed: u64, keys: &[u64]) -> Rng {
    let mut h = splitmix64(seed);
    for &k in keys {
        h = splitmix64(h ^ splitmix64(k));
    }
    ChaCha8Rng::seed_from_u64(h)
}

/// Stable 64-bit key for a string label (FNV-1a).
pub fn key(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// `n` distinct indices below `pool`, in draw order.
pub fn sample_indices(rng: &mut Rng, pool: usize, n: usize) -> Vec<usize> {
    rand::seq::index::sample(rng, pool, n).into_vec()
}
