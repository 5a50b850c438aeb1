//! Seeded random streams. Every consumer derives its own stream from
//! `(seed, purpose, index)` so that results do not depend on call order and a
//! resumed run can re-derive the exact stream of any step.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Rng = ChaCha8Rng;

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn purpose_hash(purpose: &str) -> u64 {
    // FNV-1a
    purpose.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

/// Independent stream for `(seed, purpose, index)`.
pub fn stream(seed: u64, purpose: &str, index: u64) -> Rng {
    let s = mix(mix(seed) ^ purpose_hash(purpose)) ^ mix(index.wrapping_add(0x5851_F42D_4C95_7F2D));
    ChaCha8Rng::seed_from_u64(mix(s))
}

pub fn normal_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

pub fn normal_vec_f32(rng: &mut Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}
