//! Deterministic random streams. All randomness flows from one root seed,
//! split per stage by a fixed label so stages are reproducible in isolation.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a over the label bytes, mixed with the root seed.
pub fn derive_seed(root: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ root.rotate_left(17);
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Stage-scoped RNG for `(root seed, label)`.
pub fn stream(root: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, label))
}

/// Sample a standard normal as `f64` and cast, so parameter draws agree
/// across scalar types for the same stream.
pub fn normal<S: crate::Scalar>(rng: &mut ChaCha8Rng, mean: f64, std: f64) -> S {
    use rand_distr::Distribution;
    let z: f64 = rand_distr::StandardNormal.sample(rng);
    crate::sc::<S>(mean + std * z)
}
