//! Seeded RNG streams.
//!
//! Every stochastic choice in the crate draws from a stream derived from
//! `(base seed, purpose tag, integer coordinates)`. Streams are independent
//! of each other and of execution order, which is what makes whole training
//! runs a pure function of the seed.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive an independent RNG stream from a base seed, a purpose tag, and
/// integer coordinates (epoch, step, item index, ...).
pub fn stream(seed: u64, tag: &str, parts: &[u64]) -> ChaCha8Rng {
    let mut h = splitmix64(seed);
    for &b in tag.as_bytes() {
        h = splitmix64(h ^ u64::from(b));
    }
    for &p in parts {
        h = splitmix64(h ^ p);
    }
    ChaCha8Rng::seed_from_u64(h)
}

/// Standard normal draw (Box-Muller).
pub fn normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-12);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
