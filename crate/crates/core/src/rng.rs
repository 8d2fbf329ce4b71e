//! Seeded randomness helpers shared by the simulator.

use num_complex::Complex64;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub use rand::SeedableRng;

/// The generator used everywhere; fixed so that results are reproducible
/// across platforms for a given seed.
pub type SimRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SimRng {
    SimRng::seed_from_u64(seed)
}

/// Derive an independent stream seed from a base seed and a path of indices.
///
/// Uses the SplitMix64 finalizer, so neighbouring indices give unrelated seeds.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    let mut s = splitmix(base ^ 0x9e37_79b9_7f4a_7c15);
    for &p in path {
        s = splitmix(s ^ splitmix(p.wrapping_add(0x632b_e59b_d9b4_e019)));
    }
    s
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Circularly-symmetric complex Gaussian sample with total variance `var`.
pub fn complex_normal<R: Rng + ?Sized>(rng: &mut R, var: f64) -> Complex64 {
    let s = (var / 2.0).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(re * s, im * s)
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}
