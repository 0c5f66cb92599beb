//! Seeded random draws shared by the starting-point policies and test generators.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::{norm, FactorTuple};

/// The generator used for every seeded run.
pub type SeededRng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_vec(rng: &mut SeededRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Standard normal mode vectors, each scaled to unit norm.
pub fn unit_gaussian_tuple(rng: &mut SeededRng, dims: &[usize]) -> FactorTuple {
    let vectors = dims
        .iter()
        .map(|&n| {
            let mut v = gaussian_vec(rng, n);
            let s = norm(&v);
            if s > 0.0 {
                v.iter_mut().for_each(|x| *x /= s);
            }
            v
        })
        .collect();
    FactorTuple::new(vectors).expect("gaussian draws are finite")
}
