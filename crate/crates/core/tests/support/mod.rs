#![allow(dead_code)]

pub mod fixed;

use bmwgam::copula::from_pairwise;
use bmwgam::{Coordinates, SeparableCorrelation};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Regular `nx × ny` grid with spacing `dx` km and `nt` times `dt` hours apart.
pub fn grid(nx: usize, ny: usize, dx: f64, nt: usize, dt: f64) -> Coordinates {
    Coordinates::new(
        (0..nx * ny).map(|i| [dx * (i % nx) as f64, dx * (i / nx) as f64]).collect(),
        (0..nt).map(|t| dt * t as f64).collect(),
    )
    .unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

pub fn correlation(coords: &Coordinates, v_space: f64, v_time: f64, pairwise: &[f64]) -> SeparableCorrelation {
    let p = ((1.0 + (1.0 + 8.0 * pairwise.len() as f64).sqrt()) / 2.0).round() as usize;
    SeparableCorrelation::new(v_space, v_time, from_pairwise(p, pairwise).unwrap(), coords).unwrap()
}
