//! Fixtures shared by the benchmarks.

use glut_core::{ColorPairSet, GaussianPrimitive, GlutModel, Rgb};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A model with `n` spread-out primitives and mild random transforms,
/// standing in for a fitted one.
pub fn fixture_model(n: usize, seed: u64) -> GlutModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prims: Vec<GaussianPrimitive> = (0..n)
        .map(|_| {
            let mut p = GaussianPrimitive::isotropic([rng.random(), rng.random(), rng.random()], rng.random_range(0.08..0.25), 3.0);
            for (k, v) in p.local_matrix.iter_mut().enumerate() {
                *v = if k % 4 == 0 { 1.0 } else { 0.0 } + rng.random_range(-0.1..0.1);
            }
            p.local_bias = [rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05)];
            p
        })
        .collect();
    GlutModel::from_primitives(&prims, [0.0; 9], [0.0; 3], 1e-6).expect("valid fixture")
}

pub fn fixture_colors(count: usize, seed: u64) -> Vec<Rgb> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| Rgb::new(rng.random(), rng.random(), rng.random())).collect()
}

pub fn fixture_batch(count: usize, seed: u64) -> ColorPairSet {
    ColorPairSet::from_fn(fixture_colors(count, seed), |c| Rgb::new(c.r.powf(2.2), c.g, c.b * 0.9))
}
