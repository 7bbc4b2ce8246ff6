//! Benchmark-only crate; see `benches/`. Shared helpers for building
//! benchmark scenes live here.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxelfield_core::ray_traversal::Ray;
use voxelfield_core::{fixtures, VoxelWorld};

pub fn bench_world() -> VoxelWorld {
    fixtures::terrain_world(48, 48, 24, 0).world
}

/// Downward-slanted rays spread across the scene, the same distribution the
/// training cameras produce.
pub fn bench_rays(world: &VoxelWorld, n: usize, seed: u64) -> Vec<Ray> {
    let dims = world.dims();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let origin = [
                rng.random_range(-2.0..dims[0] as f64 + 2.0),
                rng.random_range(-2.0..dims[1] as f64 + 2.0),
                rng.random_range(dims[2] as f64 * 0.5..dims[2] as f64 + 4.0),
            ];
            let dir = [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..-0.05),
            ];
            Ray::new(origin, dir)
        })
        .collect()
}
