//! Procedurally generated worlds used by tests, the gradient checker, and
//! the benchmark harness. Deterministic given the seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::label_semantics::AbstractClass;
use crate::voxel_world::{VoxelCoord, VoxelWorld};

pub struct TerrainFixture {
    pub world: VoxelWorld,
    /// Voxel count tallied during generation, independent of the world's own
    /// bookkeeping.
    pub expected_count: usize,
}

/// Rolling terrain with grass/dirt/stone layers, water in the hollows and
/// snow on the peaks. Columns are filled from the floor up, so the solid
/// fraction is substantial and shell extraction has work to do.
pub fn terrain_world(nx: usize, ny: usize, nz: usize, seed: u64) -> TerrainFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (a, b) = (
        rng.random_range(0.15..0.45),
        rng.random_range(0.15..0.45),
    );
    let (pa, pb) = (
        rng.random_range(0.0..std::f64::consts::TAU),
        rng.random_range(0.0..std::f64::consts::TAU),
    );
    let base = nz as f64 * 0.45;
    let amp = nz as f64 * 0.30;
    let water_level = (base - amp * 0.3) as i32;
    let snow_level = (base + amp * 0.6) as i32;

    let mut world = VoxelWorld::new([nx, ny, nz]);
    let mut count = 0usize;
    for x in 0..nx as i32 {
        for y in 0..ny as i32 {
            let h = base
                + amp
                    * (0.6 * (a * x as f64 + pa).sin() * (b * y as f64 + pb).cos()
                        + 0.4 * (b * x as f64 + pb).cos() * (a * y as f64 + pa).sin());
            let top = (h as i32).clamp(0, nz as i32 - 1);
            for z in 0..=top {
                let class = if z == top {
                    if top <= water_level {
                        AbstractClass::Water
                    } else if top >= snow_level {
                        AbstractClass::Snow
                    } else if rng.random_range(0..40) == 0 {
                        AbstractClass::Flower
                    } else {
                        AbstractClass::Grass
                    }
                } else if z + 2 >= top {
                    AbstractClass::Dirt
                } else if rng.random_range(0..12) == 0 {
                    AbstractClass::Gravel
                } else {
                    AbstractClass::Stone
                };
                world.set(VoxelCoord::new(x, y, z), class);
                count += 1;
            }
        }
    }
    TerrainFixture {
        world,
        expected_count: count,
    }
}

/// Terrain variant with a tall solid underground, for shell-extraction tests.
pub fn deep_terrain_world(nx: usize, ny: usize, nz: usize, seed: u64) -> TerrainFixture {
    terrain_world(nx, ny, nz, seed)
}

/// Uniformly random occupancy at the given fraction, random labels.
pub fn random_world(n: usize, occupancy: f64, seed: u64) -> VoxelWorld {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = [
        AbstractClass::Grass,
        AbstractClass::Dirt,
        AbstractClass::Stone,
        AbstractClass::Water,
        AbstractClass::Sand,
        AbstractClass::Tree,
    ];
    let mut world = VoxelWorld::new([n, n, n]);
    for x in 0..n as i32 {
        for y in 0..n as i32 {
            for z in 0..n as i32 {
                if rng.random_range(0.0..1.0) < occupancy {
                    let class = classes[rng.random_range(0..classes.len())];
                    world.set(VoxelCoord::new(x, y, z), class);
                }
            }
        }
    }
    world
}

/// Two face-adjacent voxels of different classes; the smallest world that
/// still exercises shared-vertex features, both heads, and the sky.
pub fn two_voxel_world() -> VoxelWorld {
    let mut world = VoxelWorld::new([6, 6, 6]);
    world.set(VoxelCoord::new(2, 2, 2), AbstractClass::Grass);
    world.set(VoxelCoord::new(3, 2, 2), AbstractClass::Dirt);
    world
}
