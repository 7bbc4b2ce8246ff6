use voxelfield_bench::{bench_rays, bench_world};
use voxelfield_core::ray_traversal::{oracle, traverse};

#[test]
fn bench_scene_is_nontrivial_and_rays_hit_it() {
    let world = bench_world();
    assert!(world.occupied_count() > 1000);

    let rays = bench_rays(&world, 200, 7);
    assert_eq!(rays.len(), 200);
    let hits = rays.iter().filter(|r| !traverse(&world, r).is_empty()).count();
    assert!(hits > 100, "only {hits}/200 benchmark rays hit the scene");
}

#[test]
fn bench_rays_are_deterministic_per_seed() {
    let world = bench_world();
    let a = bench_rays(&world, 50, 3);
    let b = bench_rays(&world, 50, 3);
    for (ra, rb) in a.iter().zip(&b) {
        assert_eq!(ra.origin, rb.origin);
        assert_eq!(ra.dir, rb.dir);
    }
}

#[test]
fn traversal_matches_membership_oracle_on_bench_scene() {
    let world = bench_world();
    let grid = oracle::DenseGrid::from_world(&world);
    for ray in bench_rays(&world, 50, 11) {
        let segments = traverse(&world, &ray);
        assert_eq!(
            oracle::membership_mismatches(&grid, &ray, &segments, 0.01, 1e-9),
            0
        );
    }
}
