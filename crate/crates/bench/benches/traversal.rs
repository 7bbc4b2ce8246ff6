use criterion::{criterion_group, criterion_main, Criterion, Throughput};
use std::hint::black_box;
use voxelfield_bench::{bench_rays, bench_world};
use voxelfield_core::ray_traversal::{stratified_sample, traverse, truncate, Jitter};

fn traversal(c: &mut Criterion) {
    let world = bench_world();
    let rays = bench_rays(&world, 1000, 7);

    let mut group = c.benchmark_group("traversal");
    group.throughput(Throughput::Elements(rays.len() as u64));
    group.bench_function("traverse_1k_rays", |b| {
        b.iter(|| {
            let mut segs = 0usize;
            for ray in &rays {
                segs += traverse(&world, black_box(ray)).segments.len();
            }
            black_box(segs)
        })
    });
    group.bench_function("traverse_truncate_sample_1k_rays", |b| {
        b.iter(|| {
            let mut total = 0usize;
            for ray in &rays {
                let list = truncate(&traverse(&world, ray), 3.0);
                let set = stratified_sample::<rand_chacha::ChaCha8Rng>(
                    ray,
                    &list,
                    24,
                    Jitter::Midpoint,
                );
                total += set.samples.len();
            }
            black_box(total)
        })
    });
    group.finish();
}

criterion_group!(benches, traversal);
criterion_main!(benches);
