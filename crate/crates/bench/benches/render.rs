use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;
use voxelfield_bench::bench_world;
use voxelfield_core::neural_field::StyleCode;
use voxelfield_core::params::{ParamLeaves, ParameterStore};
use voxelfield_core::tape::Tape;
use voxelfield_core::volume_renderer::{render_frame, CameraPose, SampleMode};
use voxelfield_core::Config;

fn render(c: &mut Criterion) {
    let cfg = Config::default();
    let world = bench_world();
    let store = ParameterStore::init(&world, &cfg, 0);
    let pose = CameraPose::look_at([-4.0, 24.0, 30.0], [24.0, 24.0, 8.0], 0.9);
    let z = StyleCode::new(vec![0.1; cfg.z_dim]);

    c.bench_function("render_frame_32x32", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let leaves = ParamLeaves::register(&store, &mut tape);
            let frame = render_frame(
                &mut tape,
                &leaves,
                &world,
                &store.features,
                &cfg,
                &pose,
                &z,
                32,
                32,
                cfg.samples_train,
                SampleMode::Midpoint,
            );
            black_box(tape.value(frame.feature_image).sum())
        })
    });
}

criterion_group!(benches, render);
criterion_main!(benches);
