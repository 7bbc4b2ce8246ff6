//! End-to-end tests of the installed binary: every subcommand on a small
//! generated world.

use std::path::Path;
use std::process::Command;

use voxelfield_core::fixtures;
use voxelfield_core::voxel_world::{load_world, write_world};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_voxelfield"))
}

fn run_ok(cmd: &mut Command) -> String {
    let out = cmd.output().expect("spawn");
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn field<'a>(output: &'a str, key: &str) -> &'a str {
    output
        .split_whitespace()
        .find_map(|f| f.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("no '{key}=' in output:\n{output}"))
}

fn demo_world(path: &Path) {
    let fixture = fixtures::terrain_world(12, 12, 8, 3);
    write_world(&fixture.world, path).unwrap();
}

#[test]
fn preprocess_and_project() {
    let dir = tempfile::tempdir().unwrap();
    let world = dir.path().join("world.gvox");
    let shell = dir.path().join("shell.gvox");
    demo_world(&world);

    let out = run_ok(bin().args([
        "preprocess",
        world.to_str().unwrap(),
        shell.to_str().unwrap(),
    ]));
    let v_in: usize = field(&out, "voxels_in").parse().unwrap();
    let v_out: usize = field(&out, "voxels_out").parse().unwrap();
    assert!(v_out <= v_in);
    assert!(load_world(&shell).unwrap().occupied_count() == v_out);

    let seg = dir.path().join("seg.png");
    let out = run_ok(bin().args([
        "project",
        shell.to_str().unwrap(),
        seg.to_str().unwrap(),
        "--camera",
        "-2,6,11:6,6,3",
        "--width",
        "32",
        "--height",
        "32",
    ]));
    assert!(seg.exists());
    let entropy: f64 = field(&out, "entropy").parse().unwrap();
    assert!(entropy > 0.0);
    let hit: f64 = field(&out, "hit_fraction").parse().unwrap();
    assert!(hit > 0.0 && hit < 1.0);
}

#[test]
fn train_then_render_from_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let world = dir.path().join("world.gvox");
    demo_world(&world);
    let ckpts = dir.path().join("ckpts");

    let out = run_ok(bin().args([
        "train",
        world.to_str().unwrap(),
        ckpts.to_str().unwrap(),
        "--set",
        "iterations=3",
        "--set",
        "train_resolution=12",
        "--set",
        "samples_train=4",
    ]));
    assert!(out.lines().next().unwrap().starts_with("iter=0 loss="));
    let final_loss: f64 = field(&out, "final_loss").parse().unwrap();
    assert!(final_loss.is_finite());
    let ckpt = ckpts.join("ckpt_final.bin");
    assert!(ckpt.exists());

    let prefix = dir.path().join("frame");
    run_ok(bin().args([
        "render",
        world.to_str().unwrap(),
        prefix.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--width",
        "16",
        "--height",
        "16",
        "--set",
        "samples_eval=6",
        "--camera",
        "-2,6,11:6,6,3",
    ]));
    for suffix in ["_rgb.png", "_depth.png", "_seg.png"] {
        let p = dir.path().join(format!("frame{suffix}"));
        assert!(p.exists(), "{p:?} missing");
        assert!(p.metadata().unwrap().len() > 0);
    }
}

#[test]
fn bench_agrees_with_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let world = dir.path().join("world.gvox");
    demo_world(&world);
    let out = run_ok(bin().args(["bench", world.to_str().unwrap(), "--rays", "300"]));
    assert_eq!(field(&out, "oracle_mismatches"), "0");
    assert_eq!(field(&out, "rays"), "300");
}

#[test]
fn gradcheck_passes_under_thread_override() {
    let out = run_ok(bin().args(["gradcheck"]).env("VOXELFIELD_THREADS", "2"));
    assert!(out.contains("gradcheck=pass"), "{out}");
    assert!(out.contains("group=vertex"));
}

#[test]
fn invalid_inputs_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let world = dir.path().join("world.gvox");
    demo_world(&world);

    // Unknown config key.
    let out = bin()
        .args([
            "bench",
            world.to_str().unwrap(),
            "--rays",
            "10",
            "--set",
            "no_such_key=1",
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_key"));

    // Malformed world file.
    let bad = dir.path().join("bad.gvox");
    std::fs::write(&bad, "not a header\n").unwrap();
    let out = bin()
        .args(["preprocess", bad.to_str().unwrap(), dir.path().join("x").to_str().unwrap()])
        .output()
        .unwrap();
    assert!(!out.status.success());
}
