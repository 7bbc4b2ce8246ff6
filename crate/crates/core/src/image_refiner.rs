//! Image-space refiner: a small style-modulated CNN that maps the blended
//! feature image to RGB. Four 3x3 convolutions (receptive field exactly
//! 9x9) with per-channel affine style modulation, then a 1x1 head and a
//! tanh squashed to [0, 1]. Fully convolutional, so it is translation
//! equivariant away from the zero-padded borders.

use ndarray::Array3;

use crate::config::Config;
use crate::params::ParamLeaves;
use crate::tape::{Tape, TensorId};

/// Number of 3x3 stages; together with the 1x1 head this pins the receptive
/// field at (2 * STAGES * 1 + 1) = 9 pixels per side.
pub const CONV_STAGES: usize = 4;

/// Per-channel style modulation: scale = 1 + w ms + ms0, shift = w mb + mb0.
/// Zero-initialized modulation tensors make this an identity at start.
fn modulate(
    tape: &mut Tape,
    leaves: &ParamLeaves,
    prefix: &str,
    x: TensorId,
    w_style: TensorId,
) -> TensorId {
    let ms = leaves.id(&format!("{prefix}_ms"));
    let ms0 = leaves.id(&format!("{prefix}_ms0"));
    let mb = leaves.id(&format!("{prefix}_mb"));
    let mb0 = leaves.id(&format!("{prefix}_mb0"));
    let ch = tape.value(ms0).shape()[0];

    let s_row = tape.matmul(w_style, ms);
    let s_flat = tape.reshape(s_row, &[ch]);
    let s_off = tape.add(s_flat, ms0);
    let scale = tape.add_scalar(s_off, 1.0);

    let b_row = tape.matmul(w_style, mb);
    let b_flat = tape.reshape(b_row, &[ch]);
    let shift = tape.add(b_flat, mb0);

    let scaled = tape.scale_chan(x, scale);
    tape.add_chan(scaled, shift)
}

/// Runs the refiner on a [c_dim, h, w] feature image; returns RGB in
/// [0, 1] as [3, h, w].
pub fn refine(
    tape: &mut Tape,
    leaves: &ParamLeaves,
    cfg: &Config,
    feature_image: TensorId,
    w_style: TensorId,
) -> TensorId {
    let mut x = feature_image;
    for i in 0..CONV_STAGES {
        let k = leaves.id(&format!("refiner/conv{i}_k"));
        let b = leaves.id(&format!("refiner/conv{i}_b"));
        x = tape.conv2d(x, k);
        x = tape.add_chan(x, b);
        x = modulate(tape, leaves, &format!("refiner/conv{i}"), x, w_style);
        x = tape.leaky_relu(x, cfg.leaky_slope);
    }
    let k = leaves.id("refiner/head_k");
    let b = leaves.id("refiner/head_b");
    x = tape.conv2d(x, k);
    x = tape.add_chan(x, b);
    let t = tape.tanh(x);
    let half = tape.mul_scalar(t, 0.5);
    tape.add_scalar(half, 0.5)
}

/// Debug path that skips the CNN: the first three feature channels, mapped
/// from the clip range [-1, 1] to [0, 1].
pub fn refine_bypass(feature: &Array3<f64>) -> Array3<f64> {
    let (_, h, w) = feature.dim();
    let mut out = Array3::zeros((3, h, w));
    for ch in 0..3 {
        for y in 0..h {
            for x in 0..w {
                out[[ch, y, x]] = (feature[[ch, y, x]] * 0.5 + 0.5).clamp(0.0, 1.0);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::neural_field::{style_network, StyleCode};
    use crate::params::ParameterStore;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (Config, ParameterStore) {
        let cfg = Config::default();
        let store = ParameterStore::init(&fixtures::two_voxel_world(), &cfg, 17);
        (cfg, store)
    }

    fn random_image(cfg: &Config, h: usize, w: usize, seed: u64) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_simple_fn((cfg.c_dim, h, w), || rng.random_range(-1.0..1.0))
    }

    fn run(cfg: &Config, store: &ParameterStore, img: &Array3<f64>, z: &StyleCode) -> Array3<f64> {
        let mut tape = Tape::new();
        let leaves = ParamLeaves::register(store, &mut tape);
        let w = style_network(&mut tape, &leaves, cfg, z);
        let x = tape.constant(img.clone().into_dyn());
        let rgb = refine(&mut tape, &leaves, cfg, x, w);
        tape.value(rgb)
            .view()
            .into_dimensionality::<ndarray::Ix3>()
            .unwrap()
            .to_owned()
    }

    #[test]
    fn output_shape_and_range() {
        let (cfg, store) = setup();
        let img = random_image(&cfg, 12, 10, 1);
        let out = run(&cfg, &store, &img, &StyleCode::zeros(cfg.z_dim));
        assert_eq!(out.dim(), (3, 12, 10));
        for &v in out.iter() {
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn receptive_field_is_exactly_nine_by_nine() {
        let (cfg, store) = setup();
        let h = 13;
        let base = random_image(&cfg, h, h, 2);
        let z = StyleCode::zeros(cfg.z_dim);
        let out_base = run(&cfg, &store, &base, &z);

        let mut poked = base.clone();
        let c = h / 2;
        poked[[0, c, c]] += 1.0;
        let out_poked = run(&cfg, &store, &poked, &z);

        let radius = CONV_STAGES as i64; // 4 -> 9x9 window
        let mut boundary_changed = false;
        for y in 0..h {
            for x in 0..h {
                let dy = (y as i64 - c as i64).abs();
                let dx = (x as i64 - c as i64).abs();
                let dist = dy.max(dx);
                let changed = (0..3).any(|ch| {
                    (out_base[[ch, y, x]] - out_poked[[ch, y, x]]).abs() > 1e-12
                });
                if dist > radius {
                    assert!(!changed, "pixel ({x},{y}) outside 9x9 window changed");
                } else if dist == radius {
                    boundary_changed |= changed;
                }
            }
        }
        assert!(
            boundary_changed,
            "no change at Chebyshev distance {radius}: receptive field smaller than 9x9"
        );
    }

    #[test]
    fn translation_equivariant_in_the_interior() {
        let (cfg, store) = setup();
        let h = 20;
        let mut a = Array3::zeros((cfg.c_dim, h, h));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        // A small blob well away from the borders.
        for ch in 0..cfg.c_dim {
            for y in 8..11 {
                for x in 8..11 {
                    a[[ch, y, x]] = rng.random_range(-1.0..1.0);
                }
            }
        }
        let mut b = Array3::zeros((cfg.c_dim, h, h));
        for ch in 0..cfg.c_dim {
            for y in 0..h - 1 {
                for x in 0..h - 1 {
                    b[[ch, y + 1, x + 1]] = a[[ch, y, x]];
                }
            }
        }
        let z = StyleCode::new(vec![0.3; cfg.z_dim]);
        let out_a = run(&cfg, &store, &a, &z);
        let out_b = run(&cfg, &store, &b, &z);
        // Compare where both receptive fields stay clear of the padding.
        for ch in 0..3 {
            for y in 5..14 {
                for x in 5..14 {
                    let d = (out_a[[ch, y, x]] - out_b[[ch, y + 1, x + 1]]).abs();
                    assert!(d < 1e-12, "({x},{y}) ch {ch}: {d}");
                }
            }
        }
    }

    #[test]
    fn zero_style_modulation_is_identity() {
        // Modulation tensors initialize to zero, so the style code must not
        // influence the refiner until training moves them.
        let (cfg, store) = setup();
        let img = random_image(&cfg, 9, 9, 4);
        let out1 = run(&cfg, &store, &img, &StyleCode::zeros(cfg.z_dim));
        let out2 = run(&cfg, &store, &img, &StyleCode::new(vec![1.5; cfg.z_dim]));
        assert_eq!(out1, out2);
    }

    #[test]
    fn style_reaches_output_once_modulation_is_nonzero() {
        let (cfg, mut store) = setup();
        store.tensor_mut("refiner/conv1_ms").fill(0.05);
        let img = random_image(&cfg, 9, 9, 5);
        let out1 = run(&cfg, &store, &img, &StyleCode::zeros(cfg.z_dim));
        let out2 = run(&cfg, &store, &img, &StyleCode::new(vec![1.5; cfg.z_dim]));
        assert_ne!(out1, out2);
    }

    #[test]
    fn refiner_parameters_receive_gradient() {
        let (cfg, store) = setup();
        let mut tape = Tape::new();
        let leaves = ParamLeaves::register(&store, &mut tape);
        let z = StyleCode::new(vec![0.2; cfg.z_dim]);
        let w = style_network(&mut tape, &leaves, &cfg, &z);
        let img = random_image(&cfg, 9, 9, 6);
        let x = tape.constant(img.into_dyn());
        let rgb = refine(&mut tape, &leaves, &cfg, x, w);
        let sq = tape.square(rgb);
        let loss = tape.sum_all(sq);
        let grads = tape.backward(loss);
        for name in ["refiner/conv0_k", "refiner/conv3_b", "refiner/head_k", "style/l0_w"] {
            assert!(grads.get(leaves.id(name)).is_some(), "{name} missing gradient");
        }
        // Modulation scale tensors sit at zero but still get gradient
        // through the scale path.
        assert!(grads.get(leaves.id("refiner/conv0_ms")).is_some());
    }

    #[test]
    fn bypass_maps_clip_range_to_unit_interval() {
        let (cfg, _) = setup();
        let mut img = Array3::zeros((cfg.c_dim, 2, 2));
        img[[0, 0, 0]] = -1.0;
        img[[1, 0, 0]] = 0.0;
        img[[2, 0, 0]] = 1.0;
        let out = refine_bypass(&img);
        assert_eq!(out.dim(), (3, 2, 2));
        assert_eq!(out[[0, 0, 0]], 0.0);
        assert_eq!(out[[1, 0, 0]], 0.5);
        assert_eq!(out[[2, 0, 0]], 1.0);
    }
}
