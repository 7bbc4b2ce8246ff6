//! Pinhole camera, discrete quadrature along voxel-bounded rays, and the
//! full differentiable render graph: per-pixel geometry (traversal,
//! truncation, stratified sampling) feeds one batched field evaluation, the
//! accumulated features blend with the sky dome by leftover transmittance,
//! and the result is an image-shaped feature tensor ready for the refiner.

use ndarray::{Array2, Array3, ArrayD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::Config;
use crate::label_semantics::AbstractClass;
use crate::neural_field::{field_eval, sky_eval, style_network, StyleCode};
use crate::params::ParamLeaves;
use crate::ray_traversal::{stratified_sample, traverse, truncate, Jitter, Ray, Sample};
use crate::tape::{Tape, TensorId};
use crate::voxel_world::{corner_rows_and_weights, FeatureTable, VoxelWorld};

/// World-space up is +z; voxel columns stack along z.
pub const WORLD_UP: [f64; 3] = [0.0, 0.0, 1.0];

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    assert!(n > 1e-12, "degenerate direction");
    [v[0] / n, v[1] / n, v[2] / n]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Pinhole camera; rays go through pixel centers.
#[derive(Debug, Clone)]
pub struct CameraPose {
    pub position: [f64; 3],
    pub forward: [f64; 3],
    pub right: [f64; 3],
    pub up: [f64; 3],
    /// Vertical field of view, radians.
    pub fov: f64,
}

impl CameraPose {
    pub fn look_at(position: [f64; 3], target: [f64; 3], fov: f64) -> Self {
        let forward = normalize([
            target[0] - position[0],
            target[1] - position[1],
            target[2] - position[2],
        ]);
        let right = normalize(cross(forward, WORLD_UP));
        let up = cross(right, forward);
        CameraPose { position, forward, right, up, fov }
    }

    /// Ray through the center of pixel (px, py); py grows downward.
    pub fn pixel_ray(&self, px: usize, py: usize, width: usize, height: usize) -> Ray {
        let tan_half = (self.fov / 2.0).tan();
        let aspect = width as f64 / height as f64;
        let ndc_x = ((px as f64 + 0.5) / width as f64) * 2.0 - 1.0;
        let ndc_y = ((py as f64 + 0.5) / height as f64) * 2.0 - 1.0;
        let sx = ndc_x * tan_half * aspect;
        let sy = -ndc_y * tan_half;
        let dir = [
            self.forward[0] + sx * self.right[0] + sy * self.up[0],
            self.forward[1] + sx * self.right[1] + sy * self.up[1],
            self.forward[2] + sx * self.right[2] + sy * self.up[2],
        ];
        Ray::new(self.position, dir)
    }
}

/// Per-pixel outputs of one rendered frame. `rgb` is filled by the refiner
/// stage; everything else comes straight from the quadrature.
#[derive(Debug, Clone)]
pub struct FrameBuffers {
    pub width: usize,
    pub height: usize,
    /// [c_dim, height, width] blended feature image (pre-refiner).
    pub feature: Array3<f64>,
    pub rgb: Array3<f64>,
    /// Expected hit distance; infinity for pure sky pixels.
    pub depth: Vec<f64>,
    /// Class of the dominant quadrature sample, or Sky.
    pub seg: Vec<AbstractClass>,
    /// Leftover transmittance after the last sample (1 for sky-only rays).
    pub t_end: Vec<f64>,
    pub truncated: Vec<bool>,
    /// Sum of all quadrature weights plus leftover transmittance; equals 1
    /// up to roundoff by construction (partition of unity diagnostic).
    pub weight_sum: Vec<f64>,
}

/// Tape handles of the differentiable outputs of a rendered frame.
pub struct FrameGraph {
    /// [c_dim, height, width]
    pub feature_image: TensorId,
    /// Style feature w, [1, w_dim]; the refiner reuses it.
    pub w_style: TensorId,
    /// Sum of leftover transmittance over truncated rays (scalar tensor).
    pub opacity_penalty: TensorId,
    pub buffers: FrameBuffers,
    /// Row-major pixel indices that had at least one in-voxel sample.
    pub hit_pixels: Vec<usize>,
}

/// How sample positions are jittered within their quadrature bins.
#[derive(Debug, Clone, Copy)]
pub enum SampleMode {
    /// Deterministic bin centers (midpoint rule).
    Midpoint,
    /// One uniform draw per bin; streams are derived per pixel from the seed
    /// so the result is independent of pixel evaluation order.
    Jittered { seed: u64 },
}

struct PixelGeometry {
    samples: Vec<Sample>,
    truncated: bool,
    dir: [f64; 3],
}

fn pixel_geometry(
    world: &VoxelWorld,
    pose: &CameraPose,
    cfg: &Config,
    n_samples: usize,
    mode: SampleMode,
    width: usize,
    height: usize,
    pixel: usize,
) -> PixelGeometry {
    let (px, py) = (pixel % width, pixel / width);
    let ray = pose.pixel_ray(px, py, width, height);
    let full = traverse(world, &ray);
    let list = truncate(&full, cfg.d_max);
    let samples = match mode {
        SampleMode::Midpoint => {
            stratified_sample::<ChaCha8Rng>(&ray, &list, n_samples, Jitter::Midpoint)
        }
        SampleMode::Jittered { seed } => {
            let stream = seed
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add(pixel as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(stream);
            stratified_sample(&ray, &list, n_samples, Jitter::Rng(&mut rng))
        }
    };
    PixelGeometry {
        samples: samples.samples,
        truncated: list.truncated,
        dir: ray.dir,
    }
}

/// Builds the differentiable forward graph for one frame on `tape` and
/// returns it together with plain-value diagnostic buffers.
#[allow(clippy::too_many_arguments)]
pub fn render_frame(
    tape: &mut Tape,
    leaves: &ParamLeaves,
    world: &VoxelWorld,
    table: &FeatureTable,
    cfg: &Config,
    pose: &CameraPose,
    z: &StyleCode,
    width: usize,
    height: usize,
    n_samples: usize,
    mode: SampleMode,
) -> FrameGraph {
    let n_pixels = width * height;
    let geoms: Vec<PixelGeometry> = (0..n_pixels)
        .into_par_iter()
        .map(|p| pixel_geometry(world, pose, cfg, n_samples, mode, width, height, p))
        .collect();

    // Flatten hit-pixel samples; every hit pixel contributes exactly
    // n_samples rows, pixel-major, so [R*n] reshapes to [R, n].
    let mut hit_pixels = Vec::new();
    let mut rows = Vec::new();
    let mut weights = Vec::new();
    let mut labels = Vec::new();
    let mut deltas = Vec::new();
    let mut t_mids = Vec::new();
    let mut truncated_mask = Vec::new();
    for (p, g) in geoms.iter().enumerate() {
        if g.samples.is_empty() {
            continue;
        }
        assert_eq!(g.samples.len(), n_samples);
        hit_pixels.push(p);
        truncated_mask.push(if g.truncated { 1.0 } else { 0.0 });
        for s in &g.samples {
            let (r, w) = corner_rows_and_weights(table, s.voxel, s.position);
            rows.push(r);
            weights.push(w);
            labels.push(s.label);
            deltas.push(s.delta);
            t_mids.push(s.t_mid);
        }
    }
    let n_hit = hit_pixels.len();

    let w_style = style_network(tape, leaves, cfg, z);

    // Sky features for every pixel; hit pixels still blend sky through
    // whatever transmittance survives the quadrature.
    let dirs: Vec<[f64; 3]> = geoms.iter().map(|g| g.dir).collect();
    let sky_raw = sky_eval(tape, leaves, cfg, &dirs, w_style);
    let sky_c = tape.clamp(sky_raw, -cfg.feature_clip, cfg.feature_clip);

    let (blended, opacity_penalty, vox_diag) = if n_hit > 0 {
        let code = tape.trilinear_gather(leaves.features, rows, weights);
        let (c_raw, sigma) = field_eval(tape, leaves, cfg, code, &labels, w_style);
        let c = tape.clamp(c_raw, -cfg.feature_clip, cfg.feature_clip);

        // sigma [S,1] * delta -> per-bin optical depth, laid out [R, n].
        let delta_col = tape.constant(
            ArrayD::from_shape_vec(ndarray::IxDyn(&[deltas.len(), 1]), deltas.clone()).unwrap(),
        );
        let sd_col = tape.mul(sigma, delta_col);
        let sd = tape.reshape(sd_col, &[n_hit, n_samples]);

        // T_i = exp(-sum_{j<i} sigma_j delta_j), alpha_i = 1 - exp(-sd_i).
        let cum = tape.cumsum_exclusive(sd);
        let neg_cum = tape.neg(cum);
        let trans = tape.exp(neg_cum);
        let neg_sd = tape.neg(sd);
        let exp_neg_sd = tape.exp(neg_sd);
        let neg_exp = tape.neg(exp_neg_sd);
        let alpha = tape.add_scalar(neg_exp, 1.0);
        let wq = tape.mul(trans, alpha); // [R, n]

        // Weighted feature sum per pixel.
        let wq_flat = tape.reshape(wq, &[n_hit * n_samples]);
        let c_weighted = tape.scale_rows(c, wq_flat);
        let c_3d = tape.reshape(c_weighted, &[n_hit, n_samples, cfg.c_dim]);
        let c_vox = tape.sum_axis(c_3d, 1); // [R, c_dim]

        // Leftover transmittance after the final bin.
        let total_sd = tape.sum_axis(sd, 1); // [R]
        let neg_total = tape.neg(total_sd);
        let t_end = tape.exp(neg_total); // [R]

        let vox_full = tape.scatter_rows(c_vox, hit_pixels.clone(), n_pixels, 0.0);
        let t_end_col = tape.reshape(t_end, &[n_hit, 1]);
        let t_full_col = tape.scatter_rows(t_end_col, hit_pixels.clone(), n_pixels, 1.0);
        let t_full = tape.reshape(t_full_col, &[n_pixels]);
        let sky_weighted = tape.scale_rows(sky_c, t_full);
        let blended = tape.add(vox_full, sky_weighted);

        let mask = tape.constant(
            ArrayD::from_shape_vec(ndarray::IxDyn(&[n_hit]), truncated_mask.clone()).unwrap(),
        );
        let masked = tape.mul(t_end, mask);
        let opacity = tape.sum_all(masked);

        let wq_val = tape
            .value(wq)
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .to_owned();
        let t_end_val: Vec<f64> = tape.value(t_end).iter().copied().collect();
        (blended, opacity, Some((wq_val, t_end_val)))
    } else {
        let opacity = tape.constant(ArrayD::from_elem(ndarray::IxDyn(&[1]), 0.0));
        (sky_c, opacity, None)
    };

    // [P, c_dim] -> [c_dim, H, W]
    let transposed = tape.transpose(blended);
    let feature_image = tape.reshape(transposed, &[cfg.c_dim, height, width]);

    // Plain-value diagnostics.
    let mut depth = vec![f64::INFINITY; n_pixels];
    let mut seg = vec![AbstractClass::Sky; n_pixels];
    let mut t_end_buf = vec![1.0; n_pixels];
    let mut truncated = vec![false; n_pixels];
    let mut weight_sum = vec![1.0; n_pixels];
    if let Some((wq_val, t_end_val)) = &vox_diag {
        for (r, &p) in hit_pixels.iter().enumerate() {
            let t_end = t_end_val[r];
            t_end_buf[p] = t_end;
            truncated[p] = truncated_mask[r] > 0.0;
            let mut acc_w = 0.0;
            let mut acc_wt = 0.0;
            let mut best_w = 0.0;
            let mut best_label = AbstractClass::Sky;
            for s in 0..n_samples {
                let w = wq_val[[r, s]];
                let flat = r * n_samples + s;
                acc_w += w;
                acc_wt += w * t_mids[flat];
                if w > best_w {
                    best_w = w;
                    best_label = labels[flat];
                }
            }
            weight_sum[p] = acc_w + t_end;
            let hit_mass = 1.0 - t_end;
            if hit_mass >= 1e-6 {
                depth[p] = acc_wt / hit_mass;
            }
            if t_end < best_w {
                seg[p] = best_label;
            }
        }
    }

    let feature = tape
        .value(feature_image)
        .view()
        .into_dimensionality::<ndarray::Ix3>()
        .unwrap()
        .to_owned();
    FrameGraph {
        feature_image,
        w_style,
        opacity_penalty,
        buffers: FrameBuffers {
            width,
            height,
            feature,
            rgb: Array3::zeros((3, height, width)),
            depth,
            seg,
            t_end: t_end_buf,
            truncated,
            weight_sum,
        },
        hit_pixels,
    }
}

/// First-hit class per pixel (Sky where the ray misses every voxel), plus
/// first-hit distances for the hit pixels. No field evaluation involved;
/// used for camera rejection and the `project` command.
pub fn project_labels(
    world: &VoxelWorld,
    pose: &CameraPose,
    width: usize,
    height: usize,
) -> (Vec<AbstractClass>, Vec<f64>) {
    let results: Vec<(AbstractClass, f64)> = (0..width * height)
        .into_par_iter()
        .map(|pixel| {
            let ray = pose.pixel_ray(pixel % width, pixel / width, width, height);
            let list = traverse(world, &ray);
            match list.segments.first() {
                Some(seg) => (seg.label, seg.t_enter),
                None => (AbstractClass::Sky, f64::INFINITY),
            }
        })
        .collect();
    let labels = results.iter().map(|r| r.0).collect();
    let depths = results
        .iter()
        .filter(|r| r.1.is_finite())
        .map(|r| r.1)
        .collect();
    (labels, depths)
}

/// Plain-f64 reference quadrature for one ray: per-bin densities, bin
/// widths, per-bin feature rows, and a sky feature. Returns the blended
/// feature, the per-bin weights, and the leftover transmittance.
pub fn integrate_ray(
    sigma: &[f64],
    delta: &[f64],
    features: &Array2<f64>,
    sky: &[f64],
) -> (Vec<f64>, Vec<f64>, f64) {
    assert_eq!(sigma.len(), delta.len());
    assert_eq!(features.nrows(), sigma.len());
    assert_eq!(features.ncols(), sky.len());
    let mut out = vec![0.0; sky.len()];
    let mut weights = Vec::with_capacity(sigma.len());
    let mut optical_depth = 0.0f64;
    for i in 0..sigma.len() {
        let trans = (-optical_depth).exp();
        let alpha = 1.0 - (-sigma[i] * delta[i]).exp();
        let w = trans * alpha;
        weights.push(w);
        for (o, f) in out.iter_mut().zip(features.row(i).iter()) {
            *o += w * f;
        }
        optical_depth += sigma[i] * delta[i];
    }
    let t_end = (-optical_depth).exp();
    for (o, s) in out.iter_mut().zip(sky.iter()) {
        *o += t_end * s;
    }
    (out, weights, t_end)
}
