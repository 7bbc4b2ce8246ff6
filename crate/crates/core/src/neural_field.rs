//! Style-conditioned implicit field: the shared style network, partial
//! positional encoding, weight-modulated linear layers, the per-sample field
//! MLP producing (feature, density), and the sky-dome MLP.
//!
//! All forward passes are built on a [`Tape`] so the same code path serves
//! rendering and training. Inputs are batched: one row per sample.

use ndarray::Array2;

use crate::config::Config;
use crate::label_semantics::AbstractClass;
use crate::params::ParamLeaves;
use crate::tape::{Tape, TensorId};

/// Latent style code; one per rendered frame.
#[derive(Debug, Clone)]
pub struct StyleCode {
    pub z: Vec<f64>,
}

impl StyleCode {
    pub fn new(z: Vec<f64>) -> Self {
        assert!(z.iter().all(|v| v.is_finite()), "style code must be finite");
        StyleCode { z }
    }

    pub fn zeros(z_dim: usize) -> Self {
        StyleCode { z: vec![0.0; z_dim] }
    }
}

/// Maps the style code to the intermediate style feature w shared by every
/// modulated layer (field, sky, and refiner). Two layers; the output layer
/// is affine so a zero code with zero weights yields the bias exactly.
pub fn style_network(
    tape: &mut Tape,
    leaves: &ParamLeaves,
    cfg: &Config,
    z: &StyleCode,
) -> TensorId {
    assert_eq!(z.z.len(), cfg.z_dim, "style code length mismatch");
    let x = tape.constant_2d(Array2::from_shape_vec((1, cfg.z_dim), z.z.clone()).unwrap());
    style_network_from(tape, leaves, cfg, x)
}

/// Same forward pass but from an existing tape tensor [1, z_dim], so the
/// style code itself can be differentiated against.
pub fn style_network_from(
    tape: &mut Tape,
    leaves: &ParamLeaves,
    cfg: &Config,
    z: TensorId,
) -> TensorId {
    assert_eq!(tape.value(z).shape(), &[1, cfg.z_dim]);
    let h = linear(tape, leaves, "style/l0", z);
    let h = tape.leaky_relu(h, cfg.leaky_slope);
    linear(tape, leaves, "style/l1", h)
}

fn linear(tape: &mut Tape, leaves: &ParamLeaves, prefix: &str, x: TensorId) -> TensorId {
    let w = leaves.id(&format!("{prefix}_w"));
    let b = leaves.id(&format!("{prefix}_b"));
    let y = tape.matmul(x, w);
    tape.add_row(y, b)
}

/// Fourier-encodes the first `encoded_channels` of the location code with
/// frequencies 2^k * pi, k = 0..L-1, and concatenates the remaining channels
/// unchanged. Output width: encoded_channels * 2L + passthrough.
pub fn positional_encode_partial(
    tape: &mut Tape,
    cfg: &Config,
    code: TensorId,
) -> TensorId {
    let width = tape.value(code).shape()[1];
    assert_eq!(
        width, cfg.feature_dim,
        "location code width {} != configured feature_dim {}",
        width, cfg.feature_dim
    );
    let u = tape.slice_cols(code, 0, cfg.encoded_channels);
    let passthrough = tape.slice_cols(code, cfg.encoded_channels, cfg.feature_dim);
    let mut parts = Vec::with_capacity(2 * cfg.fourier_levels + 1);
    for k in 0..cfg.fourier_levels {
        let freq = (1u64 << k) as f64 * std::f64::consts::PI;
        let scaled = tape.mul_scalar(u, freq);
        parts.push(tape.sin(scaled));
        parts.push(tape.cos(scaled));
    }
    parts.push(passthrough);
    tape.concat_cols(&parts)
}

/// Weight-modulated linear layer: a per-input scale s = A w + a0 multiplies
/// the base weight columns, each output row is renormalized to unit norm
/// (demodulation, guarded by epsilon), then the layer applies as usual.
pub fn mod_linear(
    tape: &mut Tape,
    leaves: &ParamLeaves,
    cfg: &Config,
    prefix: &str,
    x: TensorId,
    w_style: TensorId,
) -> TensorId {
    let a = leaves.id(&format!("{prefix}_a"));
    let a0 = leaves.id(&format!("{prefix}_a0"));
    let base = leaves.id(&format!("{prefix}_w"));
    let bias = leaves.id(&format!("{prefix}_b"));

    let in_dim = tape.value(base).shape()[0];
    let s_row = tape.matmul(w_style, a); // [1, in]
    let s_flat = tape.reshape(s_row, &[in_dim]);
    let s = tape.add(s_flat, a0);

    // base is stored [in, out]; s scales per-input, demod normalizes
    // per-output across inputs.
    let modulated = tape.scale_rows(base, s);
    let squared = tape.square(modulated);
    let col_norms_sq = tape.sum_axis(squared, 0); // [out]
    let guarded = tape.add_scalar(col_norms_sq, cfg.demod_epsilon);
    let norms = tape.sqrt(guarded);
    let inv_norms = tape.recip(norms);
    let demodulated = tape.scale_cols(modulated, inv_norms);

    let y = tape.matmul(x, demodulated);
    tape.add_row(y, bias)
}

/// Shared per-sample field MLP: (encoded location code, label embedding) ->
/// (feature c, density sigma). The density path is plain linear layers only,
/// so sigma is independent of the style by construction; the feature head is
/// weight-modulated. Returned c is unclipped; sigma has softplus applied.
pub fn field_eval(
    tape: &mut Tape,
    leaves: &ParamLeaves,
    cfg: &Config,
    code: TensorId,
    labels: &[AbstractClass],
    w_style: TensorId,
) -> (TensorId, TensorId) {
    assert_eq!(tape.value(code).shape()[0], labels.len());
    let encoded = positional_encode_partial(tape, cfg, code);
    let label_emb = leaves.id("field/label_emb");
    let label_rows = tape.gather_rows(label_emb, labels.iter().map(|l| l.id()).collect());
    let mut h = tape.concat_cols(&[encoded, label_rows]);
    for i in 0..cfg.trunk_layers {
        h = linear(tape, leaves, &format!("field/trunk{i}"), h);
        h = tape.leaky_relu(h, cfg.leaky_slope);
    }
    let sigma_pre = linear(tape, leaves, "field/sigma", h);
    let sigma = tape.softplus(sigma_pre);

    let f = mod_linear(tape, leaves, cfg, "field/feat0", h, w_style);
    let f = tape.leaky_relu(f, cfg.leaky_slope);
    let c = mod_linear(tape, leaves, cfg, "field/feat1", f, w_style);
    (c, sigma)
}

/// Fourier encoding of unit directions with the raw components passed
/// through (pure sin/cos of multiples of pi collapse at the axis-aligned
/// directions +-e_i, so the raw direction disambiguates them). Directions
/// carry no gradient, so this is computed directly.
pub fn encode_directions(cfg: &Config, dirs: &[[f64; 3]]) -> Array2<f64> {
    let levels = cfg.sky_fourier_levels;
    let mut out = Array2::<f64>::zeros((dirs.len(), 3 + 3 * 2 * levels));
    for (row, d) in dirs.iter().enumerate() {
        for (j, &component) in d.iter().enumerate() {
            out[[row, j]] = component;
        }
        let mut col = 3;
        for k in 0..levels {
            let freq = (1u64 << k) as f64 * std::f64::consts::PI;
            for &component in d {
                out[[row, col]] = (freq * component).sin();
                out[[row, col + 1]] = (freq * component).cos();
                col += 2;
            }
        }
    }
    out
}

/// Sky dome: view direction (encoded) plus style feature -> feature vector.
/// Depends only on the direction, never on the ray origin (no parallax).
pub fn sky_eval(
    tape: &mut Tape,
    leaves: &ParamLeaves,
    cfg: &Config,
    dirs: &[[f64; 3]],
    w_style: TensorId,
) -> TensorId {
    for d in dirs {
        let norm: f64 = d.iter().map(|v| v * v).sum::<f64>();
        debug_assert!((norm - 1.0).abs() < 1e-6, "sky direction must be unit");
    }
    let encoded = tape.constant_2d(encode_directions(cfg, dirs));
    let h = mod_linear(tape, leaves, cfg, "sky/l0", encoded, w_style);
    let h = tape.leaky_relu(h, cfg.leaky_slope);
    mod_linear(tape, leaves, cfg, "sky/l1", h, w_style)
}
