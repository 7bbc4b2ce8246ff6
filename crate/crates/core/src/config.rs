//! Runtime configuration: every tunable of the pipeline with its default,
//! loadable from a `key = value` text file.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    /// Width of the per-vertex feature vectors.
    pub feature_dim: usize,
    /// Leading channels of the location code that get Fourier encoded; the
    /// rest pass through unchanged.
    pub encoded_channels: usize,
    /// Fourier frequency count L for the location code.
    pub fourier_levels: usize,
    /// Fourier frequency count for the sky direction encoding.
    pub sky_fourier_levels: usize,
    pub hidden_width: usize,
    /// Plain linear layers shared by both field heads.
    pub trunk_layers: usize,
    /// Output feature width of the field and sky heads.
    pub c_dim: usize,
    pub z_dim: usize,
    pub w_dim: usize,
    pub label_dim: usize,
    pub refiner_channels: usize,
    /// Samples per ray during training / evaluation.
    pub samples_train: usize,
    pub samples_eval: usize,
    /// Ray truncation: maximum accumulated in-voxel distance.
    pub d_max: f64,
    pub shell_thickness: usize,
    pub lambda_l2: f64,
    pub lambda_l1: f64,
    pub lambda_opacity: f64,
    pub lr_generator: f64,
    pub lr_features: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Per-sample features are clipped to [-clip, clip] before blending.
    pub feature_clip: f64,
    /// Camera rejection thresholds.
    pub min_mean_depth: f64,
    pub min_label_entropy: f64,
    pub camera_retries: usize,
    /// Camera/look-at points sit this far above the top of their column.
    pub camera_height_min: f64,
    pub camera_height_max: f64,
    /// Vertical field of view range (radians) for sampled cameras.
    pub fov_min: f64,
    pub fov_max: f64,
    pub train_resolution: usize,
    pub iterations: usize,
    pub checkpoint_every: usize,
    pub seed: u64,
    /// Worker threads for per-pixel geometry; 0 picks the rayon default.
    pub threads: usize,
    /// Skip the image-space CNN and map the first 3 feature channels to RGB.
    pub refine_bypass: bool,
    pub init_feature_scale: f64,
    pub demod_epsilon: f64,
    pub leaky_slope: f64,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            feature_dim: 64,
            encoded_channels: 24,
            fourier_levels: 4,
            sky_fourier_levels: 4,
            hidden_width: 32,
            trunk_layers: 4,
            c_dim: 8,
            z_dim: 16,
            w_dim: 32,
            label_dim: 8,
            refiner_channels: 16,
            samples_train: 24,
            samples_eval: 32,
            d_max: 3.0,
            shell_thickness: 4,
            lambda_l2: 10.0,
            lambda_l1: 1.0,
            lambda_opacity: 0.5,
            lr_generator: 1e-4,
            lr_features: 5e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            feature_clip: 1.0,
            min_mean_depth: 2.0,
            min_label_entropy: 0.75,
            camera_retries: 100,
            camera_height_min: 1.5,
            camera_height_max: 3.0,
            fov_min: 0.6,
            fov_max: 1.2,
            train_resolution: 32,
            iterations: 2000,
            checkpoint_every: 500,
            seed: 0,
            threads: 0,
            refine_bypass: false,
            init_feature_scale: 0.1,
            demod_epsilon: 1e-8,
            leaky_slope: 0.2,
        }
    }
}

impl Config {
    /// Channels passed through the positional encoding unchanged.
    pub fn passthrough_channels(&self) -> usize {
        self.feature_dim - self.encoded_channels
    }

    /// Length of the encoded location code fed to the field MLP (before the
    /// label embedding is appended).
    pub fn encoded_len(&self) -> usize {
        self.encoded_channels * 2 * self.fourier_levels + self.passthrough_channels()
    }

    pub fn field_input_len(&self) -> usize {
        self.encoded_len() + self.label_dim
    }

    /// Raw direction passthrough plus its Fourier features.
    pub fn sky_input_len(&self) -> usize {
        3 + 3 * 2 * self.sky_fourier_levels
    }

    pub fn from_file(path: &Path) -> Result<Config> {
        let mut config = Config::default();
        config.merge_file(path)?;
        config.validate()?;
        Ok(config)
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "{}: line {}: expected 'key = value'",
                    path.display(),
                    lineno + 1
                ))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse '{value}'")))
        }
        match key {
            "feature_dim" => self.feature_dim = parse(key, value)?,
            "encoded_channels" => self.encoded_channels = parse(key, value)?,
            "fourier_levels" => self.fourier_levels = parse(key, value)?,
            "sky_fourier_levels" => self.sky_fourier_levels = parse(key, value)?,
            "hidden_width" => self.hidden_width = parse(key, value)?,
            "trunk_layers" => self.trunk_layers = parse(key, value)?,
            "c_dim" => self.c_dim = parse(key, value)?,
            "z_dim" => self.z_dim = parse(key, value)?,
            "w_dim" => self.w_dim = parse(key, value)?,
            "label_dim" => self.label_dim = parse(key, value)?,
            "refiner_channels" => self.refiner_channels = parse(key, value)?,
            "samples_train" => self.samples_train = parse(key, value)?,
            "samples_eval" => self.samples_eval = parse(key, value)?,
            "d_max" => self.d_max = parse(key, value)?,
            "shell_thickness" => self.shell_thickness = parse(key, value)?,
            "lambda_l2" => self.lambda_l2 = parse(key, value)?,
            "lambda_l1" => self.lambda_l1 = parse(key, value)?,
            "lambda_opacity" => self.lambda_opacity = parse(key, value)?,
            "lr_generator" => self.lr_generator = parse(key, value)?,
            "lr_features" => self.lr_features = parse(key, value)?,
            "adam_beta1" => self.adam_beta1 = parse(key, value)?,
            "adam_beta2" => self.adam_beta2 = parse(key, value)?,
            "adam_eps" => self.adam_eps = parse(key, value)?,
            "feature_clip" => self.feature_clip = parse(key, value)?,
            "min_mean_depth" => self.min_mean_depth = parse(key, value)?,
            "min_label_entropy" => self.min_label_entropy = parse(key, value)?,
            "camera_retries" => self.camera_retries = parse(key, value)?,
            "camera_height_min" => self.camera_height_min = parse(key, value)?,
            "camera_height_max" => self.camera_height_max = parse(key, value)?,
            "fov_min" => self.fov_min = parse(key, value)?,
            "fov_max" => self.fov_max = parse(key, value)?,
            "train_resolution" => self.train_resolution = parse(key, value)?,
            "iterations" => self.iterations = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "threads" => self.threads = parse(key, value)?,
            "refine_bypass" => self.refine_bypass = parse(key, value)?,
            "init_feature_scale" => self.init_feature_scale = parse(key, value)?,
            "demod_epsilon" => self.demod_epsilon = parse(key, value)?,
            "leaky_slope" => self.leaky_slope = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(Error::Config(msg));
        if self.feature_dim < 2 {
            return err(format!("feature_dim: must be >= 2, got {}", self.feature_dim));
        }
        if self.encoded_channels > self.feature_dim {
            return err(format!(
                "encoded_channels: must be <= feature_dim ({}), got {}",
                self.feature_dim, self.encoded_channels
            ));
        }
        if self.c_dim < 3 {
            return err(format!("c_dim: must be >= 3 for RGB bypass, got {}", self.c_dim));
        }
        if self.samples_train == 0 || self.samples_eval == 0 {
            return err("samples_train/samples_eval: must be >= 1".into());
        }
        if self.d_max <= 0.0 {
            return err(format!("d_max: must be positive, got {}", self.d_max));
        }
        if self.shell_thickness == 0 {
            return err("shell_thickness: must be >= 1".into());
        }
        for (name, v) in [
            ("lambda_l2", self.lambda_l2),
            ("lambda_l1", self.lambda_l1),
            ("lambda_opacity", self.lambda_opacity),
        ] {
            if v < 0.0 {
                return err(format!("{name}: must be >= 0, got {v}"));
            }
        }
        for (name, v) in [
            ("lr_generator", self.lr_generator),
            ("lr_features", self.lr_features),
        ] {
            if v <= 0.0 {
                return err(format!("{name}: must be positive, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return err("adam_beta1/adam_beta2: must be in [0, 1)".into());
        }
        if self.feature_clip <= 0.0 {
            return err(format!("feature_clip: must be positive, got {}", self.feature_clip));
        }
        if self.camera_height_min > self.camera_height_max {
            return err("camera_height_min: must be <= camera_height_max".into());
        }
        if self.fov_min <= 0.0
            || self.fov_max >= std::f64::consts::PI
            || self.fov_min > self.fov_max
        {
            return err(format!(
                "fov_min/fov_max: need 0 < min <= max < pi, got {}..{}",
                self.fov_min, self.fov_max
            ));
        }
        if self.train_resolution < 9 {
            return err(format!(
                "train_resolution: must be >= 9 (refiner receptive field), got {}",
                self.train_resolution
            ));
        }
        if self.hidden_width == 0 || self.trunk_layers == 0 || self.refiner_channels == 0 {
            return err("hidden_width/trunk_layers/refiner_channels: must be >= 1".into());
        }
        Ok(())
    }
}
