//! Command-line front end: world preprocessing, rendering, label
//! projection, training, a traversal micro-benchmark, and gradient checking.

mod images;

use std::error::Error;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use voxelfield_core::config::Config;
use voxelfield_core::image_refiner::{refine, refine_bypass};
use voxelfield_core::label_semantics::{label_entropy, LabelScheme};
use voxelfield_core::neural_field::StyleCode;
use voxelfield_core::params::{ParamLeaves, ParameterStore};
use voxelfield_core::ray_traversal::{traverse, oracle};
use voxelfield_core::tape::Tape;
use voxelfield_core::trainer::{gradcheck, sample_camera, sample_style, train};
use voxelfield_core::volume_renderer::{project_labels, render_frame, CameraPose, SampleMode};
use voxelfield_core::voxel_world::{load_world_with_scheme, shell_extract, write_world};
use voxelfield_core::{fixtures, VoxelWorld};

#[derive(Parser)]
#[command(name = "voxelfield", about = "Sparse-voxel volumetric neural renderer")]
struct Cli {
    /// Worker threads; 0 uses all cores. Overrides VOXELFIELD_THREADS.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Configuration file with `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Inline overrides, e.g. --set samples_eval=48 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Raw-label-to-class mapping file (one `raw_name class_name` per line).
    #[arg(long)]
    mapping: Option<PathBuf>,
    /// Class color palette file (one `class_name r g b` per line).
    #[arg(long)]
    palette: Option<PathBuf>,
}

impl ConfigArgs {
    fn config(&self) -> Result<Config, Box<dyn Error>> {
        let mut cfg = Config::default();
        if let Some(path) = &self.config {
            cfg.merge_file(path)?;
        }
        for s in &self.sets {
            let (key, value) = s
                .split_once('=')
                .ok_or_else(|| format!("--set {s}: expected KEY=VALUE"))?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn scheme(&self) -> Result<LabelScheme, Box<dyn Error>> {
        let mut scheme = LabelScheme::default();
        if let Some(path) = &self.mapping {
            scheme.load_mapping(path)?;
        }
        if let Some(path) = &self.palette {
            scheme.load_palette(path)?;
        }
        Ok(scheme)
    }
}

#[derive(Args, Clone)]
struct CameraArgs {
    /// Explicit pose: "cx,cy,cz:tx,ty,tz" (position, look-at target).
    #[arg(long, allow_hyphen_values = true)]
    camera: Option<String>,
    /// Vertical field of view in radians for an explicit camera.
    #[arg(long, default_value_t = 0.9)]
    fov: f64,
    /// Seed for sampled cameras (used when --camera is absent).
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl CameraArgs {
    fn resolve(&self, world: &VoxelWorld, cfg: &Config) -> Result<CameraPose, Box<dyn Error>> {
        match &self.camera {
            Some(spec) => {
                let parts: Vec<&str> = spec.split(':').collect();
                if parts.len() != 2 {
                    return Err(format!("--camera {spec}: expected POS:TARGET").into());
                }
                let vec3 = |s: &str| -> Result<[f64; 3], Box<dyn Error>> {
                    let v: Vec<f64> = s
                        .split(',')
                        .map(|x| x.trim().parse::<f64>())
                        .collect::<Result<_, _>>()?;
                    if v.len() != 3 {
                        return Err(format!("'{s}': expected three comma-separated numbers").into());
                    }
                    Ok([v[0], v[1], v[2]])
                };
                Ok(CameraPose::look_at(vec3(parts[0])?, vec3(parts[1])?, self.fov))
            }
            None => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                Ok(sample_camera(world, cfg, &mut rng)?)
            }
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Strip voxels buried deeper than the shell thickness.
    Preprocess {
        /// Input world (gvox text format).
        input: PathBuf,
        /// Output world path.
        output: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Render RGB, depth, and segmentation images from a viewpoint.
    Render {
        /// World file (preprocessed gvox).
        world: PathBuf,
        /// Output path prefix; writes <prefix>_rgb.png, _depth.png, _seg.png.
        output: PathBuf,
        /// Trained checkpoint; fresh random parameters when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 128)]
        width: usize,
        #[arg(long, default_value_t = 128)]
        height: usize,
        /// Seed for the style code z.
        #[arg(long, default_value_t = 0)]
        style_seed: u64,
        #[command(flatten)]
        camera: CameraArgs,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Project first-hit class labels to an indexed image; prints the label
    /// entropy and depth statistics used by camera rejection.
    Project {
        world: PathBuf,
        output: PathBuf,
        #[arg(long, default_value_t = 128)]
        width: usize,
        #[arg(long, default_value_t = 128)]
        height: usize,
        #[command(flatten)]
        camera: CameraArgs,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Fit the renderer to the flat-shaded reference of a world.
    Train {
        world: PathBuf,
        /// Checkpoint directory.
        out: PathBuf,
        /// Resume from an existing checkpoint instead of fresh parameters.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Time grid traversal and cross-check it against dense ray marching.
    Bench {
        /// World file; a built-in terrain fixture when omitted.
        world: Option<PathBuf>,
        #[arg(long, default_value_t = 20000)]
        rays: usize,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Verify analytic gradients of the full pipeline by finite differences.
    Gradcheck {
        /// World file; a small built-in fixture when omitted.
        world: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn init_threads(cli_threads: Option<usize>) -> Result<(), Box<dyn Error>> {
    let n = match cli_threads {
        Some(n) => n,
        None => std::env::var("VOXELFIELD_THREADS")
            .ok()
            .map(|v| v.parse::<usize>())
            .transpose()
            .map_err(|_| "VOXELFIELD_THREADS must be a non-negative integer")?
            .unwrap_or(0),
    };
    if n > 0 {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn load_store(
    world: &VoxelWorld,
    cfg: &Config,
    checkpoint: &Option<PathBuf>,
) -> Result<ParameterStore, Box<dyn Error>> {
    match checkpoint {
        Some(path) => Ok(ParameterStore::load(path)?),
        None => Ok(ParameterStore::init(world, cfg, cfg.seed)),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<(), Box<dyn Error>> {
    init_threads(cli.threads)?;
    match cli.command {
        Command::Preprocess { input, output, cfg } => {
            let config = cfg.config()?;
            let scheme = cfg.scheme()?;
            let world = load_world_with_scheme(&input, &scheme)?;
            let shell = shell_extract(&world, config.shell_thickness);
            write_world(&shell, &output)?;
            println!("voxels_in={}", world.occupied_count());
            println!("voxels_out={}", shell.occupied_count());
            println!(
                "kept_fraction={:.4}",
                shell.occupied_count() as f64 / world.occupied_count().max(1) as f64
            );
        }
        Command::Render {
            world,
            output,
            checkpoint,
            width,
            height,
            style_seed,
            camera,
            cfg,
        } => {
            let config = cfg.config()?;
            let scheme = cfg.scheme()?;
            let world = load_world_with_scheme(&world, &scheme)?;
            let store = load_store(&world, &config, &checkpoint)?;
            let pose = camera.resolve(&world, &config)?;
            let mut rng = ChaCha8Rng::seed_from_u64(style_seed);
            let z: StyleCode = sample_style(&config, &mut rng);

            let mut tape = Tape::new();
            let leaves = ParamLeaves::register(&store, &mut tape);
            let mut frame = render_frame(
                &mut tape,
                &leaves,
                &world,
                &store.features,
                &config,
                &pose,
                &z,
                width,
                height,
                config.samples_eval,
                SampleMode::Midpoint,
            );
            frame.buffers.rgb = if config.refine_bypass {
                refine_bypass(&frame.buffers.feature)
            } else {
                let rgb = refine(&mut tape, &leaves, &config, frame.feature_image, frame.w_style);
                tape.value(rgb)
                    .view()
                    .into_dimensionality::<voxelfield_core::ndarray::Ix3>()
                    .unwrap()
                    .to_owned()
            };
            images::write_frame(&output, &frame.buffers, &scheme, config.d_max)?;
            println!("hit_pixels={}", frame.hit_pixels.len());
            println!("total_pixels={}", width * height);
        }
        Command::Project { world, output, width, height, camera, cfg } => {
            let config = cfg.config()?;
            let scheme = cfg.scheme()?;
            let world = load_world_with_scheme(&world, &scheme)?;
            let pose = camera.resolve(&world, &config)?;
            let (labels, depths) = project_labels(&world, &pose, width, height);
            images::write_seg(&output, &labels, width, height, &scheme)?;
            let mean_depth = if depths.is_empty() {
                f64::NAN
            } else {
                depths.iter().sum::<f64>() / depths.len() as f64
            };
            println!("entropy={:.6}", label_entropy(&labels));
            println!("mean_depth={mean_depth:.6}");
            println!("hit_fraction={:.6}", depths.len() as f64 / labels.len() as f64);
        }
        Command::Train { world, out, checkpoint, cfg } => {
            let config = cfg.config()?;
            let scheme = cfg.scheme()?;
            let world = load_world_with_scheme(&world, &scheme)?;
            let mut store = load_store(&world, &config, &checkpoint)?;
            std::fs::create_dir_all(&out)?;
            let mut stdout = std::io::stdout();
            let report = train(
                &world,
                &scheme,
                &config,
                &mut store,
                Some(&out),
                Some(&mut stdout),
            )?;
            println!("final_loss={:.6}", report.final_loss());
        }
        Command::Bench { world, rays, cfg } => {
            let config = cfg.config()?;
            let world = match world {
                Some(path) => load_world_with_scheme(&path, &cfg.scheme()?)?,
                None => fixtures::terrain_world(48, 48, 24, 0).world,
            };
            run_bench(&world, &config, rays)?;
        }
        Command::Gradcheck { world, seed, tolerance, cfg } => {
            let config = cfg.config()?;
            let world = match world {
                Some(path) => load_world_with_scheme(&path, &cfg.scheme()?)?,
                None => fixtures::two_voxel_world(),
            };
            let report = gradcheck(&world, &config, seed)?;
            let mut ok = true;
            for group in &report {
                println!(
                    "group={} max_rel_err={:.3e} checks={}",
                    group.group, group.max_rel_err, group.checks
                );
                ok &= group.max_rel_err < tolerance;
            }
            println!("gradcheck={}", if ok { "pass" } else { "fail" });
            if !ok {
                return Err(format!("gradient check exceeded tolerance {tolerance}").into());
            }
        }
    }
    Ok(())
}

fn run_bench(world: &VoxelWorld, cfg: &Config, rays: usize) -> Result<(), Box<dyn Error>> {
    use voxelfield_core::ray_traversal::Ray;
    let dims = world.dims();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let ray_set: Vec<Ray> = (0..rays)
        .map(|_| {
            use rand::Rng;
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
        .collect();

    let start = std::time::Instant::now();
    let mut segments = 0usize;
    for ray in &ray_set {
        segments += traverse(world, ray).segments.len();
    }
    let elapsed = start.elapsed().as_secs_f64();

    // Cross-check a subset against the dense marcher.
    let grid = oracle::DenseGrid::from_world(world);
    let mut mismatches = 0usize;
    let check = ray_set.len().min(500);
    for ray in ray_set.iter().take(check) {
        let list = traverse(world, ray);
        mismatches += oracle::membership_mismatches(&grid, ray, &list, 0.01, 1e-6);
    }

    println!("rays={}", ray_set.len());
    println!("segments={segments}");
    println!("elapsed_s={elapsed:.6}");
    println!("rays_per_s={:.0}", ray_set.len() as f64 / elapsed);
    println!("oracle_rays_checked={check}");
    println!("oracle_mismatches={mismatches}");
    println!("d_max={}", cfg.d_max);
    if mismatches > 0 {
        return Err("traversal disagrees with the dense-march oracle".into());
    }
    Ok(())
}
