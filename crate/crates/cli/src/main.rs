//! Command-line front end: cloud initialization, training, turntable
//! rendering, PLY export, gradient checking, and the photometric
//! reconstruction oracle.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gsgen_core::gaussians::{farthest_point_sample, init_from_points, sample_mesh_surface};
use gsgen_core::grad::{finite_difference_check, FdConfig, QuadraticLoss};
use gsgen_core::io::{
    read_obj, read_point_cloud_ply, write_gaussian_ply, write_png, read_gaussian_ply,
};
use gsgen_core::pipeline::{
    psnr, reconstruction_fit, render_turntable, three_blob_cloud, three_blob_points,
    turntable_camera, Checkpoint, FitConfig, TurntableConfig,
};
use gsgen_core::rasterizer::render;
use gsgen_core::{
    BackgroundModel, Camera, ColorInit, GaussianCloud, InitConfig, RasterOptions, TrainConfig,
};

#[derive(Parser)]
#[command(name = "gsgen", version, about = "Gaussian-splatting text-to-3D toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build an initial Gaussian cloud and write it as a PLY file.
    Init(InitArgs),
    /// Run the two-stage optimization described by a config file.
    Train(TrainArgs),
    /// Render a turntable image sequence from a checkpoint.
    Render(RenderArgs),
    /// Export the Gaussian cloud inside a checkpoint as a PLY file.
    Export(ExportArgs),
    /// Compare analytic gradients against finite differences.
    CheckGrad(CheckGradArgs),
    /// Fit a cloud to rendered views of the synthetic blob scene and report
    /// PSNR (renderer/optimizer integration oracle).
    Fit(FitArgs),
}

#[derive(Args)]
struct InitArgs {
    /// Destination PLY path.
    #[arg(long)]
    out: PathBuf,
    /// PLY point cloud to start from (colors used when present).
    #[arg(long, conflicts_with_all = ["mesh", "synthetic"])]
    points: Option<PathBuf>,
    /// OBJ mesh whose surface is sampled uniformly by area.
    #[arg(long, conflicts_with = "synthetic")]
    mesh: Option<PathBuf>,
    /// Use the built-in three-blob scene instead of an input file.
    #[arg(long)]
    synthetic: bool,
    /// Number of Gaussians to keep (farthest-point subsampling when the
    /// source has more points).
    #[arg(long, default_value_t = 512)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Initial per-axis standard deviation in scene units.
    #[arg(long, default_value_t = 0.02)]
    scale: f64,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML config file; missing keys take their documented defaults.
    #[arg(long)]
    config: PathBuf,
    /// Override a config key, e.g. --set refine.lambda_opacity=50.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Initial cloud PLY (defaults to a 512-point sample of the built-in
    /// blob scene).
    #[arg(long)]
    init: Option<PathBuf>,
    /// Resume from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Write the final cloud here as PLY.
    #[arg(long)]
    out_ply: Option<PathBuf>,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output directory for frame_XXXX.png files.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 24)]
    frames: usize,
    #[arg(long, default_value_t = 256)]
    width: usize,
    #[arg(long, default_value_t = 256)]
    height: usize,
    #[arg(long, default_value_t = 2.2)]
    radius: f64,
    #[arg(long, default_value_t = 20.0)]
    elevation: f64,
    #[arg(long, default_value_t = 45.0)]
    fov: f64,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Write ASCII PLY instead of binary.
    #[arg(long)]
    ascii: bool,
}

#[derive(Args)]
struct CheckGradArgs {
    #[arg(long, default_value_t = 5)]
    scenes: usize,
    #[arg(long, default_value_t = 12)]
    max_gaussians: usize,
    #[arg(long, default_value_t = 24)]
    resolution: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Central-difference step size.
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    /// Maximum acceptable per-group relative error.
    #[arg(long, default_value_t = 1e-3)]
    tolerance: f64,
}

#[derive(Args)]
struct FitArgs {
    /// Output directory for the fitted PLY and a preview turntable.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 400)]
    iterations: usize,
    #[arg(long, default_value_t = 8)]
    views: usize,
    #[arg(long, default_value_t = 64)]
    resolution: usize,
    /// Initial cloud size, farthest-point sampled from the blob scene.
    #[arg(long, default_value_t = 256)]
    points: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Enable adaptive density control during the fit.
    #[arg(long)]
    densify: bool,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    if let Err(e) = run() {
        log::error!("{e:#}");
        std::process::exit(1);
    }
}

fn run() -> Result<()> {
    configure_threads()?;
    match Cli::parse().command {
        Command::Init(args) => cmd_init(args),
        Command::Train(args) => cmd_train(args),
        Command::Render(args) => cmd_render(args),
        Command::Export(args) => cmd_export(args),
        Command::CheckGrad(args) => cmd_check_grad(args),
        Command::Fit(args) => cmd_fit(args),
    }
}

/// Caps the rayon worker count when GSGEN_THREADS is set.
fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("GSGEN_THREADS") {
        let n: usize = v
            .parse()
            .with_context(|| format!("GSGEN_THREADS must be a positive integer, got {v:?}"))?;
        if n == 0 {
            bail!("GSGEN_THREADS must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("installing the global thread pool")?;
    }
    Ok(())
}

/// Farthest-point subsample (with matching colors) when more than `n` points
/// are supplied.
fn subsample(
    points: Vec<Vector3<f32>>,
    colors: Option<Vec<Vector3<f32>>>,
    n: usize,
) -> Result<(Vec<Vector3<f32>>, Option<Vec<Vector3<f32>>>)> {
    if points.len() <= n {
        return Ok((points, colors));
    }
    let idx = farthest_point_sample(&points, n, 0)?;
    let sub_points = idx.iter().map(|&i| points[i]).collect();
    let sub_colors = colors.map(|cs| idx.iter().map(|&i| cs[i]).collect());
    Ok((sub_points, sub_colors))
}

fn cmd_init(args: InitArgs) -> Result<()> {
    let (points, colors) = if let Some(path) = &args.points {
        let (p, c) = read_point_cloud_ply(path)
            .with_context(|| format!("reading {}", path.display()))?;
        subsample(p, c, args.n)?
    } else if let Some(path) = &args.mesh {
        let (verts, tris) =
            read_obj(path).with_context(|| format!("reading {}", path.display()))?;
        let p = sample_mesh_surface(&verts, &tris, args.n, args.seed)?;
        (p, None)
    } else if args.synthetic {
        let (p, c) = three_blob_points(args.n.max(1) * 4, args.seed);
        subsample(p, Some(c), args.n)?
    } else {
        bail!("one of --points, --mesh, or --synthetic is required");
    };

    let cfg = InitConfig { fixed_scale: args.scale, n_points: args.n, ..InitConfig::default() };
    let color_init = match colors {
        Some(c) => ColorInit::Given(c),
        None => ColorInit::Random,
    };
    let cloud = init_from_points(&points, color_init, &cfg, args.seed)?;
    write_gaussian_ply(&args.out, &cloud, true)?;
    log::info!("wrote {} gaussians to {}", cloud.len(), args.out.display());
    Ok(())
}

/// Applies --set key=value pairs onto the raw TOML document before parsing,
/// so overrides go through the same defaulting rules as file keys.
fn apply_overrides(text: &str, sets: &[String]) -> Result<String> {
    let mut table: toml::Table = text.parse().context("parsing config file")?;
    for set in sets {
        let (key, value) = set
            .split_once('=')
            .with_context(|| format!("--set expects KEY=VALUE, got {set:?}"))?;
        let value = value.trim();
        // Accept bare strings so --set refine.mean_mode=literal works without
        // shell-quoted TOML quotes.
        let parsed: toml::Value = match format!("v = {value}").parse::<toml::Table>() {
            Ok(mut t) => t.remove("v").expect("parsed table has the inserted key"),
            Err(_) => toml::Value::String(value.to_string()),
        };
        let mut node = &mut table;
        let parts: Vec<&str> = key.trim().split('.').collect();
        for part in &parts[..parts.len() - 1] {
            node = node
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                .as_table_mut()
                .with_context(|| format!("{part} in {key} is not a table"))?;
        }
        node.insert(parts[parts.len() - 1].to_string(), parsed);
    }
    Ok(toml::to_string(&table)?)
}

fn load_cloud(path: &Path) -> Result<GaussianCloud<f32>> {
    read_gaussian_ply(path).with_context(|| format!("reading {}", path.display()))
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.config)
        .with_context(|| format!("reading {}", args.config.display()))?;
    let text = apply_overrides(&text, &args.sets)?;
    let cfg = TrainConfig::from_toml_str(&text)?;

    let init = match &args.init {
        Some(path) => load_cloud(path)?,
        None => {
            let (points, colors) = three_blob_points(2048, cfg.geometry.seed);
            let idx = farthest_point_sample(&points, 512, 0)?;
            let p: Vec<_> = idx.iter().map(|&i| points[i]).collect();
            let c: Vec<_> = idx.iter().map(|&i| colors[i]).collect();
            init_from_points(&p, ColorInit::Given(c), &InitConfig::default(), cfg.geometry.seed)?
        }
    };
    let resume = match &args.resume {
        Some(path) => Some(
            Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?,
        ),
        None => None,
    };

    log::info!(
        "training: {} geometry + {} refine iterations, {} initial gaussians",
        cfg.geometry.iterations,
        cfg.refine.iterations,
        init.len()
    );
    let result = gsgen_core::pipeline::train(&cfg, &init, resume, None)?;
    log::info!(
        "finished at iteration {} with {} gaussians",
        result.checkpoint.iteration,
        result.checkpoint.cloud.len()
    );
    if let Some(path) = &args.out_ply {
        write_gaussian_ply(path, &result.checkpoint.cloud, true)?;
        log::info!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_render(args: RenderArgs) -> Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let cfg = TurntableConfig {
        elevation_deg: args.elevation,
        radius: args.radius,
        fov_deg: args.fov,
        width: args.width,
        height: args.height,
        look_at: Vector3::zeros(),
    };
    let paths = render_turntable(&ck.cloud, &ck.background, args.frames, &cfg, &args.out)?;
    log::info!("wrote {} frames to {}", paths.len(), args.out.display());
    Ok(())
}

fn cmd_export(args: ExportArgs) -> Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    write_gaussian_ply(&args.out, &ck.cloud, !args.ascii)?;
    log::info!("wrote {} gaussians to {}", ck.cloud.len(), args.out.display());
    Ok(())
}

/// Small random scene in the double-precision path, matching the regime the
/// analytic gradients are verified in.
fn random_scene(seed: u64, max_gaussians: usize) -> (GaussianCloud<f64>, BackgroundModel<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=max_gaussians.max(1));
    let mut cloud = GaussianCloud {
        positions: Vec::new(),
        log_scales: Vec::new(),
        rotations: Vec::new(),
        color_params: Vec::new(),
        opacity_logits: Vec::new(),
        snapshot_positions: None,
    };
    for _ in 0..n {
        cloud.positions.push(Vector3::new(
            rng.random_range(-0.6..0.6),
            rng.random_range(-0.6..0.6),
            rng.random_range(-0.6..0.6),
        ));
        cloud.log_scales.push(Vector3::new(
            rng.random_range(-3.2..-1.8),
            rng.random_range(-3.2..-1.8),
            rng.random_range(-3.2..-1.8),
        ));
        cloud.rotations.push(nalgebra::Vector4::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ));
        cloud.color_params.push(Vector3::new(
            rng.random_range(-1.5..1.5),
            rng.random_range(-1.5..1.5),
            rng.random_range(-1.5..1.5),
        ));
        cloud.opacity_logits.push(rng.random_range(-1.5..1.5));
    }
    let bg = BackgroundModel::Constant(Vector3::new(
        rng.random_range(0.0..1.0),
        rng.random_range(0.0..1.0),
        rng.random_range(0.0..1.0),
    ));
    (cloud, bg)
}

fn random_camera(seed: u64, resolution: usize) -> Result<Camera<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0FFEE);
    let az = rng.random_range(0.0..std::f64::consts::TAU);
    let el = rng.random_range(-0.5..0.9f64);
    let r = rng.random_range(1.8..2.6);
    let eye = Vector3::new(r * el.cos() * az.cos(), r * el.cos() * az.sin(), r * el.sin());
    Ok(gsgen_core::camera::look_at_camera(
        eye,
        Vector3::zeros(),
        Vector3::z(),
        rng.random_range(40.0..70.0),
        resolution,
        resolution,
    )?)
}

fn cmd_check_grad(args: CheckGradArgs) -> Result<()> {
    let cfg = FdConfig { tolerance: args.tolerance, ..FdConfig::double(args.step) };
    let mut failures = 0usize;
    for s in 0..args.scenes {
        let seed = args.seed.wrapping_add(s as u64);
        let (cloud, bg) = random_scene(seed, args.max_gaussians);
        let cam = random_camera(seed, args.resolution)?;
        let loss = QuadraticLoss::color(seed);
        let report = finite_difference_check(&cloud, &cam, &bg, &loss, &cfg);
        let status = if report.passes() { "pass" } else { "FAIL" };
        println!(
            "scene {s}: n={} worst_rel={:.3e} [{status}]",
            cloud.len(),
            report.worst_rel()
        );
        if !report.passes() {
            println!("{report}");
            failures += 1;
        }
    }
    if failures > 0 {
        bail!("{failures}/{} scenes exceeded tolerance {:.1e}", args.scenes, args.tolerance);
    }
    println!("all {} scenes within {:.1e}", args.scenes, args.tolerance);
    Ok(())
}

fn cmd_fit(args: FitArgs) -> Result<()> {
    let truth = three_blob_cloud();
    let bg = BackgroundModel::Constant(Vector3::new(0.05, 0.05, 0.08));
    let view_cfg = TurntableConfig {
        width: args.resolution,
        height: args.resolution,
        ..TurntableConfig::default()
    };
    if args.views < 2 {
        bail!("--views must be at least 2");
    }
    let views: Vec<(Camera<f32>, _)> = (0..args.views)
        .map(|k| {
            let cam = turntable_camera(&view_cfg, k, args.views)?;
            let img = render(&truth, &cam, &bg, RasterOptions::production())?.color;
            Ok((cam, img))
        })
        .collect::<Result<_, gsgen_core::GsError>>()?;

    let (points, colors) = three_blob_points(args.points.max(1) * 4, args.seed);
    let idx = farthest_point_sample(&points, args.points, 0)?;
    let p: Vec<_> = idx.iter().map(|&i| points[i]).collect();
    let c: Vec<_> = idx.iter().map(|&i| colors[i]).collect();
    let init = init_from_points(
        &p,
        ColorInit::Given(c),
        &InitConfig { fixed_scale: 0.05, n_points: args.points, ..InitConfig::default() },
        args.seed,
    )?;

    let fit_cfg = FitConfig {
        iterations: args.iterations,
        densify: args.densify.then(Default::default),
        seed: args.seed,
        ..FitConfig::default()
    };
    let result = reconstruction_fit(&init, &bg, &views, &fit_cfg)?;
    let first = result.psnr_curve.first().copied().unwrap_or(f64::NAN);
    let last = result.psnr_curve.last().copied().unwrap_or(f64::NAN);
    log::info!(
        "fit: {} iterations, train psnr {:.2} -> {:.2} dB, {} gaussians, {} adaptive events",
        args.iterations,
        first,
        last,
        result.cloud.len(),
        result.events.len()
    );

    std::fs::create_dir_all(&args.out)?;
    write_gaussian_ply(args.out.join("fitted.ply"), &result.cloud, true)?;
    let held_out = turntable_camera(&view_cfg, 1, args.views * 2)?;
    let target = render(&truth, &held_out, &bg, RasterOptions::production())?.color;
    let fitted = render(&result.cloud, &held_out, &result.background, RasterOptions::production())?
        .color;
    write_png(args.out.join("held_out.png"), &fitted)?;
    log::info!("held-out psnr {:.2} dB", psnr(&fitted, &target));
    Ok(())
}
