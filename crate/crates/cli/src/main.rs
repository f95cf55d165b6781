//! Command-line front end for the registration toolkit.
//!
//! Subcommands cover the whole workflow: `generate` procedural datasets,
//! `pretrain` the feature extractor, `train` the full network, `register`
//! one pair, `benchmark` methods over a dataset, and `export` colored PLY
//! visualizations. Every randomized command takes `--seed` (default 42,
//! printed) and is bit-reproducible: same invocation, same bytes out.
//!
//! Exit codes: 0 success, 2 parse/config errors, 3 degenerate geometry,
//! 4 checkpoint mismatches, 1 anything else.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use pointalign::baseline::IcpConfig;
use pointalign::data::{
    cube_surface, derive_rng, make_pair, read_kitti_bin, read_off, registration_ply,
    sphere_surface, synthetic_scan, torus_surface, write_off, write_ply, PlyPoint, Protocol,
    ProtocolConfig, RegistrationPair, COLOR_SOURCE, COLOR_TARGET, COLOR_VIRTUAL,
};
use pointalign::features::FeatureNetParams;
use pointalign::geometry::{rotation_to_euler, PointCloud, RigidTransform};
use pointalign::losses::{DEFAULT_ALPHA, DEFAULT_BETA, DEFAULT_GAMMA, DEFAULT_L1_WEIGHT, DEFAULT_MARGIN};
use pointalign::pipeline::{
    benchmark, BenchmarkConfig, Method, NetConfig, RegisterOptions, RegistrationNet, TrainConfig,
};
use pointalign::pretrain::{
    load_feature_params, pretrain, save_feature_params, triplet_satisfaction, PretrainConfig,
};
use pointalign::Error;

#[derive(Parser)]
#[command(
    name = "pointalign",
    version,
    about = "Rigid point cloud registration: learned correspondences plus classical baselines"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a procedural point cloud dataset and its manifest.
    Generate(GenerateArgs),
    /// Pre-train the feature extractor with a triplet objective.
    Pretrain(PretrainArgs),
    /// Train the full registration network.
    Train(TrainArgs),
    /// Register one source/target pair with a trained network.
    Register(RegisterArgs),
    /// Compare registration methods over a dataset.
    Benchmark(BenchmarkArgs),
    /// Export colored PLY files for one registered pair.
    Export(ExportArgs),
}

/// Shape family for `generate`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Shape {
    Sphere,
    Cube,
    Torus,
    Scan,
    /// Cycle sphere, cube, torus.
    Mixed,
}

/// Network size preset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Arch {
    /// Full-scale widths for 1024-point clouds.
    Full,
    /// Narrow widths for desk-scale runs and tests.
    Toy,
}

impl Arch {
    fn net_config(self) -> NetConfig {
        match self {
            Arch::Full => NetConfig::default(),
            Arch::Toy => NetConfig::toy(),
        }
    }
}

#[derive(Args)]
struct GenerateArgs {
    /// Output directory for the .off files and manifest.txt.
    #[arg(long)]
    out: PathBuf,
    /// Number of clouds.
    #[arg(long, default_value_t = 8)]
    count: usize,
    /// Points per cloud.
    #[arg(long, default_value_t = 2048)]
    points: usize,
    #[arg(long, value_enum, default_value_t = Shape::Mixed)]
    shape: Shape,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Args)]
struct PretrainArgs {
    /// Manifest listing the training clouds.
    #[arg(long)]
    manifest: PathBuf,
    /// Where to write the feature checkpoint.
    #[arg(long, default_value = "features.ckpt")]
    out: PathBuf,
    /// Optional CSV loss log (epoch, mean_loss).
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Arch::Full)]
    arch: Arch,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 0.01)]
    learning_rate: f64,
    #[arg(long, default_value_t = DEFAULT_MARGIN)]
    margin: f64,
    #[arg(long, default_value_t = DEFAULT_L1_WEIGHT)]
    l1_weight: f64,
    /// Anchors sampled per cloud per epoch.
    #[arg(long, default_value_t = 16)]
    anchors: usize,
    /// Euclidean-farthest negative pool size per anchor.
    #[arg(long, default_value_t = 8)]
    pool: usize,
    /// Cap per-axis rotations at this many degrees.
    #[arg(long)]
    rotation_cap: Option<f64>,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Manifest listing the training clouds; one pair is built per cloud.
    #[arg(long)]
    manifest: PathBuf,
    /// Where to write the network checkpoint.
    #[arg(long, default_value = "net.ckpt")]
    out: PathBuf,
    /// Optional CSV loss log.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Pair protocol: whole, noisy, partial or scan.
    #[arg(long, default_value = "whole")]
    protocol: String,
    /// Cap per-axis rotations at this many degrees (object protocols only).
    #[arg(long)]
    rotation_cap: Option<f64>,
    #[arg(long, value_enum, default_value_t = Arch::Full)]
    arch: Arch,
    /// Initialize the extractor from a pre-trained feature checkpoint.
    #[arg(long)]
    warm_start: Option<PathBuf>,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 0.01)]
    learning_rate: f64,
    /// Correspondence loss weight.
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    alpha: f64,
    /// Parameter L2 penalty weight.
    #[arg(long, default_value_t = DEFAULT_BETA)]
    beta: f64,
    /// Weight on wrongly-labeled virtual points inside the loss.
    #[arg(long, default_value_t = DEFAULT_GAMMA)]
    gamma: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Args)]
struct RegisterArgs {
    /// Source cloud (.off or .bin).
    #[arg(long)]
    source: PathBuf,
    /// Target cloud (.off or .bin).
    #[arg(long)]
    target: PathBuf,
    /// Trained network checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Apply-and-rerun rounds; the printed transform is the composition.
    #[arg(long, default_value_t = 1)]
    iterations: usize,
    /// Refine the network estimate with the ICP baseline.
    #[arg(long)]
    icp_refine: bool,
    #[arg(long, default_value_t = 10)]
    icp_iterations: usize,
    /// ICP correspondence distance gate.
    #[arg(long)]
    gate: Option<f64>,
    /// Drop keypoints whose attention mask weight is below threshold/N.
    #[arg(long)]
    prune: Option<f64>,
}

#[derive(Args)]
struct BenchmarkArgs {
    /// Manifest listing the base clouds; one pair is built per cloud.
    #[arg(long)]
    manifest: PathBuf,
    /// Pair protocol: whole, noisy, partial or scan.
    #[arg(long, default_value = "whole")]
    protocol: String,
    /// Cap per-axis rotations at this many degrees (object protocols only).
    #[arg(long)]
    rotation_cap: Option<f64>,
    /// Comma-separated methods: icp, net, net-icp, net-iter.
    #[arg(long, default_value = "icp")]
    methods: String,
    /// Network checkpoint (required by net methods).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Rounds for the net-iter method.
    #[arg(long, default_value_t = 4)]
    net_iterations: usize,
    #[arg(long, default_value_t = 10)]
    icp_iterations: usize,
    /// ICP correspondence distance gate.
    #[arg(long)]
    gate: Option<f64>,
    /// Mask pruning threshold for network methods.
    #[arg(long)]
    prune: Option<f64>,
    /// Optional CSV output with one row per method.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Args)]
struct ExportArgs {
    /// Source cloud (.off or .bin).
    #[arg(long)]
    source: PathBuf,
    /// Target cloud (.off or .bin).
    #[arg(long)]
    target: PathBuf,
    /// Trained network checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 1)]
    iterations: usize,
    /// Drop keypoints whose attention mask weight is below threshold/N.
    #[arg(long)]
    prune: Option<f64>,
    /// Output directory for the PLY files.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(args) => cmd_generate(args),
        Command::Pretrain(args) => cmd_pretrain(args),
        Command::Train(args) => cmd_train(args),
        Command::Register(args) => cmd_register(args),
        Command::Benchmark(args) => cmd_benchmark(args),
        Command::Export(args) => cmd_export(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Documented process exit codes, recovered from the error chain.
fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<Error>() {
            return match err {
                Error::Parse { .. } | Error::Config(_) => 2,
                Error::DegenerateGeometry(_) => 3,
                Error::Checkpoint(_) => 4,
                _ => 1,
            };
        }
    }
    1
}

/// Reads a cloud by extension: `.off` or `.bin`.
fn read_cloud(path: &Path) -> anyhow::Result<PointCloud> {
    let cloud = match path.extension().and_then(|e| e.to_str()) {
        Some("off") => read_off(path),
        Some("bin") => read_kitti_bin(path),
        _ => Err(Error::Config(format!(
            "unsupported cloud extension in {:?} (expected .off or .bin)",
            path
        ))),
    };
    cloud.with_context(|| format!("reading cloud {path:?}"))
}

/// Reads a manifest: one cloud path per line, `#` comments, blanks ignored;
/// relative paths resolve against the manifest's directory.
fn read_manifest(path: &Path) -> anyhow::Result<Vec<PointCloud>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading manifest {path:?}"))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut clouds = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let entry = PathBuf::from(line);
        let full = if entry.is_absolute() { entry } else { base.join(entry) };
        clouds.push(read_cloud(&full)?);
    }
    if clouds.is_empty() {
        bail!(Error::Config(format!("manifest {path:?} lists no clouds")));
    }
    Ok(clouds)
}

/// Pair-construction RNG streams live in their own namespace so they never
/// collide with training-internal streams under the same seed.
const PAIR_STREAM_BASE: u64 = 0x7061_6972; // "pair"

fn build_pairs(
    clouds: &[PointCloud],
    protocol: Protocol,
    rotation_cap: Option<f64>,
    seed: u64,
) -> anyhow::Result<Vec<RegistrationPair>> {
    let cfg = ProtocolConfig {
        rotation_cap_deg: rotation_cap,
        ..ProtocolConfig::new(protocol)
    };
    clouds
        .iter()
        .enumerate()
        .map(|(i, cloud)| {
            make_pair(cloud, &cfg, &mut derive_rng(seed, PAIR_STREAM_BASE + i as u64))
                .with_context(|| format!("building {} pair {i}", protocol.name()))
        })
        .collect()
}

fn protocol_config(protocol: Protocol, rotation_cap: Option<f64>) -> ProtocolConfig {
    ProtocolConfig {
        rotation_cap_deg: rotation_cap,
        ..ProtocolConfig::new(protocol)
    }
}

fn cmd_generate(args: GenerateArgs) -> anyhow::Result<()> {
    if args.count == 0 {
        bail!(Error::Config("generate needs --count of at least 1".into()));
    }
    println!("seed: {}", args.seed);
    fs::create_dir_all(&args.out).with_context(|| format!("creating {:?}", args.out))?;

    let mut manifest = String::new();
    for i in 0..args.count {
        let mut rng = derive_rng(args.seed, i as u64 + 1);
        let shape = match args.shape {
            Shape::Mixed => [Shape::Sphere, Shape::Cube, Shape::Torus][i % 3],
            s => s,
        };
        let (name, cloud) = match shape {
            Shape::Sphere => ("sphere", sphere_surface(args.points, 1.0, &mut rng)?),
            Shape::Cube => ("cube", cube_surface(args.points, 1.0, &mut rng)?),
            Shape::Torus => ("torus", torus_surface(args.points, 1.0, 0.4, &mut rng)?),
            Shape::Scan => (
                "scan",
                synthetic_scan(args.points / 2, args.points - args.points / 2, 20.0, &mut rng)?,
            ),
            Shape::Mixed => unreachable!("mixed resolves to a concrete shape"),
        };
        let file = format!("{name}_{i:03}.off");
        let path = args.out.join(&file);
        write_off(&path, &cloud)?;
        println!("wrote {} ({} points)", path.display(), cloud.len());
        manifest.push_str(&file);
        manifest.push('\n');
    }
    let manifest_path = args.out.join("manifest.txt");
    fs::write(&manifest_path, manifest)
        .with_context(|| format!("writing {manifest_path:?}"))?;
    println!("wrote {} ({} entries)", manifest_path.display(), args.count);
    Ok(())
}

fn cmd_pretrain(args: PretrainArgs) -> anyhow::Result<()> {
    println!("seed: {}", args.seed);
    let clouds = read_manifest(&args.manifest)?;
    let ranges = match args.rotation_cap {
        Some(cap) => pointalign::data::TransformRanges::object_capped(cap),
        None => pointalign::data::TransformRanges::object(),
    };
    let cfg = PretrainConfig {
        epochs: args.epochs,
        learning_rate: args.learning_rate,
        margin: args.margin,
        l1_weight: args.l1_weight,
        anchors_per_cloud: args.anchors,
        negative_pool: args.pool,
        ranges,
        seed: args.seed,
    };
    let feature_config = args.arch.net_config().feature;
    let mut params = FeatureNetParams::init(feature_config, &mut derive_rng(args.seed, 0))?;

    let outcome = pretrain(&mut params, &clouds, &cfg)?;
    for r in &outcome.records {
        println!("epoch {}: loss {:.6}", r.epoch, r.mean_loss);
    }
    if let Some(log) = &args.log {
        let mut csv = String::from("epoch,mean_loss\n");
        for r in &outcome.records {
            csv.push_str(&format!("{},{}\n", r.epoch, r.mean_loss));
        }
        fs::write(log, csv).with_context(|| format!("writing {log:?}"))?;
        println!("wrote {}", log.display());
    }
    save_feature_params(&args.out, &params)?;
    println!("wrote {}", args.out.display());
    if let Some(reason) = outcome.aborted {
        bail!("pre-training aborted ({reason}); the checkpoint holds the last good parameters");
    }
    let satisfaction = triplet_satisfaction(&params, &clouds, &cfg)?;
    println!("triplet satisfaction: {satisfaction:.4}");
    Ok(())
}

fn cmd_train(args: TrainArgs) -> anyhow::Result<()> {
    println!("seed: {}", args.seed);
    let clouds = read_manifest(&args.manifest)?;
    let mut net = RegistrationNet::init(args.arch.net_config(), args.seed)?;
    if let Some(warm) = &args.warm_start {
        let features = load_feature_params(warm)
            .with_context(|| format!("loading feature checkpoint {warm:?}"))?;
        net.warm_start_features(features)?;
        println!("warm start: {}", warm.display());
    }
    if args.epochs == 0 {
        net.save(&args.out)?;
        println!("0 epochs: checkpoint equals initialization");
        println!("wrote {}", args.out.display());
        return Ok(());
    }

    let protocol = Protocol::parse(&args.protocol)?;
    let pairs = build_pairs(&clouds, protocol, args.rotation_cap, args.seed)?;
    let cfg = TrainConfig {
        epochs: args.epochs,
        learning_rate: args.learning_rate,
        gamma: args.gamma,
        alpha: args.alpha,
        beta: args.beta,
        seed: args.seed,
    };
    let outcome = net.train(&pairs, &cfg)?;
    for r in &outcome.records {
        match r.mean_transform_error {
            Some(te) => println!(
                "epoch {}: loss {:.6} correspondence {:.6} transform {:.6}",
                r.epoch, r.mean_loss, r.mean_correspondence, te
            ),
            None => println!(
                "epoch {}: loss {:.6} correspondence {:.6}",
                r.epoch, r.mean_loss, r.mean_correspondence
            ),
        }
    }
    if let Some(log) = &args.log {
        let mut csv = String::from("epoch,mean_loss,mean_correspondence,mean_transform_error\n");
        for r in &outcome.records {
            let te = r.mean_transform_error.map(|v| v.to_string()).unwrap_or_default();
            csv.push_str(&format!("{},{},{},{te}\n", r.epoch, r.mean_loss, r.mean_correspondence));
        }
        fs::write(log, csv).with_context(|| format!("writing {log:?}"))?;
        println!("wrote {}", log.display());
    }
    net.save(&args.out)?;
    println!("wrote {}", args.out.display());
    if let Some(reason) = outcome.aborted {
        bail!("training aborted ({reason}); the checkpoint holds the last good parameters");
    }
    Ok(())
}

fn print_transform(t: &RigidTransform) {
    for row in 0..3 {
        println!(
            "rotation  [{:+.9} {:+.9} {:+.9}]",
            t.rotation[(row, 0)],
            t.rotation[(row, 1)],
            t.rotation[(row, 2)]
        );
    }
    println!(
        "translation [{:+.9} {:+.9} {:+.9}]",
        t.translation[0], t.translation[1], t.translation[2]
    );
    let (euler, gimbal) = rotation_to_euler(&t.rotation);
    let lock = if gimbal { " (gimbal lock)" } else { "" };
    println!(
        "euler z/y/x (deg): {:+.9} {:+.9} {:+.9}{lock}",
        euler.z_deg, euler.y_deg, euler.x_deg
    );
    println!("rotation angle (deg): {:.9}", t.rotation_angle_deg());
    println!("translation norm: {:.9}", t.translation_norm());
}

fn cmd_register(args: RegisterArgs) -> anyhow::Result<()> {
    let source = read_cloud(&args.source)?;
    let target = read_cloud(&args.target)?;
    let net = RegistrationNet::load(&args.checkpoint)
        .with_context(|| format!("loading checkpoint {:?}", args.checkpoint))?;
    let options = RegisterOptions {
        iterations: args.iterations,
        mask_prune_threshold: args.prune,
    };
    let out = net.register_with(&source, &target, &options)?;
    let mut estimate = out.estimate;
    if args.icp_refine {
        let icp_cfg = IcpConfig {
            max_iterations: args.icp_iterations,
            max_correspondence_distance: args.gate,
            initial: Some(estimate),
            ..IcpConfig::default()
        };
        estimate = pointalign::baseline::icp(&source, &target, &icp_cfg)?.transform;
        println!("method: net x{} + icp x{}", args.iterations, args.icp_iterations);
    } else {
        println!("method: net x{}", args.iterations);
    }
    println!("keypoints: {}", out.correspondences.keypoints.len());
    print_transform(&estimate);
    Ok(())
}

fn cmd_benchmark(args: BenchmarkArgs) -> anyhow::Result<()> {
    println!("seed: {}", args.seed);
    let methods: Vec<Method> = args
        .methods
        .split(',')
        .map(|name| Method::parse(name.trim(), args.net_iterations))
        .collect::<Result<_, _>>()?;
    if methods.is_empty() {
        bail!(Error::Config("no methods requested".into()));
    }
    let net = match &args.checkpoint {
        Some(path) => Some(
            RegistrationNet::load(path).with_context(|| format!("loading checkpoint {path:?}"))?,
        ),
        None => None,
    };
    let protocol = Protocol::parse(&args.protocol)?;
    let clouds = read_manifest(&args.manifest)?;
    let pairs = build_pairs(&clouds, protocol, args.rotation_cap, args.seed)?;
    println!(
        "protocol: {} ({} pairs, {} points max)",
        protocol.name(),
        pairs.len(),
        protocol_config(protocol, args.rotation_cap).sample_size
    );

    let header = format!(
        "{:<10} {:>5} {:>5} {:>12} {:>12} {:>12} {:>12} {:>12} {:>12}",
        "method", "pairs", "fail", "rot_rmse", "rot_mae", "rot_mse", "trans_rmse", "trans_mae",
        "trans_mse"
    );
    println!("{header}");
    let mut csv = String::from(
        "method,pairs,failures,rot_rmse,rot_mae,rot_mse,trans_rmse,trans_mae,trans_mse\n",
    );
    for method in methods {
        let cfg = BenchmarkConfig {
            method,
            icp: IcpConfig {
                max_iterations: args.icp_iterations,
                max_correspondence_distance: args.gate,
                ..IcpConfig::default()
            },
            prune_threshold: args.prune,
        };
        let summary = benchmark(net.as_ref(), &pairs, &cfg)
            .with_context(|| format!("running method {:?}", method.name()))?;
        for (index, reason) in &summary.failures {
            eprintln!("warning: {} failed on pair {index}: {reason}", method.name());
        }
        let m = &summary.metrics;
        println!(
            "{:<10} {:>5} {:>5} {:>12.6} {:>12.6} {:>12.6} {:>12.6} {:>12.6} {:>12.6}",
            method.name(),
            summary.outcomes.len(),
            summary.failures.len(),
            m.rot_rmse,
            m.rot_mae,
            m.rot_mse,
            m.trans_rmse,
            m.trans_mae,
            m.trans_mse
        );
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            method.name(),
            summary.outcomes.len(),
            summary.failures.len(),
            m.rot_rmse,
            m.rot_mae,
            m.rot_mse,
            m.trans_rmse,
            m.trans_mae,
            m.trans_mse
        ));
    }
    if let Some(path) = &args.csv {
        fs::write(path, csv).with_context(|| format!("writing {path:?}"))?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_export(args: ExportArgs) -> anyhow::Result<()> {
    let source = read_cloud(&args.source)?;
    let target = read_cloud(&args.target)?;
    let net = RegistrationNet::load(&args.checkpoint)
        .with_context(|| format!("loading checkpoint {:?}", args.checkpoint))?;
    let options = RegisterOptions {
        iterations: args.iterations,
        mask_prune_threshold: args.prune,
    };
    let out = net.register_with(&source, &target, &options)?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {:?}", args.out))?;

    let tinted = |cloud: &PointCloud, color: [u8; 3]| -> Vec<PlyPoint> {
        cloud
            .points()
            .iter()
            .map(|&position| PlyPoint { position, color })
            .collect()
    };
    let virtual_points: Vec<PlyPoint> = out
        .correspondences
        .virtuals
        .iter()
        .map(|&position| PlyPoint { position, color: COLOR_VIRTUAL })
        .collect();
    let files = [
        ("source.ply", tinted(&source, COLOR_SOURCE)),
        ("target.ply", tinted(&target, COLOR_TARGET)),
        ("virtuals.ply", virtual_points),
        ("aligned.ply", tinted(&out.estimate.apply_cloud(&source), COLOR_SOURCE)),
        (
            "overlay.ply",
            registration_ply(&source, &target, &out.correspondences.virtuals, Some(&out.estimate)),
        ),
    ];
    for (name, points) in &files {
        let path = args.out.join(name);
        write_ply(&path, points)?;
        println!("wrote {} ({} vertices)", path.display(), points.len());
    }
    println!("keypoints: {}", out.correspondences.keypoints.len());
    print_transform(&out.estimate);
    Ok(())
}
