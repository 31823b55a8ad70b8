//! `dicp`: radar landmark extraction, weighted ICP registration, gradient
//! checks, mask training, and experiment sweeps from the command line.
//!
//! Every subcommand accepts `--config <json>`; individual flags override
//! fields of the loaded (or default) configuration. Exit codes: 0 on
//! success, 2 for configuration errors, 3 for data errors, 4 for numerical
//! failures.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::{Matrix3, Vector3};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use dicp::cloud::{load_csv, save_csv, AnyCloud};
use dicp::eval::{run_experiment, summary_csv, write_report, ExperimentConfig, MaskSource};
use dicp::geometry::{Pose, Se2, Se3};
use dicp::grad::{check_gradient, DiffTarget, GradRequest, NnGradMode};
use dicp::icp::{icp_solve, DimensionMode, ErrorModel, IcpConfig, IcpResult, RobustLoss};
use dicp::mask::{load_mask_pgm, save_mask_pgm, WeightMask};
use dicp::radar::{detect, load_scan_csv, load_scan_pscn, DetectorConfig, DetectorKind, PolarScan};
use dicp::scene::{generate_scene, SceneSpec};
use dicp::trainer::{train_mask, write_trace_csv, InitDistribution, TrainConfig, TrainSample};
use dicp::{Error, Result};

#[derive(Parser)]
#[command(
    name = "dicp",
    version,
    about = "Differentiable weighted ICP registration toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Detect landmarks in a polar radar scan and save them as a pointcloud
    Extract(ExtractArgs),
    /// Register a source pointcloud onto a target pointcloud
    Icp(IcpArgs),
    /// Compare the solver's analytic gradient against finite differences
    GradCheck(GradCheckArgs),
    /// Train a weight mask on one synthetic scene
    TrainMask(TrainMaskArgs),
    /// Sweep initial-guess noise scales and write a report directory
    Eval(EvalArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Extract(args) => run_extract(args),
        Command::Icp(args) => run_icp(args),
        Command::GradCheck(args) => run_grad_check(args),
        Command::TrainMask(args) => run_train_mask(args),
        Command::Eval(args) => run_eval(args),
    }
}

/// Parses a JSON config file; malformed content is a configuration error.
fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Data(format!("serialization failed: {e}")))?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// On-disk pose representation: planar poses as angle/translation, spatial
/// poses as a row-major rotation matrix plus translation.
#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum PoseFile {
    Planar {
        angle: f64,
        x: f64,
        y: f64,
    },
    Spatial {
        rotation: [[f64; 3]; 3],
        translation: [f64; 3],
    },
}

impl PoseFile {
    fn into_pose(self) -> Result<Pose> {
        Ok(match self {
            PoseFile::Planar { angle, x, y } => Pose::Planar(Se2::new(angle, x, y)),
            PoseFile::Spatial {
                rotation: r,
                translation: t,
            } => {
                let m = Matrix3::new(
                    r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
                );
                Pose::Spatial(Se3::from_matrix(&m, Vector3::new(t[0], t[1], t[2]))?)
            }
        })
    }

    fn from_pose(pose: &Pose) -> PoseFile {
        match pose {
            Pose::Planar(p) => {
                let t = p.translation();
                PoseFile::Planar {
                    angle: p.angle(),
                    x: t[0],
                    y: t[1],
                }
            }
            Pose::Spatial(p) => {
                let m = p.rotation();
                let t = p.translation();
                PoseFile::Spatial {
                    rotation: [
                        [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
                        [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
                        [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
                    ],
                    translation: [t[0], t[1], t[2]],
                }
            }
        }
    }
}

#[derive(Args)]
struct ExtractArgs {
    /// Polar scan file: .pscn binary, or the .csv debug format
    #[arg(long)]
    scan: PathBuf,
    /// Detector config JSON
    #[arg(long)]
    config: Option<PathBuf>,
    /// Detector kind: bfar or ca_cfar
    #[arg(long)]
    detector: Option<String>,
    /// Threshold scale (a in a*Z + b)
    #[arg(long)]
    a: Option<f64>,
    /// Threshold offset (b in a*Z + b)
    #[arg(long)]
    b: Option<f64>,
    /// Training cells per side
    #[arg(long)]
    train: Option<usize>,
    /// Guard cells per side
    #[arg(long)]
    guard: Option<usize>,
    /// Ignore detections below this range bin
    #[arg(long)]
    min_range_bin: Option<usize>,
    /// Output pointcloud CSV
    #[arg(long)]
    out: PathBuf,
}

fn load_scan(path: &Path) -> Result<PolarScan> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("pscn") => load_scan_pscn(path),
        Some("csv") => load_scan_csv(path),
        _ => Err(Error::Data(format!(
            "cannot tell the scan format of {} (expected .pscn or .csv)",
            path.display()
        ))),
    }
}

fn run_extract(args: ExtractArgs) -> Result<()> {
    let scan = load_scan(&args.scan)?;
    let mut cfg: DetectorConfig = match &args.config {
        Some(path) => load_json(path)?,
        None => DetectorConfig::default(),
    };
    if let Some(kind) = &args.detector {
        cfg.kind = match kind.as_str() {
            "bfar" => DetectorKind::Bfar,
            "ca_cfar" => DetectorKind::CaCfar,
            other => {
                return Err(Error::Config(format!(
                    "unknown detector {other:?} (expected bfar or ca_cfar)"
                )))
            }
        };
    }
    if let Some(a) = args.a {
        cfg.scale_a = a;
    }
    if let Some(b) = args.b {
        cfg.offset_b = b;
    }
    if let Some(train) = args.train {
        cfg.train_cells = train;
    }
    if let Some(guard) = args.guard {
        cfg.guard_cells = guard;
    }
    if let Some(bin) = args.min_range_bin {
        cfg.min_range_bin = bin;
    }
    let cloud = detect(&scan, &cfg)?;
    let n = cloud.len();
    save_csv(&AnyCloud::Planar(cloud), &args.out)?;
    println!(
        "{n} detections from {} azimuths x {} range bins -> {}",
        scan.num_azimuths(),
        scan.num_range_bins(),
        args.out.display()
    );
    Ok(())
}

#[derive(Args)]
struct IcpArgs {
    /// Source pointcloud CSV
    #[arg(long)]
    source: PathBuf,
    /// Target pointcloud CSV
    #[arg(long)]
    target: PathBuf,
    /// Initial pose JSON (identity if omitted)
    #[arg(long)]
    init: Option<PathBuf>,
    /// Solver config JSON
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    max_iterations: Option<usize>,
    /// Use the point-to-plane error model
    #[arg(long)]
    point_to_plane: bool,
    /// Trim distance in meters
    #[arg(long)]
    trim: Option<f64>,
    /// Cauchy robust loss with this scale
    #[arg(long)]
    cauchy: Option<f64>,
    /// Smooth Huber robust loss with this scale
    #[arg(long)]
    huber: Option<f64>,
    /// Result JSON path (stdout if omitted)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize)]
struct IcpResultFile {
    pose: PoseFile,
    objective: f64,
    iterations: usize,
    converged: bool,
    regularized: bool,
    step_norms: Vec<f64>,
    objectives: Vec<f64>,
}

impl IcpResultFile {
    fn new(result: &IcpResult) -> IcpResultFile {
        IcpResultFile {
            pose: PoseFile::from_pose(&result.pose),
            objective: result.objective,
            iterations: result.iterations,
            converged: result.converged,
            regularized: result.regularized,
            step_norms: result.step_norms.clone(),
            objectives: result.objectives.clone(),
        }
    }
}

fn run_icp(args: IcpArgs) -> Result<()> {
    let source = load_csv(&args.source)?;
    let target = load_csv(&args.target)?;
    let mut cfg: IcpConfig = match &args.config {
        Some(path) => load_json(path)?,
        None => {
            let mut cfg = IcpConfig::default();
            // Full six-degree estimation is the natural default for spatial
            // clouds; a config file's explicit mode always wins.
            if matches!(source, AnyCloud::Spatial(_)) {
                cfg.dimension_mode = DimensionMode::ThreeD;
            }
            cfg
        }
    };
    if let Some(n) = args.max_iterations {
        cfg.max_iterations = n;
    }
    if args.point_to_plane {
        cfg.error_model = ErrorModel::PointToPlane;
    }
    if let Some(trim) = args.trim {
        cfg.trim_distance = Some(trim);
    }
    match (args.cauchy, args.huber) {
        (Some(_), Some(_)) => {
            return Err(Error::Config(
                "--cauchy and --huber are mutually exclusive".into(),
            ))
        }
        (Some(k), None) => cfg.robust_loss = RobustLoss::Cauchy { k },
        (None, Some(delta)) => cfg.robust_loss = RobustLoss::Huber { delta },
        (None, None) => {}
    }
    let init = match &args.init {
        Some(path) => load_json::<PoseFile>(path)?.into_pose()?,
        None => match &source {
            AnyCloud::Planar(_) => Pose::Planar(Se2::identity()),
            AnyCloud::Spatial(_) => Pose::Spatial(Se3::identity()),
        },
    };
    let result = icp_solve(&source, &target, &init, &cfg)?;
    let file = IcpResultFile::new(&result);
    match &args.out {
        Some(path) => {
            write_json(&file, path)?;
            println!(
                "{} after {} iterations (objective {:.6e}) -> {}",
                if result.converged {
                    "converged"
                } else {
                    "did not converge"
                },
                result.iterations,
                result.objective,
                path.display()
            );
        }
        None => {
            let text = serde_json::to_string_pretty(&file)
                .map_err(|e| Error::Data(format!("serialization failed: {e}")))?;
            println!("{text}");
        }
    }
    Ok(())
}

#[derive(Args)]
struct GradCheckArgs {
    /// Source pointcloud CSV (planar)
    #[arg(long)]
    source: PathBuf,
    /// Target pointcloud CSV (planar)
    #[arg(long)]
    target: PathBuf,
    /// Initial pose JSON (identity if omitted)
    #[arg(long)]
    init: Option<PathBuf>,
    /// Solver config JSON; must enable differentiable mode
    #[arg(long)]
    config: Option<PathBuf>,
    /// Gradient request JSON
    #[arg(long)]
    request: Option<PathBuf>,
    /// Differentiation target: prior_weights, source_points, or mask_pixels
    #[arg(long)]
    wrt: Option<String>,
    /// Correspondence gradient mode: locally_constant or soft
    #[arg(long)]
    nn_mode: Option<String>,
    /// Unrolled iteration count
    #[arg(long)]
    iterations: Option<usize>,
    /// Weight mask PGM (required for mask_pixels)
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Central-difference step
    #[arg(long, default_value_t = 1e-6)]
    h: f64,
    /// Fail (exit 4) when the max relative error exceeds this
    #[arg(long)]
    tol: Option<f64>,
    /// Full per-entry report JSON
    #[arg(long)]
    out: Option<PathBuf>,
}

fn planar_cloud(cloud: AnyCloud, what: &str) -> Result<dicp::cloud::Cloud2> {
    match cloud {
        AnyCloud::Planar(c) => Ok(c),
        AnyCloud::Spatial(_) => Err(Error::DimensionMismatch(format!(
            "{what} must be planar for gradient checks"
        ))),
    }
}

fn run_grad_check(args: GradCheckArgs) -> Result<()> {
    let source = planar_cloud(load_csv(&args.source)?, "source")?;
    let target = planar_cloud(load_csv(&args.target)?, "target")?;
    let cfg: IcpConfig = match &args.config {
        Some(path) => load_json(path)?,
        None => IcpConfig::training(),
    };
    let mut req: GradRequest = match &args.request {
        Some(path) => load_json(path)?,
        None => GradRequest::default(),
    };
    if let Some(wrt) = &args.wrt {
        req.wrt = match wrt.as_str() {
            "prior_weights" => DiffTarget::PriorWeights,
            "source_points" => DiffTarget::SourcePoints,
            "mask_pixels" => DiffTarget::MaskPixels,
            other => {
                return Err(Error::Config(format!(
                    "unknown differentiation target {other:?}"
                )))
            }
        };
    }
    if let Some(mode) = &args.nn_mode {
        req.nn_grad_mode = match mode.as_str() {
            "locally_constant" => NnGradMode::LocallyConstant,
            "soft" => NnGradMode::Soft,
            other => {
                return Err(Error::Config(format!(
                    "unknown correspondence gradient mode {other:?}"
                )))
            }
        };
    }
    if let Some(n) = args.iterations {
        req.unroll_iterations = n;
    }
    let mask: Option<WeightMask> = match &args.mask {
        Some(path) => Some(load_mask_pgm(path)?),
        None => None,
    };
    if req.wrt == DiffTarget::MaskPixels && mask.is_none() {
        return Err(Error::Config(
            "differentiating mask_pixels needs --mask <pgm>".into(),
        ));
    }
    let init = match &args.init {
        Some(path) => match load_json::<PoseFile>(path)?.into_pose()? {
            Pose::Planar(p) => p,
            Pose::Spatial(_) => {
                return Err(Error::DimensionMismatch(
                    "gradient checks take a planar initial pose".into(),
                ))
            }
        },
        None => Se2::identity(),
    };
    let report = check_gradient(&source, &target, &init, &cfg, &req, mask.as_ref(), args.h)?;
    println!(
        "max relative error {:.3e} (mean {:.3e}) over {} entries, loss {:.6e}",
        report.max_relative_error,
        report.mean_relative_error,
        report.entries.len(),
        report.loss_value
    );
    if let Some(path) = &args.out {
        write_json(&report, path)?;
    }
    if let Some(tol) = args.tol {
        if !report.max_relative_error.is_finite() || report.max_relative_error > tol {
            return Err(Error::Numerical(format!(
                "gradient check failed: max relative error {:.3e} exceeds {tol:.3e}",
                report.max_relative_error
            )));
        }
    }
    Ok(())
}

#[derive(Args)]
struct TrainMaskArgs {
    /// Scene spec JSON
    #[arg(long)]
    scene: PathBuf,
    /// Training config JSON
    #[arg(long)]
    config: Option<PathBuf>,
    /// RNG seed (always overrides the config)
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    mask_width: Option<usize>,
    #[arg(long)]
    pixel_size: Option<f64>,
    /// Rotation augmentation: true or false
    #[arg(long)]
    augment: Option<bool>,
    /// Run the detector on the rendered scan instead of taking the
    /// generated points directly
    #[arg(long)]
    extracted: bool,
    /// Detector config JSON, used with --extracted
    #[arg(long)]
    detector_config: Option<PathBuf>,
    /// Output mask path (.pgm plus a .json geometry sidecar)
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch loss trace CSV
    #[arg(long)]
    trace: Option<PathBuf>,
}

fn run_train_mask(args: TrainMaskArgs) -> Result<()> {
    let spec: SceneSpec = load_json(&args.scene)?;
    let scene = generate_scene(&spec)?;
    let sample = if args.extracted {
        let detector: DetectorConfig = match &args.detector_config {
            Some(path) => load_json(path)?,
            None => DetectorConfig::default(),
        };
        TrainSample::from_scene(&scene, &detector)?
    } else {
        TrainSample {
            scan: scene.scan.clone(),
            source: scene.scan_source.clone(),
            map: scene.map.clone(),
            ground_truth: scene.ground_truth,
        }
    };
    let mut cfg: TrainConfig = match &args.config {
        Some(path) => load_json(path)?,
        None => TrainConfig::default(),
    };
    cfg.seed = args.seed;
    if let Some(epochs) = args.epochs {
        cfg.epochs = epochs;
    }
    if let Some(lr) = args.learning_rate {
        cfg.learning_rate = lr;
    }
    if let Some(width) = args.mask_width {
        cfg.mask_width = width;
    }
    if let Some(ps) = args.pixel_size {
        cfg.mask_pixel_size = ps;
    }
    if let Some(augment) = args.augment {
        cfg.augment_rotation = augment;
    }
    let outcome = train_mask(&sample, &cfg)?;
    save_mask_pgm(&outcome.mask, &args.out)?;
    if let Some(path) = &args.trace {
        write_trace_csv(&outcome.trace, path)?;
    }
    let skipped = outcome.trace.iter().filter(|r| r.skipped).count();
    let last = outcome.trace.last().expect("epochs >= 1 was validated");
    if outcome.all_skipped {
        eprintln!(
            "warning: every epoch was skipped by the good-sample filter; \
             the mask is unchanged from initialization"
        );
    }
    println!(
        "trained {} epochs ({skipped} skipped), final loss {:.6e} \
         (pose {:.6e} + mask {:.6e}) -> {}",
        outcome.trace.len(),
        last.total,
        last.l_icp,
        last.l_bce,
        args.out.display()
    );
    Ok(())
}

#[derive(Args)]
struct EvalArgs {
    /// Experiment config JSON
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scene spec list JSON (replaces the config's scenes)
    #[arg(long)]
    scenes: Option<PathBuf>,
    /// Comma-separated noise scales, e.g. 0,1,2,3,4
    #[arg(long)]
    sigmas: Option<String>,
    /// Initial guesses per scene per scale
    #[arg(long)]
    trials: Option<usize>,
    /// Mask source: none, trained, or a mask file path
    #[arg(long)]
    mask: Option<String>,
    /// Initial-guess distribution: uniform or normal
    #[arg(long)]
    dist: Option<String>,
    /// RNG seed (always overrides the config)
    #[arg(long)]
    seed: u64,
    /// Report directory (created if missing)
    #[arg(long)]
    out: PathBuf,
    /// Also save per-scene masks into the report directory
    #[arg(long)]
    save_masks: bool,
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let mut cfg: ExperimentConfig = match &args.config {
        Some(path) => load_json(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(path) = &args.scenes {
        cfg.scenes = load_json(path)?;
    }
    if let Some(sigmas) = &args.sigmas {
        cfg.sigmas = sigmas
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Config(format!("bad noise scale {s:?}")))
            })
            .collect::<Result<_>>()?;
    }
    if let Some(trials) = args.trials {
        cfg.trials = trials;
    }
    if let Some(mask) = &args.mask {
        cfg.mask_source = mask.parse::<MaskSource>()?;
    }
    if let Some(dist) = &args.dist {
        cfg.init_distribution = dist.parse::<InitDistribution>()?;
    }
    cfg.seed = args.seed;
    let report = run_experiment(&cfg)?;
    write_report(&report, &args.out)?;
    if args.save_masks {
        for (i, mask) in report.masks.iter().enumerate() {
            save_mask_pgm(mask, &args.out.join(format!("mask_{i:03}.pgm")))?;
        }
    }
    print!("{}", summary_csv(&report.summary));
    println!("report -> {}", args.out.display());
    Ok(())
}
