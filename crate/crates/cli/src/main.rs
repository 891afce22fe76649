//! `milliseg`: run the milli-annotation pipeline, or any single stage of it.
//!
//! Stages read and write a run directory (`--out-dir`), so
//! `milliseg prune && milliseg select && ...` and `milliseg pipeline` leave
//! the same artifacts behind.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 stage failure.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use milliseg_annoserve::{QueueOrder, ServerConfig};
use milliseg_core::clustering::FeatureSource;
use milliseg_core::pipeline::{
    run_pipeline, run_stage, AnnotationMode, PipelineConfig, PipelineError, RunLayout, Stage,
};
use milliseg_core::synthetic::{gen_synthetic, gen_synthetic_split, Layout, SyntheticSpec};
use milliseg_core::{Error, ErrorClass};

#[derive(Debug, Parser)]
#[command(name = "milliseg", version, about = "Milli-annotation pipeline for lidar semantic segmentation")]
struct Cli {
    /// Seed for every randomized step.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Run directory (dataset directory for gen-synthetic).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Log filter, e.g. `info` or `milliseg_core=debug`.
    #[arg(long, global = true, default_value = "warn")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Drop near-duplicate frames of each sequence.
    Prune(StageArgs),
    /// Pick the most diverse kept frames.
    Select(StageArgs),
    /// Over-segment each selected frame into one cluster per click.
    Cluster(StageArgs),
    /// Label cluster centers (oracle or server sessions) and propagate.
    Annotate(StageArgs),
    /// Two-stage training on the pseudo-labels.
    Train(StageArgs),
    /// Score the trained models.
    Eval(StageArgs),
    /// Every stage, skipping those already complete; prints the run report.
    Pipeline(StageArgs),
    /// Write a Gaussian-mixture or moons dataset.
    GenSynthetic(GenArgs),
    /// Serve annotation sessions over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Oracle,
    Serve,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SourceArg {
    Features,
    Coords,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum LayoutArg {
    Gaussian,
    Moons,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum OrderArg {
    Cluster,
    Spatial,
}

/// Pipeline settings. Flags override the config file; without a config,
/// `--manifest` is required and the budget defaults to `--alpha 0.01`.
#[derive(Debug, Args)]
struct StageArgs {
    /// Pipeline config (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Frames for the eval stage (default: the training manifest).
    #[arg(long)]
    validation_manifest: Option<PathBuf>,
    /// Pruning threshold on cosine similarity.
    #[arg(long, allow_negative_numbers = true)]
    tau: Option<f64>,
    /// Must match the manifest.
    #[arg(long)]
    num_classes: Option<usize>,
    /// Fraction of points clicked per selected frame.
    #[arg(long, conflicts_with = "clicks")]
    alpha: Option<f64>,
    /// Total clicks over the selected frames.
    #[arg(long)]
    clicks: Option<u64>,
    /// Number of frames to select.
    #[arg(long)]
    budget_frames: Option<usize>,
    /// Minimum clicks per frame, in multiples of the class count.
    #[arg(long)]
    min_factor: Option<usize>,
    #[arg(long, value_enum)]
    feature_source: Option<SourceArg>,
    #[arg(long, value_enum)]
    annotation: Option<ModeArg>,
    /// Probability that the oracle answers a wrong class.
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    stage1_epochs: Option<usize>,
    #[arg(long)]
    stage2_epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Debug, Args)]
struct GenArgs {
    #[arg(long, value_enum, default_value = "gaussian")]
    layout: LayoutArg,
    #[arg(long, default_value_t = 8)]
    classes: usize,
    #[arg(long, default_value_t = 10_000)]
    points_per_frame: usize,
    /// Frames per sequence.
    #[arg(long, default_value_t = 20)]
    frames: usize,
    #[arg(long, default_value_t = 1)]
    sequences: usize,
    #[arg(long, default_value_t = 64)]
    feature_dim: usize,
    /// Distance between class means, in units of sigma.
    #[arg(long, default_value_t = 4.0)]
    separation: f64,
    /// Within-class RMS radius.
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    /// Per-frame random-walk step of the features, in units of sigma.
    #[arg(long, default_value_t = 0.1)]
    drift: f64,
    /// Shared feature offset, in units of sigma.
    #[arg(long, default_value_t = 4.0)]
    offset: f64,
    /// Every frame of a sequence repeats its first frame.
    #[arg(long)]
    duplicate_frames: bool,
    /// Extra frames per sequence written to `<out-dir>/validation`.
    #[arg(long, default_value_t = 0)]
    validation_frames: usize,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: SocketAddr,
    /// Context radius around the clicked point, in meters.
    #[arg(long, default_value_t = 2.0)]
    radius: f32,
    #[arg(long, default_value_t = milliseg_annoserve::MAX_CONTEXT_POINTS)]
    max_context: usize,
    #[arg(long, value_enum, default_value = "cluster")]
    order: OrderArg,
}

fn config_error(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn build_config(cli: &Cli, a: &StageArgs) -> Result<PipelineConfig, Error> {
    let mut cfg = match &a.config {
        Some(path) => PipelineConfig::load(path)?,
        None => {
            let manifest = a
                .manifest
                .clone()
                .ok_or_else(|| config_error("either --config or --manifest is required"))?;
            let out = cli
                .out_dir
                .clone()
                .ok_or_else(|| config_error("either --config or --out-dir is required"))?;
            PipelineConfig::new(manifest, out, 0.01)
        }
    };
    if let Some(m) = &a.manifest {
        cfg.manifest = m.clone();
    }
    if let Some(v) = &a.validation_manifest {
        cfg.validation_manifest = Some(v.clone());
    }
    if let Some(d) = &cli.out_dir {
        cfg.out_dir = d.clone();
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(t) = a.tau {
        cfg.tau = t;
    }
    if a.num_classes.is_some() {
        cfg.num_classes = a.num_classes;
    }
    if let Some(alpha) = a.alpha {
        cfg.alpha = Some(alpha);
        cfg.clicks = None;
    }
    if let Some(n) = a.clicks {
        cfg.clicks = Some(n);
        cfg.alpha = None;
    }
    if a.budget_frames.is_some() {
        cfg.budget_frames = a.budget_frames;
    }
    if let Some(f) = a.min_factor {
        cfg.min_factor = f;
    }
    if let Some(s) = a.feature_source {
        cfg.feature_source = match s {
            SourceArg::Features => FeatureSource::Features,
            SourceArg::Coords => FeatureSource::Coords,
        };
    }
    if let Some(m) = a.annotation {
        cfg.annotation = match m {
            ModeArg::Oracle => AnnotationMode::Oracle,
            ModeArg::Serve => AnnotationMode::Serve,
        };
    }
    if let Some(n) = a.noise {
        cfg.noise = n;
    }
    if let Some(e) = a.stage1_epochs {
        cfg.semisup.stage1_epochs = e;
    }
    if let Some(e) = a.stage2_epochs {
        cfg.semisup.stage2_epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.semisup.lr = lr;
    }
    Ok(cfg)
}

#[derive(Debug)]
enum Failure {
    Plain(Error),
    Stage(PipelineError),
}

impl Failure {
    fn exit_code(&self) -> u8 {
        let class = match self {
            Failure::Plain(e) => e.class(),
            Failure::Stage(e) => e.source.class(),
        };
        match class {
            ErrorClass::Config => 2,
            ErrorClass::Data => 3,
            ErrorClass::Stage => 4,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Plain(e) => write!(f, "{e}"),
            Failure::Stage(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Plain(e)
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        Failure::Stage(e)
    }
}

fn read_artifact(path: PathBuf) -> Result<String, Error> {
    std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))
}

fn one_stage(cli: &Cli, a: &StageArgs, stage: Stage) -> Result<(), Failure> {
    let cfg = build_config(cli, a)?;
    let seconds = run_stage(&cfg, stage)?;
    let layout = cfg.layout();
    match stage {
        Stage::Prune => {
            let kept = read_artifact(layout.kept())?.lines().count();
            println!("kept {kept} frames ({seconds:.2} s) -> {}", layout.kept().display());
        }
        Stage::Select => {
            print!("{}", read_artifact(layout.selection())?);
        }
        Stage::Cluster => {
            println!("clusterings written to {} ({seconds:.2} s)", layout.clusters_dir().display());
        }
        Stage::Annotate => print!("{}", read_artifact(layout.annotation_report())?),
        Stage::Train => println!(
            "models written to {} and {} ({seconds:.2} s)",
            layout.stage1_model().display(),
            layout.model().display()
        ),
        Stage::Eval => print!("{}", read_artifact(layout.eval())?),
    }
    Ok(())
}

fn gen(cli: &Cli, a: &GenArgs) -> Result<(), Failure> {
    let dir = cli
        .out_dir
        .clone()
        .ok_or_else(|| config_error("gen-synthetic needs --out-dir"))?;
    let spec = SyntheticSpec {
        layout: match a.layout {
            LayoutArg::Gaussian => Layout::Gaussian,
            LayoutArg::Moons => Layout::Moons,
        },
        num_classes: a.classes,
        points_per_frame: a.points_per_frame,
        sequences: a.sequences,
        frames_per_sequence: a.frames,
        feature_dim: a.feature_dim,
        separation: a.separation,
        sigma: a.sigma,
        drift: a.drift,
        offset: a.offset,
        duplicate_frames: a.duplicate_frames,
        seed: cli.seed.unwrap_or(0),
    };
    if a.validation_frames > 0 {
        let (train, val) = gen_synthetic_split(&spec, &dir, a.validation_frames)?;
        println!("{}\n{}", train.display(), val.display());
    } else {
        println!("{}", gen_synthetic(&spec, &dir)?.display());
    }
    Ok(())
}

fn serve(cli: &Cli, a: &ServeArgs) -> Result<(), Failure> {
    let run = cli
        .out_dir
        .clone()
        .ok_or_else(|| config_error("serve needs --out-dir (the run directory)"))?;
    let mut cfg = ServerConfig::new(&a.manifest, RunLayout::new(run).root());
    cfg.radius = a.radius;
    cfg.max_context = a.max_context;
    cfg.order = match a.order {
        OrderArg::Cluster => QueueOrder::Cluster,
        OrderArg::Spatial => QueueOrder::Spatial,
    };
    let mut rt = tokio::runtime::Builder::new_multi_thread();
    if let Some(t) = cli.threads {
        rt.worker_threads(t.max(1));
    }
    let rt = rt
        .enable_all()
        .build()
        .map_err(|e| config_error(format!("cannot start runtime: {e}")))?;
    rt.block_on(async {
        milliseg_annoserve::serve(cfg, a.addr).await.map_err(|e| match e.downcast::<Error>() {
            Ok(core) => *core,
            Err(other) => config_error(other.to_string()),
        })
    })?;
    Ok(())
}

fn run(cli: &Cli) -> Result<(), Failure> {
    if let Some(t) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| config_error(format!("--threads: {e}")))?;
    }
    match &cli.command {
        Command::Prune(a) => one_stage(cli, a, Stage::Prune),
        Command::Select(a) => one_stage(cli, a, Stage::Select),
        Command::Cluster(a) => one_stage(cli, a, Stage::Cluster),
        Command::Annotate(a) => one_stage(cli, a, Stage::Annotate),
        Command::Train(a) => one_stage(cli, a, Stage::Train),
        Command::Eval(a) => one_stage(cli, a, Stage::Eval),
        Command::Pipeline(a) => {
            let cfg = build_config(cli, a)?;
            print!("{}", run_pipeline(&cfg)?.to_toml());
            Ok(())
        }
        Command::GenSynthetic(a) => gen(cli, a),
        Command::Serve(a) => serve(cli, a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::new(&cli.log))
        .with_writer(std::io::stderr)
        .with_ansi(std::io::IsTerminal::is_terminal(&std::io::stderr()))
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
