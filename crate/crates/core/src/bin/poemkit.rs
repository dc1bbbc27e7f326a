use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use poemkit::dataset::{read_dataset, write_dataset, GenConfig};
use poemkit::decoder::{Model, ModelConfig};
use poemkit::faults::Fault;
use poemkit::fitting::{fit, FitOptions, KeypointFile};
use poemkit::geometry::{Rig, Vec3};
use poemkit::hand::ToyHand;
use poemkit::io::{read_json, write_atomic, write_json};
use poemkit::pipeline::{reconstruct_all, score_predictions, PredictionFile, ReconstructOptions, RootSource, ViewSpec};
use poemkit::tensor::{load_checkpoint, save_checkpoint, Dtype};
use poemkit::train::{loss_csv, train, TrainConfig};
use poemkit::{verify, Error, Result};

/// Multi-view hand reconstruction toolkit on synthetic desk-scale data.
#[derive(Parser)]
#[command(name = "poemkit", version)]
struct Cli {
    /// Seed for every random choice; falls back to POEMKIT_SEED, then 0.
    #[arg(long, global = true, env = "POEMKIT_SEED")]
    seed: Option<u64>,
    /// Worker threads for frame-level parallelism.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen(GenArgs),
    /// Two-stage reconstruction of every frame of a dataset.
    Reconstruct(ReconstructArgs),
    /// Train the decoder on a dataset.
    Train(TrainArgs),
    /// Fit the toy hand to 2D keypoints by optimization.
    Fit(FitArgs),
    /// Score predictions against a dataset.
    Eval(EvalArgs),
    /// Run the built-in oracle suite.
    Verify(VerifyArgs),
    /// Write the basis point set as CSV.
    BpsExport(BpsArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 10)]
    frames: usize,
    /// Generation config JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReconstructArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Model config JSON (defaults to the tiny config).
    #[arg(long)]
    config: Option<PathBuf>,
    /// View selection: all, first:K, shuffle:SEED, random:SEED, or a list like 2,0,1.
    #[arg(long, default_value = "all")]
    views: ViewSpec,
    /// Route left-hand frames through mirror, reconstruct, mirror back.
    #[arg(long)]
    mirror: bool,
    /// Use the ground-truth root instead of stage 1.
    #[arg(long, conflicts_with = "root")]
    gt_root: bool,
    /// Fixed root `x,y,z` in meters, dataset world frame.
    #[arg(long, value_parser = parse_vec3)]
    root: Option<Vec3>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Model config JSON (defaults to the tiny config).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training config JSON.
    #[arg(long)]
    train_config: Option<PathBuf>,
    /// Continue from this checkpoint; the step counter carries on.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Overrides the step count of the training config.
    #[arg(long)]
    steps: Option<u64>,
    /// Checkpoint path; the loss log goes next to it as `<out>.loss.csv`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    keypoints: PathBuf,
    #[arg(long)]
    rig: PathBuf,
    /// Fit options JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Toy-hand vertex count.
    #[arg(long, default_value_t = poemkit::hand::DEFAULT_VERTICES)]
    vertices: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Report JSON path; the table always goes to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Report JSON path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Inject a deliberate defect: sign-flip or wrong-axis.
    #[arg(long, hide = true)]
    inject_fault: Option<String>,
}

#[derive(Args)]
struct BpsArgs {
    /// Model config JSON (defaults to the tiny config).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn parse_vec3(s: &str) -> std::result::Result<Vec3, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|e| format!("{t:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    match v.as_slice() {
        [x, y, z] => Ok(Vec3::new(*x, *y, *z)),
        _ => Err(format!("expected x,y,z, got {s:?}")),
    }
}

fn model_config(path: Option<&Path>, seed: Option<u64>) -> Result<ModelConfig> {
    let mut cfg = match path {
        Some(p) => read_json(p)?,
        None => ModelConfig::tiny(),
    };
    if let (None, Some(s)) = (path, seed) {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_model(config: Option<&Path>, checkpoint: &Path, seed: Option<u64>) -> Result<Model> {
    let cfg = model_config(config, seed)?;
    let ckpt = load_checkpoint(checkpoint)?;
    Model::with_params(cfg, ckpt.params)
}

fn ids_of(ds: &poemkit::dataset::Dataset) -> Vec<String> {
    ds.ids().map(str::to_string).collect()
}

fn cmd_gen(a: &GenArgs, seed: u64) -> Result<()> {
    let cfg: GenConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => GenConfig::default(),
    };
    let m = write_dataset(&a.out, &cfg, a.frames, seed)?;
    println!("wrote {} frames to {} (config {})", m.n_frames, a.out.display(), &m.config_hash[..12]);
    Ok(())
}

fn cmd_reconstruct(a: &ReconstructArgs, seed: Option<u64>) -> Result<()> {
    let model = load_model(a.config.as_deref(), &a.checkpoint, seed)?;
    let ds = read_dataset(&a.data)?;
    let root = match (a.root, a.gt_root) {
        (Some(r), _) => RootSource::Fixed(r),
        (None, true) => RootSource::GroundTruth,
        (None, false) => RootSource::Estimate,
    };
    let opts = ReconstructOptions {
        views: a.views.clone(),
        root,
        mirror_left: a.mirror,
    };
    let preds = reconstruct_all(&model, &ids_of(&ds), &ds.frames, &opts)?;
    write_json(&a.out, &preds)?;
    println!("reconstructed {} frames into {}", preds.frames.len(), a.out.display());
    Ok(())
}

fn cmd_train(a: &TrainArgs, seed: Option<u64>) -> Result<()> {
    let mut tcfg: TrainConfig = match &a.train_config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        tcfg.seed = s;
    }
    if let Some(n) = a.steps {
        tcfg.steps = n;
    }
    tcfg.validate()?;
    let mut model = match &a.resume {
        Some(ckpt) => load_model(a.config.as_deref(), ckpt, seed)?,
        None => Model::new(model_config(a.config.as_deref(), seed)?)?,
    };
    let ds = read_dataset(&a.data)?;
    let every = (tcfg.steps / 20).max(1);
    let log = train(&mut model, &ds.frames, &tcfg, |l| {
        if l.step % every == 0 {
            info!("step {} loss {:.3} mm lr {:.2e}", l.step, l.loss * 1000.0, l.lr);
        }
    })?;
    save_checkpoint(&a.out, &model.params, Dtype::F64)?;
    let mut csv_path = a.out.clone().into_os_string();
    csv_path.push(".loss.csv");
    write_atomic(Path::new(&csv_path), loss_csv(&log).as_bytes())?;
    match log.last() {
        Some(l) => println!("trained to step {}, last loss {:.3} mm", l.step, l.loss * 1000.0),
        None => println!("no steps run; checkpoint holds the initialization"),
    }
    Ok(())
}

fn cmd_fit(a: &FitArgs) -> Result<()> {
    let opts: FitOptions = match &a.config {
        Some(p) => read_json(p)?,
        None => FitOptions::default(),
    };
    let kp: KeypointFile = read_json(&a.keypoints)?;
    let rig = Rig::load(&a.rig)?;
    let hand = ToyHand::new(a.vertices)?;
    let result = fit(&kp.views, &rig, &hand, &opts)?;
    write_json(&a.out, &result)?;
    let first = result.loss_trace.first().copied().unwrap_or(f64::NAN);
    let last = result.loss_trace.last().copied().unwrap_or(f64::NAN);
    println!("fit loss {first:.4e} -> {last:.4e} px^2 over {} iterations", result.loss_trace.len().saturating_sub(1));
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let preds: PredictionFile = read_json(&a.predictions)?;
    let ds = read_dataset(&a.data)?;
    let report = score_predictions(&preds, &ids_of(&ds), &ds.frames)?;
    if let Some(out) = &a.out {
        write_json(out, &report)?;
    }
    print!("{}", report.table());
    Ok(())
}

fn cmd_verify(a: &VerifyArgs, seed: u64) -> Result<bool> {
    let fault = match a.inject_fault.as_deref() {
        None => None,
        Some("sign-flip") => Some(Fault::AggregationSignFlip),
        Some("wrong-axis") => Some(Fault::VectorAttentionWrongAxis),
        Some(other) => return Err(Error::InvalidInput(format!("unknown fault {other:?}"))),
    };
    let report = match fault {
        Some(f) => verify::run_with_fault(f, seed),
        None => verify::run(seed),
    };
    print!("{}", report.lines());
    if let Some(out) = &a.out {
        write_json(out, &report)?;
    }
    Ok(report.all_passed())
}

fn cmd_bps(a: &BpsArgs, seed: Option<u64>) -> Result<()> {
    let cfg = model_config(a.config.as_deref(), seed)?;
    let bps = poemkit::basis::generate_bps(cfg.m_pts, cfg.diameter, cfg.seed)?;
    write_atomic(&a.out, bps.to_csv().as_bytes())?;
    println!("wrote {} basis points to {}", bps.len(), a.out.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<bool> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))?;
    }
    let seed = cli.seed;
    match &cli.command {
        Command::Gen(a) => cmd_gen(a, seed.unwrap_or(0)).map(|_| true),
        Command::Reconstruct(a) => cmd_reconstruct(a, seed).map(|_| true),
        Command::Train(a) => cmd_train(a, seed).map(|_| true),
        Command::Fit(a) => cmd_fit(a).map(|_| true),
        Command::Eval(a) => cmd_eval(a).map(|_| true),
        Command::Verify(a) => cmd_verify(a, seed.unwrap_or(0)),
        Command::BpsExport(a) => cmd_bps(a, seed).map(|_| true),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
