use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use gesture_core::animation::{
    apply_finger_limits, export_bvh, retarget, smooth, solve_roll, FingerLimits, DEFAULT_SMOOTHING_WINDOW,
};
use gesture_core::audio::{read_wav, segment_clips, SEGMENT_SECONDS};
use gesture_core::dataset::{
    load_samples, speech_features, write_pose_file, write_synthetic_dataset, DatasetManifest, Split, SynthKind,
    POSE_FPS,
};
use gesture_core::eval::{evaluate, evaluate_predictions, predict, sequence_csv, DEFAULT_ALPHA};
use gesture_core::gradcheck::{run_gradcheck, TOLERANCE};
use gesture_core::nn::checkpoint::Checkpoint;
use gesture_core::nn::ModelConfig;
use gesture_core::skeleton::{PoseSequence, SkeletonTopology};
use gesture_core::training::{history_csv, train, TrainConfig};
use gesture_core::Error;

#[derive(Parser)]
#[command(name = "gesture", version, about = "Speech-driven gesture synthesis")]
struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset: WAV and pose files plus manifest.json.
    SynthData(SynthArgs),
    /// Train on a manifest's train split.
    Train(TrainArgs),
    /// Generate poses (and optionally BVH) for a WAV file.
    Generate(GenerateArgs),
    /// Score a checkpoint on a manifest's validation split.
    Evaluate(EvaluateArgs),
    /// Finite-difference check of every differentiable operation.
    Gradcheck,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Unimodal,
    Multimodal,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_enum)]
    kind: Kind,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.2)]
    val_fraction: f64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// JSON with optional `train` and `model` objects.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Topology JSON (default: the built-in upper body).
    #[arg(long)]
    topology: Option<PathBuf>,
    #[arg(long, default_value = "checkpoints")]
    checkpoint_dir: PathBuf,
    /// Loss history CSV (default: <checkpoint-dir>/history.csv).
    #[arg(long)]
    history: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lambda_bone: Option<f64>,
    #[arg(long)]
    adversarial_weight: Option<f64>,
    #[arg(long)]
    lr_g: Option<f64>,
    #[arg(long)]
    lr_d: Option<f64>,
    #[arg(long)]
    d_steps: Option<usize>,
    /// Generator minimizes log(1 - D(fake)).
    #[arg(long)]
    saturating: bool,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    wav: PathBuf,
    /// Output pose file.
    #[arg(long)]
    out: PathBuf,
    /// Also write a BVH animation here.
    #[arg(long)]
    bvh: Option<PathBuf>,
    /// Odd quaternion smoothing window; 1 disables smoothing.
    #[arg(long, default_value_t = DEFAULT_SMOOTHING_WINDOW)]
    smooth_window: usize,
    #[arg(long)]
    no_finger_limits: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    alpha: f64,
    /// Score the ground truth against itself instead of running the model.
    #[arg(long)]
    ground_truth: bool,
    /// Also write the report JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-sequence CSV.
    #[arg(long)]
    per_sequence: Option<PathBuf>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    #[serde(default)]
    train: Option<TrainConfig>,
    #[serde(default)]
    model: Option<ModelConfig>,
}

enum Failure {
    Usage(String),
    Core(Error),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn require_file(path: &Path, what: &str) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("{what} not found: {}", path.display())))
    }
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| Failure::Core(Error::Io { path: path.into(), source: e }))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(if cli.verbose { log::LevelFilter::Info } else { log::LevelFilter::Warn })
        .parse_default_env()
        .init();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be >= 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match &cli.command {
        Command::SynthData(a) => synth_data(a, cli.seed),
        Command::Train(a) => train_cmd(a, cli.seed),
        Command::Generate(a) => generate(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Gradcheck => gradcheck(cli.seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_input_error() { 2 } else { 1 })
        }
        Err(Failure::Check(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}

fn synth_data(a: &SynthArgs, seed: Option<u64>) -> CliResult<()> {
    if !(a.val_fraction > 0.0 && a.val_fraction < 1.0) {
        return Err(Failure::Usage("--val-fraction must be in (0, 1)".into()));
    }
    let kind = match a.kind {
        Kind::Unimodal => SynthKind::Unimodal,
        Kind::Multimodal => SynthKind::Multimodal,
    };
    let manifest = write_synthetic_dataset(&a.out, kind, a.n, seed.unwrap_or(0), a.val_fraction)?;
    println!(
        "wrote {} clips ({} train, {} val) to {}",
        manifest.entries.len(),
        manifest.split_entries(Split::Train).len(),
        manifest.split_entries(Split::Val).len(),
        a.out.display()
    );
    Ok(())
}

fn load_run_config(path: Option<&Path>) -> CliResult<RunConfig> {
    let Some(path) = path else { return Ok(RunConfig::default()) };
    require_file(path, "config")?;
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Core(Error::Io { path: path.into(), source: e }))?;
    serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn train_cmd(a: &TrainArgs, seed: Option<u64>) -> CliResult<()> {
    require_file(&a.manifest, "manifest")?;
    let run = load_run_config(a.config.as_deref())?;
    let topo = match &a.topology {
        Some(p) => {
            require_file(p, "topology")?;
            SkeletonTopology::load(p)?
        }
        None => SkeletonTopology::upper_body(),
    };
    let mut config = run.train.unwrap_or_default();
    if let Some(s) = seed {
        config.seed = s;
    }
    if let Some(v) = a.epochs {
        config.epochs = v;
    }
    if let Some(v) = a.batch_size {
        config.batch_size = v;
    }
    if let Some(v) = a.lambda_bone {
        config.lambda_bone = v;
    }
    if let Some(v) = a.adversarial_weight {
        config.adversarial_weight = v;
    }
    if let Some(v) = a.lr_g {
        config.lr_g = v;
    }
    if let Some(v) = a.lr_d {
        config.lr_d = v;
    }
    if let Some(v) = a.d_steps {
        config.d_steps_per_g_step = v;
    }
    config.saturating |= a.saturating;
    config.validate()?;
    let model = run.model.unwrap_or_else(|| ModelConfig::for_topology(&topo));
    model.validate()?;

    let manifest = DatasetManifest::load(&a.manifest)?;
    let train_set = load_samples(&manifest, Split::Train, &topo)?;
    let val_set = load_samples(&manifest, Split::Val, &topo)?;
    let state = train(&train_set, &topo, &model, &config, Some(&a.checkpoint_dir), |s| {
        log::info!("epoch {}/{}", s.epoch, config.epochs);
        Ok(())
    })?;
    let history = a.history.clone().unwrap_or_else(|| a.checkpoint_dir.join("history.csv"));
    write_text(&history, &history_csv(&state.history))?;
    println!("trained {} epochs, {} optimizer steps", state.epoch, state.total_steps());
    if val_set.is_empty() {
        println!("no validation clips; skipping PCK");
    } else {
        let ck = state.to_checkpoint(&model, &topo, &config)?;
        let (report, _) = evaluate(&ck, &val_set, DEFAULT_ALPHA)?;
        println!("val PCK@{DEFAULT_ALPHA}: {:.4}", report.pck);
    }
    Ok(())
}

fn load_checkpoint(path: &Path) -> CliResult<(Checkpoint, SkeletonTopology)> {
    require_file(path, "checkpoint")?;
    let ck = Checkpoint::load(path)?;
    let topo = SkeletonTopology::from_file_repr(ck.header.topology.clone())?;
    if ck.header.model.generator.out_dims != topo.joint_count() * 3 {
        return Err(Failure::Core(Error::Compatibility(format!(
            "checkpoint generator emits {} dims but its topology has {} joints",
            ck.header.model.generator.out_dims,
            topo.joint_count()
        ))));
    }
    Ok((ck, topo))
}

fn generate(a: &GenerateArgs) -> CliResult<()> {
    if a.smooth_window == 0 || a.smooth_window % 2 == 0 {
        return Err(Failure::Usage(format!("--smooth-window must be odd, got {}", a.smooth_window)));
    }
    require_file(&a.wav, "audio")?;
    let (ck, topo) = load_checkpoint(&a.checkpoint)?;
    let clip = read_wav(&a.wav)?;
    let segments = segment_clips(&clip, SEGMENT_SECONDS);
    if segments.is_empty() {
        return Err(Failure::Usage(format!(
            "{} lasts {:.3} s; at least {SEGMENT_SECONDS} s of audio is needed",
            a.wav.display(),
            clip.duration_s()
        )));
    }
    let mut frames = Vec::new();
    for seg in &segments {
        let pred = predict(&ck.params, &ck.header.model, &speech_features(seg)?)?;
        frames.extend(pred.frames().iter().cloned());
    }
    let poses = PoseSequence::new(frames, POSE_FPS)?;
    write_pose_file(&a.out, &poses, topo.name())?;
    println!("wrote {} frames to {}", poses.len(), a.out.display());

    if let Some(bvh) = &a.bvh {
        let mut rot = solve_roll(&retarget(&poses, &topo)?, &topo)?;
        if !a.no_finger_limits {
            rot = apply_finger_limits(&rot, &topo, &FingerLimits::default_for(&topo))?;
        }
        rot = smooth(&rot, a.smooth_window)?;
        export_bvh(&rot, &topo, bvh)?;
        println!("wrote {}", bvh.display());
    }
    Ok(())
}

fn evaluate_cmd(a: &EvaluateArgs) -> CliResult<()> {
    if !(a.alpha > 0.0 && a.alpha.is_finite()) {
        return Err(Failure::Usage(format!("--alpha must be > 0, got {}", a.alpha)));
    }
    require_file(&a.manifest, "manifest")?;
    let (ck, topo) = load_checkpoint(&a.checkpoint)?;
    let manifest = DatasetManifest::load(&a.manifest)?;
    let samples = load_samples(&manifest, Split::Val, &topo)?;
    if samples.is_empty() {
        return Err(Failure::Core(Error::InvalidInput(format!(
            "{} has no validation clips",
            a.manifest.display()
        ))));
    }
    let (report, rows) = if a.ground_truth {
        let gts: Vec<PoseSequence> = samples.iter().map(|s| s.gesture.clone()).collect();
        evaluate_predictions(&gts, &gts, a.alpha)?
    } else {
        evaluate(&ck, &samples, a.alpha)?
    };
    let json = serde_json::to_string_pretty(&report).map_err(|e| Failure::Core(e.into()))?;
    println!("{json}");
    if let Some(out) = &a.out {
        write_text(out, &json)?;
    }
    if let Some(csv) = &a.per_sequence {
        write_text(csv, &sequence_csv(&rows))?;
    }
    Ok(())
}

fn gradcheck(seed: Option<u64>) -> CliResult<()> {
    let rows = run_gradcheck(seed.unwrap_or(0), None)?;
    println!("{:<32} {:>8} {:>14}  result", "op", "checked", "max rel err");
    for r in &rows {
        let verdict = if r.passed() { "pass" } else { "FAIL" };
        println!("{:<32} {:>8} {:>14.3e}  {verdict}", r.op, r.checked, r.max_rel_error);
    }
    let failed: Vec<&str> = rows.iter().filter(|r| !r.passed()).map(|r| r.op.as_str()).collect();
    if failed.is_empty() {
        println!("all {} ops within {TOLERANCE:e}", rows.len());
        Ok(())
    } else {
        Err(Failure::Check(format!("gradient check failed for: {}", failed.join(", "))))
    }
}
