//! `evfuse` command-line entry point: synthesise streams, run the engines,
//! verify the oracle suite and train the toy model.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use evfuse_core::config::{Mode, RunConfig, SynthOptions, TrainOptions};
use evfuse_core::train::{evaluate, lambda_sweep, motion_dataset, train, JointToyModel, ToyTask};
use evfuse_core::nn::Parameterized;
use evfuse_core::{checkpoint, run, verify, Error};

/// Default output directory when neither a flag nor the config names one.
const OUT_DIR_ENV: &str = "EVFUSE_OUT_DIR";
const DEFAULT_OUT_DIR: &str = "out";

#[derive(Parser)]
#[command(name = "evfuse", version, about = "Event-driven sparse token reuse and adaptive routing benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic EVS1 stream and its ground-truth sidecar.
    Synth(SynthArgs),
    /// Stream frames through an engine and write JSON and CSV reports.
    Run(RunArgs),
    /// Run the oracle suite; exit 1 if any check fails.
    Verify(VerifyArgs),
    /// Train the joint toy model on the motion-direction task.
    Train(TrainArgs),
}

#[derive(Args, Default)]
struct SceneFlags {
    /// Scene preset: desk or dvs128.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    activity: Option<f64>,
    /// square, dot or flicker.
    #[arg(long)]
    object: Option<String>,
    #[arg(long)]
    object_size: Option<usize>,
    /// Pixels per frame.
    #[arg(long)]
    speed: Option<f32>,
    #[arg(long)]
    objects: Option<usize>,
}

impl SceneFlags {
    fn apply(&self, o: &mut SynthOptions) {
        o.preset = self.preset.clone().or(o.preset.take());
        o.activity = self.activity.or(o.activity);
        o.object = self.object.clone().or(o.object.take());
        o.object_size = self.object_size.or(o.object_size);
        o.speed = self.speed.or(o.speed);
        o.objects = self.objects.or(o.objects);
    }

    fn any(&self) -> bool {
        self.preset.is_some()
            || self.activity.is_some()
            || self.object.is_some()
            || self.object_size.is_some()
            || self.speed.is_some()
            || self.objects.is_some()
    }
}

#[derive(Args)]
struct SynthArgs {
    /// TOML file with synth keys (preset, frames, activity, ...).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output stream path; the sidecar goes next to it as `<stem>.truth.json`.
    #[arg(long, short)]
    out: PathBuf,
    #[command(flatten)]
    scene: SceneFlags,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    frame_period_us: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    patch: Option<usize>,
}

#[derive(Args)]
struct RunArgs {
    /// TOML run config; flags override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// sttf, anc or dense-baseline.
    #[arg(long)]
    mode: Option<Mode>,
    /// EVS1 input stream.
    #[arg(long)]
    stream: Option<PathBuf>,
    /// Use a synthetic scene; scene flags imply this.
    #[arg(long)]
    synth: bool,
    #[command(flatten)]
    scene: SceneFlags,
    /// Frame count (for synthetic scenes, the scene length).
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    frame_period_us: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long)]
    tau: Option<f32>,
    #[arg(long)]
    tau_policy: bool,
    #[arg(long)]
    gamma: Option<f32>,
    #[arg(long)]
    temperature: Option<f32>,
    #[arg(long)]
    budget: Option<f32>,
    /// Comma-separated prompt token ids.
    #[arg(long, value_delimiter = ',')]
    prompt: Option<Vec<u32>>,
    #[arg(long)]
    decode_tokens: Option<usize>,
    /// Report directory; defaults to the config value, then $EVFUSE_OUT_DIR, then `out`.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Checkpoint that must decode cleanly before the suite runs.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML file with training keys; flags override them.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lambda1: Option<f32>,
    #[arg(long)]
    lambda2: Option<f32>,
    #[arg(long)]
    latency_weight: Option<f32>,
    #[arg(long)]
    budget: Option<f32>,
    /// Seed of the dataset split.
    #[arg(long)]
    task_seed: Option<u64>,
    /// Instead of one run, sweep these lambda1 values and write sweep.json.
    #[arg(long, value_delimiter = ',')]
    sweep: Option<Vec<f32>>,
    /// Model seeds for the sweep.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    sweep_seeds: Vec<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

/// Failure with the exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        let code = match error.downcast_ref::<Error>() {
            Some(Error::Training { .. } | Error::Numeric(_) | Error::Contract(_) | Error::GradCheck { .. }) => 1,
            _ => 2,
        };
        Self { code, error }
    }
}

fn out_dir(flag: Option<PathBuf>, config: Option<PathBuf>) -> PathBuf {
    flag.or(config)
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
}

fn cmd_synth(a: SynthArgs) -> anyhow::Result<()> {
    let mut o = match &a.config {
        Some(p) => SynthOptions::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => SynthOptions::default(),
    };
    a.scene.apply(&mut o);
    o.frames = a.frames.or(o.frames);
    o.frame_period_us = a.frame_period_us.or(o.frame_period_us);
    o.seed = a.seed.or(o.seed);
    let side = run::cmd_synth(&o, a.patch, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    println!(
        "wrote {} ({} frames, {} objects, mean active patches {:.2}/{}) and {}",
        a.out.display(),
        side.frames,
        side.objects,
        side.mean_active_patches,
        side.num_patches,
        run::sidecar_path(&a.out).display()
    );
    Ok(())
}

fn run_config(a: &RunArgs) -> anyhow::Result<RunConfig> {
    let mut c = match (&a.config, a.mode) {
        (Some(p), _) => RunConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        (None, Some(m)) => RunConfig::new(m),
        (None, None) => return Err(Error::Config("give --mode or --config".into()).into()),
    };
    if let Some(m) = a.mode {
        c.mode = m;
    }
    if a.stream.is_some() {
        c.stream = a.stream.clone();
    }
    if a.synth || a.scene.any() || (c.synth.is_some() && a.frames.is_some()) {
        let mut o = c.synth.take().unwrap_or_default();
        a.scene.apply(&mut o);
        o.frames = a.frames.or(o.frames);
        o.frame_period_us = a.frame_period_us.or(o.frame_period_us);
        c.synth = Some(o);
    } else {
        c.frames = a.frames.or(c.frames);
        c.frame_period_us = a.frame_period_us.or(c.frame_period_us);
    }
    c.seed = a.seed.unwrap_or(c.seed);
    c.checkpoint = a.checkpoint.clone().or(c.checkpoint.take());
    c.patch = a.patch.or(c.patch);
    c.tau = a.tau.or(c.tau);
    c.tau_policy |= a.tau_policy;
    c.gamma = a.gamma.or(c.gamma);
    c.temperature = a.temperature.or(c.temperature);
    c.budget = a.budget.or(c.budget);
    c.prompt = a.prompt.clone().or(c.prompt.take());
    c.decode_tokens = a.decode_tokens.or(c.decode_tokens);
    c.validate()?;
    Ok(c)
}

fn cmd_run(a: RunArgs) -> anyhow::Result<()> {
    let c = run_config(&a)?;
    let dir = out_dir(a.out_dir, c.out_dir.clone());
    let out = run::cmd_run(&c, &dir)?;
    let g = &out.report.aggregates;
    println!(
        "{} over {} frames: mean active tokens {:.2}/{} ({:.1}% reduction), FLOPs {} vs {} baseline {} ({:.1}% reduction), {:.1} frames/s",
        c.mode,
        g.frames,
        g.mean_active_tokens,
        g.slots,
        g.token_reduction_pct,
        g.total_flops,
        g.baseline,
        g.baseline_flops,
        g.flops_reduction_pct,
        out.timing.frames_per_sec
    );
    println!("reports in {}", dir.display());
    Ok(())
}

fn cmd_verify(a: VerifyArgs) -> Result<(), Failure> {
    let summary = verify::verify(a.checkpoint.as_deref(), a.seed).map_err(|e| Failure {
        code: 1,
        error: anyhow::Error::new(e).context("verification refused its input"),
    })?;
    for c in &summary.checks {
        println!("{c}");
    }
    if summary.passed() {
        println!("all {} checks passed", summary.checks.len());
        Ok(())
    } else {
        Err(Failure {
            code: 1,
            error: anyhow::anyhow!("failing checks: {}", summary.failing().join(", ")),
        })
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn cmd_train(a: TrainArgs) -> anyhow::Result<()> {
    let file = match &a.config {
        Some(p) => TrainOptions::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => TrainOptions::default(),
    };
    let flags = TrainOptions {
        lr: a.lr,
        batch: a.batch,
        steps: a.steps,
        seed: a.seed,
        lambda1: a.lambda1,
        lambda2: a.lambda2,
        latency_weight: a.latency_weight,
        budget: a.budget,
        task_seed: a.task_seed,
    };
    let opts = file.merged(&flags);
    let cfg = opts.resolve()?;
    let task = ToyTask::motion(opts.task_seed.unwrap_or(0));
    let dir = out_dir(a.out_dir, None);
    std::fs::create_dir_all(&dir)?;
    if let Some(lambdas) = &a.sweep {
        let points = lambda_sweep(&task, &cfg, lambdas, &a.sweep_seeds)?;
        for p in &points {
            println!("lambda1 {:<6} mean relaxed tokens {:.3}", p.lambda1, p.mean_tokens);
        }
        write_json(&dir.join("sweep.json"), &points)?;
        println!("sweep in {}", dir.join("sweep.json").display());
        return Ok(());
    }
    let data = motion_dataset(&task)?;
    let mut model = JointToyModel::new(task.size, 8, cfg.seed)?;
    let records = train(&mut model, &data.train, &cfg)?;
    let mut metrics = std::io::BufWriter::new(std::fs::File::create(dir.join("metrics.jsonl"))?);
    for r in &records {
        writeln!(metrics, "{}", serde_json::to_string(r)?)?;
    }
    metrics.flush()?;
    checkpoint::write_checkpoint(&dir.join("model.ckpt"), &model.state_dict())?;
    let eval = evaluate(&model, &data.val, cfg.budget)?;
    write_json(&dir.join("eval.json"), &eval)?;
    let first = records.first().map_or(f32::NAN, |r| r.report.total);
    let last = records.last().map_or(f32::NAN, |r| r.report.total);
    println!(
        "{} steps: loss {first:.4} -> {last:.4}, val accuracy {:.3}, mean relaxed tokens {:.3}",
        records.len(),
        eval.accuracy,
        eval.mean_tokens
    );
    println!("metrics, checkpoint and eval in {}", dir.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a).map_err(Failure::from),
        Command::Run(a) => cmd_run(a).map_err(Failure::from),
        Command::Verify(a) => cmd_verify(a),
        Command::Train(a) => cmd_train(a).map_err(Failure::from),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
