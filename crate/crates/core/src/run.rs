//! Stream loading, engine drivers and the `synth` / `run` commands.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::anc::{anc_step, medium_only_step, AncModel, BudgetSignal, RouteMode};
use crate::checkpoint::read_checkpoint;
use crate::config::{Mode, RunConfig, SynthOptions, DEFAULT_FRAME_PERIOD_US};
use crate::error::{Error, Result};
use crate::events::{frames_covering, frames_from_records, read_stream, synth_stream, write_stream, EventFrame, COUNT_KAPPA, OFF, ON};
use crate::flops::FlopsLedger;
use crate::nn::Parameterized;
use crate::report::{Aggregates, BenchReport, FrameRecord, Timing, REPORT_VERSION};
use crate::sttf::{dense_step, SttfModel, SttfSession};
use crate::tensor::Tensor;

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const TIMING_JSON: &str = "timing.json";

/// Frames ready for an engine: event counts plus the matching RGB input.
#[derive(Clone, Debug)]
pub struct LoadedStream {
    pub source: String,
    pub height: usize,
    pub width: usize,
    pub events: Vec<EventFrame>,
    pub rgb: Vec<Tensor>,
}

/// `[3, H, W]` stand-in image for streams without RGB: normalised ON and
/// OFF counts, then their elementwise maximum.
pub fn rgb_proxy(frame: &EventFrame) -> Tensor {
    let n = frame.normalized(COUNT_KAPPA);
    let plane = frame.height() * frame.width();
    let d = n.data();
    let on = &d[ON as usize * plane..(ON as usize + 1) * plane];
    let off = &d[OFF as usize * plane..(OFF as usize + 1) * plane];
    let mut data = Vec::with_capacity(3 * plane);
    data.extend_from_slice(on);
    data.extend_from_slice(off);
    data.extend(on.iter().zip(off).map(|(a, b)| a.max(*b)));
    Tensor::new(vec![3, frame.height(), frame.width()], data).expect("three planes")
}

pub fn load_stream(cfg: &RunConfig) -> Result<LoadedStream> {
    match (&cfg.stream, &cfg.synth) {
        (Some(path), None) => {
            let stream = read_stream(&std::fs::read(path)?)?;
            let (h, w) = (stream.height as usize, stream.width as usize);
            let period = cfg.frame_period_us.unwrap_or(DEFAULT_FRAME_PERIOD_US);
            let count = cfg.frames.unwrap_or_else(|| frames_covering(&stream.records, period));
            let events = frames_from_records(&stream.records, h, w, period, count)?;
            let rgb = events.iter().map(rgb_proxy).collect();
            Ok(LoadedStream {
                source: path.display().to_string(),
                height: h,
                width: w,
                events,
                rgb,
            })
        }
        (None, Some(opts)) => {
            let scene = opts.scene(cfg.patch)?;
            let s = synth_stream(&scene)?;
            Ok(LoadedStream {
                source: format!(
                    "synth {:?} {}x{} activity {} seed {}",
                    scene.object, scene.width, scene.height, scene.activity_fraction, scene.seed
                ),
                height: scene.height,
                width: scene.width,
                events: s.frames,
                rgb: s.rgb,
            })
        }
        _ => Err(Error::Config("exactly one stream source is required".into())),
    }
}

fn load_weights<M: Parameterized>(model: &mut M, path: Option<&PathBuf>) -> Result<()> {
    match path {
        Some(p) => model.load_state_dict(&read_checkpoint(p)?),
        None => Ok(()),
    }
}

fn stages(ledger: &FlopsLedger) -> std::collections::BTreeMap<String, u64> {
    ledger.entries().clone()
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub report: BenchReport,
    pub timing: Timing,
}

/// Streams every frame through the configured engine.
pub fn run(cfg: &RunConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let stream = load_stream(cfg)?;
    if stream.events.is_empty() {
        return Err(Error::Config("stream has no frames".into()));
    }
    let (h, w) = (stream.height, stream.width);
    let prompt = cfg.prompt();
    let n = cfg.decode_tokens();
    let start = Instant::now();
    let mut records = Vec::with_capacity(stream.events.len());
    let (slots, patch, baseline, baseline_per_frame) = match cfg.mode {
        Mode::Sttf | Mode::DenseBaseline => {
            let mut model = SttfModel::new(cfg.sttf_config(h, w)?, cfg.seed)?;
            load_weights(&mut model, cfg.checkpoint.as_ref())?;
            // Dense cost depends only on shapes, so one frame prices them all.
            let dense = dense_step(&model, &stream.rgb[0], &prompt, 0, n)?.metrics.flops.total();
            let mut session = SttfSession::new();
            for (f, (image, events)) in stream.rgb.iter().zip(&stream.events).enumerate() {
                let step = match cfg.mode {
                    Mode::Sttf => session.step(&model, image, events, &prompt, n)?,
                    _ => dense_step(&model, image, &prompt, f as u64, n)?,
                };
                let m = &step.metrics;
                records.push(FrameRecord {
                    frame: f,
                    active_tokens: m.active_tokens,
                    fused_count: m.fused_count,
                    flops: m.flops.total(),
                    stages: stages(&m.flops),
                    routing_w: None,
                    level: None,
                    active_channels: None,
                    output: step.output,
                });
            }
            (model.config.slots(), model.config.patch, "dense", dense)
        }
        Mode::Anc => {
            let mut model = AncModel::new(cfg.anc_config(h, w)?, cfg.seed)?;
            load_weights(&mut model, cfg.checkpoint.as_ref())?;
            let budget = BudgetSignal::new(cfg.budget())?;
            let medium = medium_only_step(&model, &stream.rgb[0], &stream.events[0], &prompt, budget, n)?.flops;
            for (f, (image, events)) in stream.rgb.iter().zip(&stream.events).enumerate() {
                let step = anc_step(&model, image, events, &prompt, budget, RouteMode::Infer, n)?;
                let m = &step.metrics;
                records.push(FrameRecord {
                    frame: f,
                    active_tokens: model.config.tokens(),
                    fused_count: 0,
                    flops: step.flops,
                    stages: stages(&m.ledger),
                    routing_w: Some(m.routing.w),
                    level: Some(m.level),
                    active_channels: Some(m.active_channels),
                    output: step.output,
                });
            }
            (model.config.tokens(), model.config.patch, "medium-only", medium)
        }
    };
    let timing = Timing::new(records.len(), start.elapsed().as_secs_f64());
    let report = BenchReport {
        report_version: REPORT_VERSION,
        mode: cfg.mode.to_string(),
        seed: cfg.seed,
        source: stream.source,
        height: h,
        width: w,
        patch,
        aggregates: Aggregates::compute(&records, slots, baseline, baseline_per_frame)?,
        frames: records,
    };
    Ok(RunOutput { report, timing })
}

/// Runs and writes `report.json`, `report.csv` and `timing.json` into `dir`.
pub fn cmd_run(cfg: &RunConfig, dir: &Path) -> Result<RunOutput> {
    let out = run(cfg)?;
    out.report.write_files(dir)?;
    std::fs::write(dir.join(TIMING_JSON), serde_json::to_string_pretty(&out.timing)? + "\n")?;
    Ok(out)
}

/// Ground truth written next to a synthetic stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub width: usize,
    pub height: usize,
    pub patch: usize,
    pub num_patches: usize,
    pub frames: usize,
    pub frame_period_us: u64,
    pub seed: u64,
    pub objects: usize,
    pub target_activity: f64,
    pub measured_activity: f64,
    pub mean_active_patches: f64,
    /// Sorted patch indices touched in each frame; frame 0 is empty.
    pub ground_truth: Vec<Vec<usize>>,
}

/// Path of the sidecar for a stream file: `scene.evs` gives `scene.truth.json`.
pub fn sidecar_path(stream: &Path) -> PathBuf {
    stream.with_extension("truth.json")
}

/// Writes the EVS1 stream to `path` and its sidecar beside it.
pub fn cmd_synth(opts: &SynthOptions, patch: Option<usize>, path: &Path) -> Result<Sidecar> {
    let scene = opts.scene(patch)?;
    let s = synth_stream(&scene)?;
    let sidecar = Sidecar {
        width: scene.width,
        height: scene.height,
        patch: scene.patch,
        num_patches: scene.num_patches(),
        frames: scene.frames,
        frame_period_us: scene.frame_period_us,
        seed: scene.seed,
        objects: s.objects,
        target_activity: scene.activity_fraction,
        measured_activity: s.measured_activity,
        mean_active_patches: s.mean_active_patches(),
        ground_truth: s.ground_truth.clone(),
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, write_stream(&s.event_stream()))?;
    std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&sidecar)? + "\n")?;
    Ok(sidecar)
}
