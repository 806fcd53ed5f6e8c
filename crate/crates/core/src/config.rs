//! Run and training configuration, loadable from TOML key-value files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::anc::{AncConfig, BranchSpec, K};
use crate::error::{Error, Result};
use crate::events::{ShapeKind, SynthSceneConfig};
use crate::sttf::fusion::TauSchedule;
use crate::sttf::SttfConfig;
use crate::train::{LossConfig, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Sttf,
    Anc,
    DenseBaseline,
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sttf" => Ok(Self::Sttf),
            "anc" => Ok(Self::Anc),
            "dense-baseline" => Ok(Self::DenseBaseline),
            other => Err(Error::Config(format!("unknown mode {other:?}; expected sttf, anc or dense-baseline"))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Sttf => "sttf",
            Self::Anc => "anc",
            Self::DenseBaseline => "dense-baseline",
        })
    }
}

/// Overrides on top of a synthetic scene preset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthOptions {
    /// `desk` (224 x 224) or `dvs128`.
    pub preset: Option<String>,
    pub frames: Option<usize>,
    pub activity: Option<f64>,
    pub object: Option<String>,
    pub object_size: Option<usize>,
    pub speed: Option<f32>,
    pub objects: Option<usize>,
    pub frame_period_us: Option<u64>,
    pub seed: Option<u64>,
}

impl SynthOptions {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn scene(&self, patch: Option<usize>) -> Result<SynthSceneConfig> {
        let mut c = match self.preset.as_deref().unwrap_or("desk") {
            "desk" => SynthSceneConfig::desk(),
            "dvs128" => SynthSceneConfig::dvs128(),
            other => return Err(Error::Config(format!("unknown synth preset {other:?}"))),
        };
        if let Some(v) = patch {
            c.patch = v;
        }
        if let Some(v) = self.frames {
            c.frames = v;
        }
        if let Some(v) = self.activity {
            c.activity_fraction = v;
        }
        if let Some(v) = &self.object {
            c.object = v.parse::<ShapeKind>()?;
        }
        if let Some(v) = self.object_size {
            c.object_size = v;
        }
        if let Some(v) = self.speed {
            c.speed = v;
            // A still scene cannot meet the default activity target.
            if v == 0.0 && self.activity.is_none() {
                c.activity_fraction = 0.0;
            }
        }
        if self.objects.is_some() {
            c.objects = self.objects;
        }
        if let Some(v) = self.frame_period_us {
            c.frame_period_us = v;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BranchOptions {
    pub name: String,
    pub width: usize,
    pub depth: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    #[serde(default)]
    pub seed: u64,
    /// EVS1 event file; exclusive with `synth`.
    pub stream: Option<PathBuf>,
    /// Frame period for file streams, in microseconds.
    pub frame_period_us: Option<u64>,
    /// Frame count for file streams; defaults to covering every record.
    pub frames: Option<usize>,
    pub synth: Option<SynthOptions>,
    pub checkpoint: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub patch: Option<usize>,
    /// Fixed fusion threshold (sttf only).
    pub tau: Option<f32>,
    /// Learned per-layer threshold policy instead of a fixed one (sttf only).
    #[serde(default)]
    pub tau_policy: bool,
    /// Stale-slot attention penalty (sttf only).
    pub gamma: Option<f32>,
    /// Router temperature (anc only).
    pub temperature: Option<f32>,
    /// Exactly three branch specs, tiny to medium (anc only).
    pub branches: Option<Vec<BranchOptions>>,
    /// Compute budget in `[0, 1]`.
    pub budget: Option<f32>,
    pub prompt: Option<Vec<u32>>,
    pub decode_tokens: Option<usize>,
}

pub const DEFAULT_PROMPT: [u32; 4] = [3, 14, 15, 92];
pub const DEFAULT_DECODE_TOKENS: usize = 4;
pub const DEFAULT_FRAME_PERIOD_US: u64 = 10_000;

impl RunConfig {
    pub fn new(mode: Mode) -> Self {
        Self {
            mode,
            seed: 0,
            stream: None,
            frame_period_us: None,
            frames: None,
            synth: None,
            checkpoint: None,
            out_dir: None,
            patch: None,
            tau: None,
            tau_policy: false,
            gamma: None,
            temperature: None,
            branches: None,
            budget: None,
            prompt: None,
            decode_tokens: None,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn budget(&self) -> f32 {
        self.budget.unwrap_or(1.0)
    }

    pub fn prompt(&self) -> Vec<u32> {
        self.prompt.clone().unwrap_or_else(|| DEFAULT_PROMPT.to_vec())
    }

    pub fn decode_tokens(&self) -> usize {
        self.decode_tokens.unwrap_or(DEFAULT_DECODE_TOKENS)
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.stream, &self.synth) {
            (Some(_), Some(_)) => return Err(Error::Config("give either a stream file or a synth scene, not both".into())),
            (None, None) => return Err(Error::Config("no stream source: give a stream file or a synth scene".into())),
            (None, Some(_)) if self.frame_period_us.is_some() || self.frames.is_some() => {
                return Err(Error::Config("frame_period_us and frames apply to file streams; set them under synth".into()))
            }
            _ => {}
        }
        if self.mode != Mode::Sttf && (self.tau.is_some() || self.tau_policy || self.gamma.is_some()) {
            return Err(Error::Config(format!("tau, tau_policy and gamma only apply to sttf, not {}", self.mode)));
        }
        if self.tau.is_some() && self.tau_policy {
            return Err(Error::Config("choose a fixed tau or the tau policy, not both".into()));
        }
        if self.mode != Mode::Anc && (self.temperature.is_some() || self.branches.is_some()) {
            return Err(Error::Config(format!("temperature and branches only apply to anc, not {}", self.mode)));
        }
        if let Some(b) = &self.branches {
            if b.len() != K {
                return Err(Error::Config(format!("expected {K} branches, got {}", b.len())));
            }
        }
        if !(0.0..=1.0).contains(&self.budget()) {
            return Err(Error::Config(format!("budget {} outside [0, 1]", self.budget())));
        }
        if self.frame_period_us == Some(0) {
            return Err(Error::Config("frame period must be positive".into()));
        }
        Ok(())
    }

    pub fn sttf_config(&self, height: usize, width: usize) -> Result<SttfConfig> {
        let mut c = SttfConfig {
            height,
            width,
            ..SttfConfig::desk()
        };
        if let Some(p) = self.patch {
            c.patch = p;
        }
        if let Some(t) = self.tau {
            c.schedule = TauSchedule::Fixed(t);
        }
        if self.tau_policy {
            c.schedule = TauSchedule::Policy { budget: self.budget() };
        }
        if let Some(gm) = self.gamma {
            c.gamma = gm;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn anc_config(&self, height: usize, width: usize) -> Result<AncConfig> {
        let mut c = AncConfig {
            height,
            width,
            ..AncConfig::desk()
        };
        if let Some(p) = self.patch {
            c.patch = p;
        }
        if let Some(t) = self.temperature {
            c.temperature = t;
        }
        if let Some(b) = &self.branches {
            for (slot, o) in c.branches.iter_mut().zip(b) {
                *slot = BranchSpec::new(&o.name, o.width, o.depth);
            }
        }
        c.validate()?;
        Ok(c)
    }
}

/// Training options as read from a file; absent keys keep the defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOptions {
    pub lr: Option<f32>,
    pub batch: Option<usize>,
    pub steps: Option<usize>,
    pub seed: Option<u64>,
    pub lambda1: Option<f32>,
    pub lambda2: Option<f32>,
    pub latency_weight: Option<f32>,
    pub budget: Option<f32>,
    pub task_seed: Option<u64>,
}

impl TrainOptions {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Fields set in `other` win.
    pub fn merged(&self, other: &TrainOptions) -> TrainOptions {
        TrainOptions {
            lr: other.lr.or(self.lr),
            batch: other.batch.or(self.batch),
            steps: other.steps.or(self.steps),
            seed: other.seed.or(self.seed),
            lambda1: other.lambda1.or(self.lambda1),
            lambda2: other.lambda2.or(self.lambda2),
            latency_weight: other.latency_weight.or(self.latency_weight),
            budget: other.budget.or(self.budget),
            task_seed: other.task_seed.or(self.task_seed),
        }
    }

    pub fn resolve(&self) -> Result<TrainConfig> {
        let d = TrainConfig::default();
        let c = TrainConfig {
            lr: self.lr.unwrap_or(d.lr),
            batch: self.batch.unwrap_or(d.batch),
            steps: self.steps.unwrap_or(d.steps),
            seed: self.seed.unwrap_or(d.seed),
            loss: LossConfig {
                lambda1: self.lambda1.unwrap_or(d.loss.lambda1),
                lambda2: self.lambda2.unwrap_or(d.loss.lambda2),
                latency_weight: self.latency_weight.unwrap_or(d.loss.latency_weight),
            },
            budget: self.budget.unwrap_or(d.budget),
        };
        c.validate()?;
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_a_full_file() {
        let c = RunConfig::from_toml(
            r#"
mode = "anc"
seed = 3
budget = 0.5
prompt = [1, 2]
branches = [
  { name = "tiny", width = 4, depth = 1 },
  { name = "small", width = 12, depth = 2 },
  { name = "medium", width = 24, depth = 4 },
]
[synth]
preset = "desk"
frames = 5
"#,
        )
        .unwrap();
        c.validate().unwrap();
        assert_eq!(c.mode, Mode::Anc);
        assert_eq!(c.synth.as_ref().unwrap().frames, Some(5));
        let a = c.anc_config(224, 224).unwrap();
        assert_eq!(a.branches[2].width, 24);
    }

    #[test]
    fn exactly_one_stream_source() {
        let mut c = RunConfig::new(Mode::Sttf);
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c.stream = Some("a.evs".into());
        c.synth = Some(SynthOptions::default());
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c.stream = None;
        c.validate().unwrap();
    }

    #[test]
    fn mode_specific_fields_are_checked() {
        let mut c = RunConfig::new(Mode::Anc);
        c.synth = Some(SynthOptions::default());
        c.tau = Some(0.8);
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = RunConfig::new(Mode::Sttf);
        c.synth = Some(SynthOptions::default());
        c.temperature = Some(0.3);
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c.temperature = None;
        c.tau = Some(0.8);
        c.tau_policy = true;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(RunConfig::from_toml("mode = \"sttf\"\nfoo = 1\n"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml("mode = \"fast\"\n"), Err(Error::Config(_))));
    }

    #[test]
    fn train_options_merge_and_resolve() {
        let file = TrainOptions::from_toml("lr = 0.1\nsteps = 20\n").unwrap();
        let flags = TrainOptions {
            steps: Some(5),
            ..Default::default()
        };
        let c = file.merged(&flags).resolve().unwrap();
        assert_eq!((c.lr, c.steps, c.batch), (0.1, 5, 8));
        let bad = TrainOptions {
            lambda1: Some(-1.0),
            ..Default::default()
        };
        assert!(bad.resolve().is_err());
    }
}
