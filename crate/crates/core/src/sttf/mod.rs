//! Sparse temporal token fusion: event-gated re-encoding of changed patches,
//! slot-wise fusion with the previous frame, staleness-aware cross-attention
//! and greedy micro decoding.

pub mod bank;
pub mod cross;
pub mod encoder;
pub mod fusion;
pub mod mask;
mod session;

pub use bank::{LayerCache, TokenBank};
pub use cross::CrossAttention;
pub use encoder::{FusionReport, LayerFusion, SparseEncoder};
pub use fusion::{cosine, fuse_tokens, policy_loss, FusionConfig, TauPolicy, TauSchedule};
pub use mask::{detect_change_mask, extract_active_patches, ActivePatchSet, ChangeMask, EventGate};
pub use session::{dense_step, greedy_decode, sttf_step, StepMetrics, SttfSession, SttfStep};

use crate::error::{Error, Result};
use crate::nn::{MicroDecoder, Parameterized};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const DECODER_STAGE: &str = "decoder";

#[derive(Clone, Debug, PartialEq)]
pub struct SttfConfig {
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub d: usize,
    pub depth: usize,
    pub mlp_ratio: usize,
    pub decoder_layers: usize,
    pub vocab: usize,
    pub context: usize,
    /// Logit penalty on stale slots in cross-attention.
    pub gamma: f32,
    pub theta_patch: f32,
    pub schedule: TauSchedule,
}

impl Default for SttfConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl SttfConfig {
    /// 224 x 224 input, 16-pixel patches (196 slots), width 64, two blocks.
    pub fn desk() -> Self {
        Self {
            height: 224,
            width: 224,
            patch: 16,
            d: 64,
            depth: 2,
            mlp_ratio: 2,
            decoder_layers: 2,
            vocab: 256,
            context: 16,
            gamma: cross::DEFAULT_GAMMA,
            theta_patch: mask::THETA_PATCH,
            schedule: TauSchedule::Fixed(fusion::DEFAULT_TAU),
        }
    }

    /// 64 x 64 input with 8-pixel patches (64 slots).
    pub fn fast() -> Self {
        Self {
            height: 64,
            width: 64,
            patch: 8,
            ..Self::desk()
        }
    }

    pub fn slots(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    pub fn validate(&self) -> Result<()> {
        mask::check_grid(self.height, self.width, self.patch)?;
        if self.d == 0 || self.depth == 0 || self.decoder_layers == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("model width and depths must be positive".into()));
        }
        if self.vocab == 0 || self.context == 0 {
            return Err(Error::Config("vocabulary and context must be positive".into()));
        }
        if !self.gamma.is_finite() || self.gamma < 0.0 {
            return Err(Error::Config(format!("gamma {} must be finite and >= 0", self.gamma)));
        }
        if !(0.0..1.0).contains(&self.theta_patch) {
            return Err(Error::Config(format!("theta_patch {} outside [0, 1)", self.theta_patch)));
        }
        FusionConfig::new(self.d, self.schedule.clone()).validate(self.depth)
    }
}

#[derive(Debug, Clone)]
pub struct SttfModel {
    pub config: SttfConfig,
    pub gate: EventGate,
    pub encoder: SparseEncoder,
    pub fusion: FusionConfig,
    pub tau_policy: TauPolicy,
    pub cross: CrossAttention,
    pub decoder: MicroDecoder,
}

impl SttfModel {
    /// Random weights from `seed`, with the calibrated event gate.
    pub fn new(config: SttfConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let encoder = SparseEncoder::new(
            config.height,
            config.width,
            config.patch,
            config.d,
            config.depth,
            config.mlp_ratio,
            &mut rng,
        )?;
        let mut fusion = FusionConfig::new(config.d, config.schedule.clone());
        fusion.theta_patch = config.theta_patch;
        Ok(Self {
            gate: EventGate::calibrated("gate"),
            encoder,
            fusion,
            tau_policy: TauPolicy::new(&mut rng),
            cross: CrossAttention::new(config.d, &mut rng),
            decoder: MicroDecoder::new("decoder", config.vocab, config.context, config.d, config.decoder_layers, &mut rng),
            config,
        })
    }
}

impl Parameterized for SttfModel {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut v = self.gate.params();
        v.extend(self.encoder.params());
        v.push(("fusion.gate".into(), &self.fusion.gate));
        v.extend(self.tau_policy.params());
        v.extend(self.cross.params());
        v.extend(self.decoder.params());
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = self.gate.params_mut();
        v.extend(self.encoder.params_mut());
        v.push(("fusion.gate".into(), &mut self.fusion.gate));
        v.extend(self.tau_policy.params_mut());
        v.extend(self.cross.params_mut());
        v.extend(self.decoder.params_mut());
        v
    }
}
