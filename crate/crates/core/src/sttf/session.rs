//! One STTF frame step and a stateful session around it.

use std::collections::BTreeMap;

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::error::{Error, Result};
use crate::events::EventFrame;
use crate::flops::FlopsLedger;
use crate::nn::MicroDecoder;
use crate::tensor::{Graph, Tensor, Var};

use super::bank::TokenBank;
use super::encoder::LayerFusion;
use super::fusion::{fuse_tokens, TauSchedule};
use super::mask::{detect_change_mask, extract_active_patches, ChangeMask};
use super::{SttfModel, DECODER_STAGE};

#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub frame_index: u64,
    /// Slots re-encoded this frame.
    pub active_tokens: usize,
    /// Slots merged with their predecessor.
    pub fused_count: usize,
    pub taus: Vec<f32>,
    pub flops: FlopsLedger,
}

#[derive(Clone, Debug)]
pub struct SttfStep {
    pub output: Vec<u32>,
    pub mask: ChangeMask,
    pub state: TokenBank,
    pub metrics: StepMetrics,
}

/// Greedy generation of `n` tokens after the conditioning rows `h`.
pub fn greedy_decode(g: &mut Graph, decoder: &MicroDecoder, h: Var, n: usize) -> Result<Vec<u32>> {
    g.with_stage(DECODER_STAGE, |g| decoder.greedy(g, h, n, decoder.depth()))
}

fn check_prompt(model: &SttfModel, prompt: &[u32], n: usize) -> Result<()> {
    if prompt.is_empty() {
        return Err(Error::Parameter("prompt must hold at least one token".into()));
    }
    if prompt.len() + n > model.decoder.context() {
        return Err(Error::Parameter(format!(
            "prompt of {} plus {n} generated tokens exceeds context {}",
            prompt.len(),
            model.decoder.context()
        )));
    }
    Ok(())
}

fn cross_and_decode(g: &mut Graph, model: &SttfModel, bank: &TokenBank, prompt: &[u32], n: usize) -> Result<Vec<u32>> {
    let text = g.with_stage(super::cross::STAGE, |g| model.decoder.embed(g, prompt, 0))?;
    let h = model.cross.forward(g, text, bank, model.config.gamma)?;
    greedy_decode(g, &model.decoder, h, n)
}

fn check_state(model: &SttfModel, prev: &TokenBank) -> Result<()> {
    let enc = &model.encoder;
    if prev.grid != enc.grid || prev.width() != enc.width() || prev.layers.len() != enc.depth() {
        return Err(Error::Session(format!(
            "state for a {:?} grid of width {} and depth {} cannot continue on a {:?} grid of width {} and depth {}",
            prev.grid,
            prev.width(),
            prev.layers.len(),
            enc.grid,
            enc.width(),
            enc.depth()
        )));
    }
    prev.validate()
}

/// One frame: gate, extract, re-encode (or fully encode without state),
/// fuse, cross-attend, decode `n` tokens, and return the new state.
pub fn sttf_step(
    model: &SttfModel,
    image: &Tensor,
    events: &EventFrame,
    prompt: &[u32],
    prev: Option<&TokenBank>,
    n: usize,
) -> Result<SttfStep> {
    let cfg = &model.config;
    check_prompt(model, prompt, n)?;
    if image.shape() != [3, cfg.height, cfg.width] {
        return Err(Error::Config(format!(
            "image of shape {:?} does not match model input [3, {}, {}]",
            image.shape(),
            cfg.height,
            cfg.width
        )));
    }
    if let Some(p) = prev {
        check_state(model, p)?;
    }
    let mut g = Graph::inference();
    let mask = detect_change_mask(&mut g, &model.gate, events, cfg.height, cfg.width, cfg.patch, model.fusion.theta_patch)?;
    let (bank, active_tokens, fused_count, taus) = match prev {
        None => {
            let bank = model.encoder.full_encode(&mut g, image, 0)?;
            (bank, model.encoder.slots(), 0, Vec::new())
        }
        Some(prev) => {
            let active = extract_active_patches(image, &mask, cfg.patch)?;
            let layer_fusion = LayerFusion {
                schedule: &model.fusion.schedule,
                policy: &model.tau_policy,
                gate: &model.fusion.gate,
            };
            let (bank, report) = model.encoder.selective_update(&mut g, &active, prev, Some(&layer_fusion))?;
            match model.fusion.schedule {
                TauSchedule::Fixed(tau) => {
                    let (fused, count) = fuse_tokens(&mut g, prev, &bank, tau, &model.fusion.gate)?;
                    let taus = if active.is_empty() { vec![] } else { vec![tau] };
                    (fused, active.len(), count, taus)
                }
                _ => (bank, active.len(), report.fused_slots.len(), report.taus),
            }
        }
    };
    let output = cross_and_decode(&mut g, model, &bank, prompt, n)?;
    Ok(SttfStep {
        output,
        metrics: StepMetrics {
            frame_index: bank.frame_index,
            active_tokens,
            fused_count,
            taus,
            flops: g.take_ledger(),
        },
        mask,
        state: bank,
    })
}

/// Dense baseline: full encoding of every frame, no gate, no fusion.
pub fn dense_step(model: &SttfModel, image: &Tensor, prompt: &[u32], frame_index: u64, n: usize) -> Result<SttfStep> {
    check_prompt(model, prompt, n)?;
    let cfg = &model.config;
    let mut g = Graph::inference();
    let bank = model.encoder.full_encode(&mut g, image, frame_index)?;
    let output = cross_and_decode(&mut g, model, &bank, prompt, n)?;
    Ok(SttfStep {
        output,
        mask: ChangeMask::uniform(cfg.height, cfg.width, cfg.patch, true)?,
        metrics: StepMetrics {
            frame_index,
            active_tokens: model.encoder.slots(),
            fused_count: 0,
            taus: vec![],
            flops: g.take_ledger(),
        },
        state: bank,
    })
}

/// Sequential chain of frame steps sharing one token bank.
#[derive(Clone, Debug, Default)]
pub struct SttfSession {
    pub state: Option<TokenBank>,
}

impl SttfSession {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step(&mut self, model: &SttfModel, image: &Tensor, events: &EventFrame, prompt: &[u32], n: usize) -> Result<SttfStep> {
        let out = sttf_step(model, image, events, prompt, self.state.as_ref(), n)?;
        self.state = Some(out.state.clone());
        Ok(out)
    }

    pub fn reset(&mut self) {
        self.state = None;
    }

    /// Serialised state, or an empty checkpoint before the first frame.
    pub fn save_state(&self) -> Result<Vec<u8>> {
        let map = self.state.as_ref().map(TokenBank::to_tensors).unwrap_or_default();
        save_checkpoint(&map)
    }

    pub fn load_state(bytes: &[u8]) -> Result<Self> {
        let map: BTreeMap<String, Tensor> = load_checkpoint(bytes)?;
        if map.is_empty() {
            return Ok(Self::new());
        }
        Ok(Self {
            state: Some(TokenBank::from_tensors(&map)?),
        })
    }
}
