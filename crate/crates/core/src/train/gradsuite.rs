//! Finite-difference checks over every differentiable component.

use serde::Serialize;

use crate::anc::estimator::ComplexityEstimator;
use crate::anc::gate::{BudgetGate, BudgetSignal};
use crate::anc::router::{gumbel_noise, route};
use crate::error::{Error, Result};
use crate::gradcheck::{check_inputs, check_inputs_reference, check_params};
use crate::nn::{Linear, MicroDecoder, Parameterized, TransformerBlock};
use crate::rng::Rng;
use crate::sttf::bank::TokenBank;
use crate::sttf::cross::CrossAttention;
use crate::sttf::fusion::{fuse_rows, policy_loss, similarity_stats, TauPolicy};
use crate::sttf::mask::EventGate;
use crate::tensor::Tensor;

use super::task::{motion_dataset, ToyTask};
use super::{JointToyModel, TrainConfig};

pub const GRAD_TOLERANCE: f64 = 1e-3;
/// Base step of the extrapolated central difference.
const STEP: f32 = 2e-2;
const PROBES: usize = 12;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradEntry {
    pub component: String,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct GradReport {
    pub entries: Vec<GradEntry>,
}

impl GradReport {
    fn push(&mut self, component: &str, err: f64) {
        self.entries.push(GradEntry {
            component: component.to_string(),
            max_rel_error: err,
        });
    }

    pub fn max(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }

    /// Fails on the first component above `tolerance`.
    pub fn ensure(&self, tolerance: f64) -> Result<()> {
        match self.entries.iter().find(|e| !(e.max_rel_error < tolerance)) {
            Some(e) => Err(Error::GradCheck {
                component: e.component.clone(),
                error: e.max_rel_error,
                tolerance,
            }),
            None => Ok(()),
        }
    }
}

/// Fusion gate vector exposed under the name `fuse_rows` registers.
#[derive(Clone)]
struct FusionGate(Tensor);

impl Parameterized for FusionGate {
    fn params(&self) -> Vec<(String, &Tensor)> {
        vec![("fusion.gate".into(), &self.0)]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![("fusion.gate".into(), &mut self.0)]
    }
}

const ROUTER_TEMPERATURE: f32 = 0.5;

/// `softmax((log_p + noise) / T)` in float64.
fn reference_route(log_p: &[f64], noise: [f32; 3], temperature: f64) -> Vec<f64> {
    let z: Vec<f64> = log_p.iter().zip(noise).map(|(&l, n)| (l + n as f64) / temperature).collect();
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Router weights with fixed noise are often nearly one-hot, where the
/// gradient sits below float32 resolution of the forward value, so the
/// numeric side differences a float64 reference.
pub fn check_router(log_p: &Tensor, noise: [f32; 3]) -> Result<f64> {
    check_inputs_reference(
        std::slice::from_ref(log_p),
        1e-4,
        |g, v| route(g, v[0], ROUTER_TEMPERATURE, Some(noise)),
        |x| reference_route(&x[0], noise, ROUTER_TEMPERATURE as f64),
    )
}

/// Checks each component on small random shapes drawn from `seed`.
pub fn grad_check_all(seed: u64) -> Result<GradReport> {
    let mut rng = Rng::new(seed);
    let mut r = GradReport::default();

    let lin = Linear::new("lin", 5, 3, &mut rng);
    let x = Tensor::randn(&[4, 5], 1.0, &mut rng);
    let e1 = check_params(&lin, STEP, PROBES, |m, g| {
        let x = g.constant(x.clone());
        m.forward(g, x)
    })?;
    let e2 = check_inputs(std::slice::from_ref(&x), STEP, |g, v| lin.forward(g, v[0]))?;
    r.push("linear", e1.max(e2));

    let gate = EventGate::new("gate", &mut rng);
    let ev = Tensor::uniform(&[2, 8, 8], 0.0, 1.0, &mut rng);
    let e1 = check_params(&gate, STEP, PROBES, |m, g| {
        let x = g.constant(ev.clone());
        m.probabilities(g, x)
    })?;
    let e2 = check_inputs(std::slice::from_ref(&ev), STEP, |g, v| gate.probabilities(g, v[0]))?;
    r.push("event_gate", e1.max(e2));

    // tau below -1 merges every row, so the selection cannot flip under perturbation
    let fg = FusionGate(Tensor::randn(&[8, 1], 0.5, &mut rng));
    let prev = Tensor::randn(&[6, 4], 1.0, &mut rng);
    let curr = Tensor::randn(&[6, 4], 1.0, &mut rng);
    let e1 = check_params(&fg, STEP, PROBES, |m, g| {
        let (p, c) = (g.constant(prev.clone()), g.constant(curr.clone()));
        Ok(fuse_rows(g, p, c, -2.0, &m.0)?.0)
    })?;
    let e2 = check_inputs(&[prev.clone(), curr.clone()], STEP, |g, v| Ok(fuse_rows(g, v[0], v[1], -2.0, &fg.0)?.0))?;
    r.push("fusion_gate", e1.max(e2));

    let policy = TauPolicy::new(&mut rng);
    let cos: Vec<f32> = (0..16).map(|_| rng.range(0.6, 1.0)).collect();
    let e = check_params(&policy, STEP, PROBES, |p, g| {
        let tau = p.adapt_tau(g, similarity_stats(&cos), 0.4)?;
        policy_loss(g, tau, &cos, 0.3)
    })?;
    r.push("tau_policy", e);

    let noise = gumbel_noise(rng.next_u64());
    // probed in log space, which is what the router consumes
    let uniform = Tensor::row(&[(1.0f32 / 3.0).ln(); 3]);
    let e = check_router(&uniform, noise)?;
    r.push("router_uniform", e);
    let mut worst = 0.0f64;
    for _ in 0..5 {
        let raw = [rng.range(0.05, 1.0), rng.range(0.05, 1.0), rng.range(0.05, 1.0)];
        let s: f32 = raw.iter().sum();
        let lp = Tensor::row(&raw.map(|v| (v / s).ln()));
        let noise = gumbel_noise(rng.next_u64());
        worst = worst.max(check_router(&lp, noise)?);
    }
    r.push("router", worst);

    let bg = BudgetGate::new(4, 6, &mut rng);
    let hp = Tensor::randn(&[1, 4], 1.0, &mut rng);
    let h = Tensor::randn(&[1, 6], 1.0, &mut rng);
    let b = BudgetSignal::new(0.3)?;
    let e1 = check_params(&bg, STEP, PROBES, |m, g| {
        let (p, x) = (g.constant(hp.clone()), g.constant(h.clone()));
        Ok(m.forward(g, p, x, b)?.0)
    })?;
    let e2 = check_inputs(&[hp.clone(), h.clone()], STEP, |g, v| Ok(bg.forward(g, v[0], v[1], b)?.0))?;
    r.push("budget_gate", e1.max(e2));
    let e = check_inputs(&[Tensor::full(&[1, 1], 0.3)], STEP, |g, v| {
        let (p, x) = (g.constant(hp.clone()), g.constant(h.clone()));
        Ok(bg.forward_budget_var(g, p, x, v[0])?.0)
    })?;
    r.push("budget_gate_b", e);

    let est = ComplexityEstimator::new(&mut rng);
    let ev = Tensor::uniform(&[2, 8, 8], 0.0, 1.0, &mut rng);
    let e = check_params(&est, STEP, PROBES, |m, g| {
        let x = g.constant(ev.clone());
        Ok(m.forward(g, x)?.log_p)
    })?;
    r.push("complexity_estimator", e);

    let d = 8;
    let block = TransformerBlock::new("blk", d, 2, &mut rng);
    let x = Tensor::randn(&[5, d], 1.0, &mut rng);
    let e1 = check_params(&block, STEP, PROBES, |m, g| {
        let x = g.constant(x.clone());
        m.forward(g, x, false)
    })?;
    let e2 = check_inputs(std::slice::from_ref(&x), STEP, |g, v| block.forward(g, v[0], true))?;
    r.push("transformer_block", e1.max(e2));

    let cross = CrossAttention::new(d, &mut rng);
    let bank = TokenBank {
        tokens: Tensor::randn(&[6, d], 1.0, &mut rng),
        stale_age: vec![0, 2, 0, 1, 0, 3],
        frame_index: 1,
        grid: (2, 3),
        layers: Vec::new(),
    };
    let text = Tensor::randn(&[3, d], 1.0, &mut rng);
    let e1 = check_params(&cross, STEP, PROBES, |m, g| {
        let t = g.constant(text.clone());
        m.forward(g, t, &bank, 1.0)
    })?;
    let e2 = check_inputs(std::slice::from_ref(&text), STEP, |g, v| cross.forward(g, v[0], &bank, 1.0))?;
    r.push("cross_attention", e1.max(e2));

    let dec = MicroDecoder::new("dec", 12, 8, d, 2, &mut rng);
    let tokens = [3u32, 7, 1, 11, 0];
    let e = check_params(&dec, STEP, PROBES, |m, g| {
        let h = m.embed(g, &tokens, 0)?;
        m.logits(g, h, 2)
    })?;
    r.push("micro_decoder", e);

    let mut task = ToyTask::motion(seed);
    task.train = 2;
    task.val = 0;
    let data = motion_dataset(&task)?;
    let model = JointToyModel::new(task.size, 8, seed)?;
    let cfg = TrainConfig::default();
    let batch: Vec<_> = data.train.iter().collect();
    let e = check_params(&model, STEP, 4, |m, g| Ok(m.loss(g, &batch, &cfg)?.0))?;
    r.push("joint_toy_model", e);

    Ok(r)
}
