//! Adaptive neural compression: an event-driven complexity estimate routes
//! each frame through one or more encoder branches of increasing cost, a
//! budget signal gates the fused feature channels, and the decoder depth
//! follows the estimated complexity.

pub mod branch;
pub mod estimator;
pub mod gate;
pub mod router;

pub use branch::{Branch, BranchSpec};
pub use estimator::{estimate_complexity, ComplexityEstimator, ComplexityScores};
pub use gate::{active_channels, BudgetGate, BudgetSignal};
pub use router::{gumbel_route, route, RouteMode, RoutingDecision};

use crate::error::{Error, Result};
use crate::events::{EventFrame, COUNT_KAPPA};
use crate::flops::FlopsLedger;
use crate::nn::{MicroDecoder, Parameterized};
use crate::rng::Rng;
use crate::sttf::mask::patch_rows;
use crate::tensor::{Graph, Tensor, Var};

/// Number of complexity levels and branches.
pub const K: usize = 3;
pub const LEVEL_NAMES: [&str; K] = ["tiny", "small", "medium"];
pub const DECODER_STAGE: &str = "decoder";
/// Decoder blocks run at each complexity level.
pub const LEVEL_LAYERS: [usize; K] = [2, 3, 4];
/// Slope of the optional budget shift on the router logits.
pub const ROUTER_BUDGET_SLOPE: f32 = 2.0;

#[derive(Clone, Debug, PartialEq)]
pub struct AncConfig {
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub branches: [BranchSpec; K],
    /// Shared feature width after each branch's projection.
    pub feature_dim: usize,
    pub vocab: usize,
    pub context: usize,
    pub temperature: f32,
    /// Hard one-hot routing weights in the forward pass, soft gradients.
    pub straight_through: bool,
    /// Let the budget shift router logits towards cheaper or richer branches.
    pub budget_routes: bool,
}

impl Default for AncConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl AncConfig {
    /// 224 x 224, 16-pixel patches. Branch FLOPs come out near 1 : 4 : 16.
    pub fn desk() -> Self {
        Self {
            height: 224,
            width: 224,
            patch: 16,
            branches: [
                BranchSpec::new("tiny", 8, 1),
                BranchSpec::new("small", 23, 2),
                BranchSpec::new("medium", 50, 4),
            ],
            feature_dim: 32,
            vocab: 256,
            context: 16,
            temperature: router::DEFAULT_TEMPERATURE,
            straight_through: false,
            budget_routes: false,
        }
    }

    /// 64 x 64 with 8-pixel patches and smaller branches.
    pub fn fast() -> Self {
        Self {
            height: 64,
            width: 64,
            patch: 8,
            branches: [
                BranchSpec::new("tiny", 4, 1),
                BranchSpec::new("small", 12, 2),
                BranchSpec::new("medium", 24, 4),
            ],
            feature_dim: 16,
            ..Self::desk()
        }
    }

    pub fn tokens(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    /// Features per patch: three colour channels plus two event polarities.
    pub fn patch_features(&self) -> usize {
        5 * self.patch * self.patch
    }

    pub fn branch_flops(&self) -> [u64; K] {
        let f = |i: usize| self.branches[i].analytic_flops(self.tokens(), self.patch_features(), self.feature_dim);
        [f(0), f(1), f(2)]
    }

    pub fn validate(&self) -> Result<()> {
        crate::sttf::mask::check_grid(self.height, self.width, self.patch)?;
        if self.feature_dim == 0 || self.vocab == 0 || self.context == 0 {
            return Err(Error::Config("feature width, vocabulary and context must be positive".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature {} must be positive", self.temperature)));
        }
        let f = self.branch_flops();
        if !(f[0] < f[1] && f[1] < f[2]) {
            return Err(Error::Config(format!("branch FLOPs {f:?} must increase from tiny to medium")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AncModel {
    pub config: AncConfig,
    pub estimator: ComplexityEstimator,
    pub branches: Vec<Branch>,
    pub budget_gate: BudgetGate,
    pub decoder: MicroDecoder,
}

impl AncModel {
    /// Random weights from `seed`, with the calibrated estimator.
    pub fn new(config: AncConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let branches = config
            .branches
            .iter()
            .map(|s| Branch::new(s.clone(), config.tokens(), config.patch_features(), config.feature_dim, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            estimator: ComplexityEstimator::calibrated(),
            branches,
            budget_gate: BudgetGate::new(ComplexityEstimator::HIDDEN, config.feature_dim, &mut rng),
            decoder: MicroDecoder::new("anc_decoder", config.vocab, config.context, config.feature_dim, LEVEL_LAYERS[K - 1], &mut rng),
            config,
        })
    }
}

impl Parameterized for AncModel {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut v = self.estimator.params();
        for b in &self.branches {
            v.extend(b.params());
        }
        v.extend(self.budget_gate.params());
        v.extend(self.decoder.params());
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = self.estimator.params_mut();
        for b in &mut self.branches {
            v.extend(b.params_mut());
        }
        v.extend(self.budget_gate.params_mut());
        v.extend(self.decoder.params_mut());
        v
    }
}

/// `[N, 5 p^2]` rows: each patch's RGB pixels followed by its normalised event counts.
pub fn patch_features(image: &Tensor, events: &EventFrame, patch: usize) -> Result<Tensor> {
    if image.ndim() != 3 || image.shape()[1..] != events.counts.shape()[1..] {
        return Err(Error::Config(format!(
            "image {:?} and events {:?} disagree",
            image.shape(),
            events.counts.shape()
        )));
    }
    let (h, w) = (image.shape()[1], image.shape()[2]);
    crate::sttf::mask::check_grid(h, w, patch)?;
    let idx: Vec<usize> = (0..(h / patch) * (w / patch)).collect();
    let rgb = patch_rows(image, patch, &idx)?;
    let ev = patch_rows(&events.normalized(COUNT_KAPPA), patch, &idx)?;
    let (a, b) = (rgb.cols(), ev.cols());
    let mut data = Vec::with_capacity(idx.len() * (a + b));
    for i in 0..idx.len() {
        data.extend_from_slice(rgb.row_slice(i));
        data.extend_from_slice(ev.row_slice(i));
    }
    Tensor::new(vec![idx.len(), a + b], data)
}

/// Runs the active branches and mixes their outputs with the raw weights
/// (no renormalisation over the surviving branches).
pub fn branch_forward(g: &mut Graph, branches: &[Branch], patches: Var, w: Var, decision: &RoutingDecision) -> Result<Var> {
    if branches.len() != K {
        return Err(Error::Config(format!("expected {K} branches, found {}", branches.len())));
    }
    let mut z: Option<Var> = None;
    for &i in &decision.active {
        let zi = branches[i].forward(g, patches)?;
        z = Some(g.with_stage(router::STAGE, |g| -> Result<Var> {
            let wi = g.slice_cols(w, i, 1)?;
            let term = g.mul_col(zi, wi)?;
            match z {
                Some(acc) => g.add(acc, term),
                None => Ok(term),
            }
        })?);
    }
    z.ok_or_else(|| Error::Contract("no branch executed".into()))
}

/// Greedy decoding conditioned on the feature row `z`, with the depth set by `level`.
pub fn conditional_decode(g: &mut Graph, decoder: &MicroDecoder, z: Var, prompt: &[u32], level: usize, n: usize) -> Result<Vec<u32>> {
    let layers = *LEVEL_LAYERS
        .get(level)
        .ok_or_else(|| Error::Parameter(format!("complexity level {level} outside 0..{K}")))?;
    if prompt.is_empty() || 1 + prompt.len() + n > decoder.context() {
        return Err(Error::Parameter(format!(
            "prompt of {} plus {n} generated tokens does not fit context {}",
            prompt.len(),
            decoder.context()
        )));
    }
    g.with_stage(DECODER_STAGE, |g| {
        let text = decoder.embed(g, prompt, 1)?;
        let seq = g.concat_rows(z, text)?;
        decoder.greedy(g, seq, n, layers)
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AncMetrics {
    pub scores: Option<ComplexityScores>,
    pub routing: RoutingDecision,
    pub level: usize,
    pub active_channels: usize,
    /// Cost ledger: branch stages hold `round(w_i * FLOPs(E_i))`, the rest as executed.
    pub ledger: FlopsLedger,
    /// FLOPs actually executed.
    pub executed: FlopsLedger,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AncStep {
    pub output: Vec<u32>,
    /// Total cost `F` of the frame.
    pub flops: u64,
    pub metrics: AncMetrics,
}

fn cost_ledger(executed: &FlopsLedger, branches: &[Branch], w: &[f32; K]) -> FlopsLedger {
    let mut cost = FlopsLedger::new();
    for (stage, &n) in executed.entries() {
        let weight = branches.iter().position(|b| b.stage() == *stage).map(|i| w[i]);
        match weight {
            Some(wi) => cost.record(stage, (wi as f64 * n as f64).round() as u64),
            None => cost.record(stage, n),
        }
    }
    cost
}

fn finish(
    g: &mut Graph,
    model: &AncModel,
    patches: Var,
    pooled: Var,
    w: Var,
    routing: RoutingDecision,
    scores: Option<ComplexityScores>,
    level: usize,
    prompt: &[u32],
    budget: BudgetSignal,
    n: usize,
) -> Result<AncStep> {
    let z = branch_forward(g, &model.branches, patches, w, &routing)?;
    let (gated, a) = model.budget_gate.forward(g, pooled, z, budget)?;
    let active_channels = active_channels(g.value(a));
    let output = conditional_decode(g, &model.decoder, gated, prompt, level, n)?;
    let executed = g.take_ledger();
    let ledger = cost_ledger(&executed, &model.branches, &routing.w);
    Ok(AncStep {
        output,
        flops: ledger.total(),
        metrics: AncMetrics {
            scores,
            routing,
            level,
            active_channels,
            ledger,
            executed,
        },
    })
}

/// One frame: estimate, route, run active branches, gate, decode.
pub fn anc_step(
    model: &AncModel,
    image: &Tensor,
    events: &EventFrame,
    prompt: &[u32],
    budget: BudgetSignal,
    mode: RouteMode,
    n: usize,
) -> Result<AncStep> {
    let cfg = &model.config;
    let mut g = Graph::inference();
    let input = estimator::event_input(&mut g, events, cfg.height, cfg.width)?;
    let est = model.estimator.forward(&mut g, input)?;
    let mut log_p = est.log_p;
    if cfg.budget_routes {
        let s = ROUTER_BUDGET_SLOPE * (budget.value() - 0.5);
        log_p = g.with_stage(router::STAGE, |g| {
            let shift = g.constant(Tensor::row(&[-s, 0.0, s]));
            g.add(log_p, shift)
        })?;
    }
    let (noise, seed) = match mode {
        RouteMode::Infer => (None, 0),
        RouteMode::Train { seed } => (Some(router::gumbel_noise(seed)), seed),
    };
    let mut w = route(&mut g, log_p, cfg.temperature, noise)?;
    if cfg.straight_through {
        w = router::straight_through(&mut g, w)?;
    }
    let wv = g.value(w).data();
    let routing = RoutingDecision::from_weights([wv[0], wv[1], wv[2]], cfg.temperature, seed);
    let patches = g.constant(patch_features(image, events, cfg.patch)?);
    let level = est.scores.level();
    finish(&mut g, model, patches, est.pooled, w, routing, Some(est.scores), level, prompt, budget, n)
}

/// Baseline that always runs the medium branch at full decoder depth and
/// skips the estimator; the gate sees a zero context vector.
pub fn medium_only_step(model: &AncModel, image: &Tensor, events: &EventFrame, prompt: &[u32], budget: BudgetSignal, n: usize) -> Result<AncStep> {
    let cfg = &model.config;
    let mut g = Graph::inference();
    let patches = g.constant(patch_features(image, events, cfg.patch)?);
    let w = g.constant(Tensor::row(&[0.0, 0.0, 1.0]));
    let pooled = g.constant(Tensor::zeros(&[1, ComplexityEstimator::HIDDEN]));
    let routing = RoutingDecision::from_weights([0.0, 0.0, 1.0], cfg.temperature, 0);
    finish(&mut g, model, patches, pooled, w, routing, None, K - 1, prompt, budget, n)
}

#[cfg(test)]
mod tests;
