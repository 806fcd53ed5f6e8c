//! Joint toy training with the composite sparsity loss.
//!
//! The token and gate L0 terms are replaced by expected-activation
//! surrogates: the token term is the sum of per-patch soft change
//! probabilities of a frame, the gate term the sum of budget-gate sigmoid
//! activations. Both are counted per frame and averaged over the batch.

mod gradsuite;
mod task;

pub use gradsuite::{check_router, grad_check_all, GradReport, GRAD_TOLERANCE};
pub use task::{echo_dataset, motion_dataset, MotionDataset, MotionSample, TaskKind, ToyTask, DIRECTIONS};

use serde::Serialize;

use crate::anc::gate::{BudgetGate, BudgetSignal};
use crate::error::{Error, Result};
use crate::nn::{cross_entropy, Linear, MicroDecoder, Parameterized};
use crate::rng::Rng;
use crate::sttf::fusion::{policy_loss, similarity_stats, TauPolicy};
use crate::sttf::mask::{patch_rows, EventGate};
use crate::tensor::{Graph, Tensor, Var};

pub const DEFAULT_LR: f32 = 0.05;
pub const DEFAULT_BATCH: usize = 8;
pub const DEFAULT_LAMBDA: f32 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossConfig {
    pub lambda1: f32,
    pub lambda2: f32,
    pub latency_weight: f32,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda1: DEFAULT_LAMBDA,
            lambda2: DEFAULT_LAMBDA,
            latency_weight: 0.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("latency_weight", self.latency_weight),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SurrogateReport {
    pub token_l0_relaxed: f32,
    pub gate_l0_relaxed: f32,
    pub task_loss: f32,
    pub total: f32,
}

/// `task + lambda1 * token + lambda2 * gate`, evaluated in that order.
pub fn composite_loss(task: f32, token: f32, gate: f32, cfg: &LossConfig) -> Result<f32> {
    for (name, v) in [("task loss", task), ("token surrogate", token), ("gate surrogate", gate)] {
        if !v.is_finite() {
            return Err(Error::Numeric(name.into()));
        }
    }
    Ok(task + cfg.lambda1 * token + cfg.lambda2 * gate)
}

/// Graph form of [`composite_loss`]; the forward value is bit-identical to it.
pub fn composite_loss_var(g: &mut Graph, task: Var, token: Var, gate: Var, cfg: &LossConfig) -> Result<Var> {
    composite_loss(g.value(task).item(), g.value(token).item(), g.value(gate).item(), cfg)?;
    let t = g.scale(token, cfg.lambda1);
    let l = g.add(task, t)?;
    let a = g.scale(gate, cfg.lambda2);
    g.add(l, a)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f32,
    pub batch: usize,
    pub steps: usize,
    pub seed: u64,
    pub loss: LossConfig,
    pub budget: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: DEFAULT_LR,
            batch: DEFAULT_BATCH,
            steps: 200,
            seed: 0,
            loss: LossConfig::default(),
            budget: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::Config(format!("learning rate {} must be finite and >= 0", self.lr)));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.budget) {
            return Err(Error::Config(format!("budget {} outside [0, 1]", self.budget)));
        }
        Ok(())
    }
}

/// Event gate, patch tokens, budget-gated hidden layer and a direction head.
///
/// Patch tokens are scaled by their soft change probability before
/// embedding, so the token surrogate trades directly against the task.
#[derive(Debug, Clone)]
pub struct JointToyModel {
    pub size: usize,
    pub patch: usize,
    pub gate: EventGate,
    pub embed: Linear,
    pub hidden: Linear,
    pub budget_gate: BudgetGate,
    pub head: Linear,
}

pub struct ToyForward {
    pub logits: Var,
    pub token: Var,
    pub gate: Var,
}

impl JointToyModel {
    pub const WIDTH: usize = 8;
    pub const HIDDEN: usize = 16;
    /// A binary event patch has a handful of nonzero entries out of `2 p^2`;
    /// this gain brings its embedding to roughly unit scale.
    pub const TOKEN_GAIN: f32 = 8.0;

    pub fn new(size: usize, patch: usize, seed: u64) -> Result<Self> {
        crate::sttf::mask::check_grid(size, size, patch)?;
        let mut rng = Rng::new(seed);
        let n = (size / patch) * (size / patch);
        Ok(Self {
            size,
            patch,
            gate: EventGate::new("toy.gate", &mut rng),
            embed: Linear::new("toy.embed", 2 * patch * patch, Self::WIDTH, &mut rng),
            hidden: Linear::new("toy.hidden", n * Self::WIDTH, Self::HIDDEN, &mut rng),
            budget_gate: BudgetGate::new(Self::HIDDEN, Self::HIDDEN, &mut rng),
            head: Linear::new("toy.head", Self::HIDDEN, DIRECTIONS.len(), &mut rng),
        })
    }

    pub fn patches(&self) -> usize {
        (self.size / self.patch).pow(2)
    }

    pub fn forward(&self, g: &mut Graph, events: &Tensor, budget: BudgetSignal) -> Result<ToyForward> {
        if events.shape() != [2, self.size, self.size] {
            return Err(Error::Dimension {
                op: "joint_toy_model",
                lhs: events.shape().to_vec(),
                rhs: vec![2, self.size, self.size],
            });
        }
        let n = self.patches();
        let x = g.constant(events.clone());
        let probs = self.gate.probabilities(g, x)?;
        let pool = g.constant(Tensor::full(&[1, 1, self.patch, self.patch], 1.0 / (self.patch * self.patch) as f32));
        let soft = g.conv2d(probs, pool, self.patch, 0)?;
        let soft = g.reshape(soft, &[n, 1])?;
        let token = g.sum(soft);

        let idx: Vec<usize> = (0..n).collect();
        let rows = g.constant(patch_rows(events, self.patch, &idx)?);
        let rows = g.mul_col(rows, soft)?;
        let rows = g.scale(rows, Self::TOKEN_GAIN);
        let e = self.embed.forward(g, rows)?;
        let e = g.reshape(e, &[1, n * Self::WIDTH])?;
        let h = self.hidden.forward(g, e)?;
        let h = g.tanh(h);
        let (h, a) = self.budget_gate.forward(g, h, h, budget)?;
        let gate = g.sum(a);
        let logits = self.head.forward(g, h)?;
        Ok(ToyForward { logits, token, gate })
    }

    /// Batch loss graph: mean cross-entropy plus batch-mean surrogates.
    pub fn loss(&self, g: &mut Graph, batch: &[&MotionSample], cfg: &TrainConfig) -> Result<(Var, SurrogateReport)> {
        if batch.is_empty() {
            return Err(Error::Parameter("empty batch".into()));
        }
        let budget = BudgetSignal::new(cfg.budget)?;
        let mut logits: Option<Var> = None;
        let (mut token, mut gate): (Option<Var>, Option<Var>) = (None, None);
        for s in batch {
            let f = self.forward(g, &s.events, budget)?;
            logits = Some(match logits {
                Some(l) => g.concat_rows(l, f.logits)?,
                None => f.logits,
            });
            token = Some(match token {
                Some(t) => g.add(t, f.token)?,
                None => f.token,
            });
            gate = Some(match gate {
                Some(t) => g.add(t, f.gate)?,
                None => f.gate,
            });
        }
        let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
        let task = cross_entropy(g, logits.expect("non-empty batch"), &labels)?;
        let inv = 1.0 / batch.len() as f32;
        let token = g.scale(token.expect("non-empty batch"), inv);
        let gate = g.scale(gate.expect("non-empty batch"), inv);
        let total = composite_loss_var(g, task, token, gate, &cfg.loss)?;
        let (tl, tk, gt) = (g.value(task).item(), g.value(token).item(), g.value(gate).item());
        let report = SurrogateReport {
            token_l0_relaxed: tk,
            gate_l0_relaxed: gt,
            task_loss: tl,
            total: composite_loss(tl, tk, gt, &cfg.loss)?,
        };
        Ok((total, report))
    }
}

impl Parameterized for JointToyModel {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut v = self.gate.params();
        v.extend(self.embed.params());
        v.extend(self.hidden.params());
        v.extend(self.budget_gate.params());
        v.extend(self.head.params());
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = self.gate.params_mut();
        v.extend(self.embed.params_mut());
        v.extend(self.hidden.params_mut());
        v.extend(self.budget_gate.params_mut());
        v.extend(self.head.params_mut());
        v
    }
}

/// One plain SGD step on `batch`. `step` only labels a divergence error.
pub fn train_step(model: &mut JointToyModel, batch: &[&MotionSample], cfg: &TrainConfig, step: usize) -> Result<SurrogateReport> {
    if !(cfg.lr >= 0.0) {
        return Err(Error::Config(format!("learning rate {} must be >= 0", cfg.lr)));
    }
    let mut g = Graph::new();
    let (loss, report) = model.loss(&mut g, batch, cfg).map_err(|e| match e {
        Error::Numeric(term) => Error::Training {
            step,
            reason: format!("non-finite {term}"),
        },
        other => other,
    })?;
    g.backward(loss)?;
    let grads = g.param_grads();
    if grads.values().any(|t| !t.all_finite()) {
        return Err(Error::Training {
            step,
            reason: "non-finite gradient".into(),
        });
    }
    model.sgd_step(&grads, cfg.lr);
    if !model.all_finite() {
        return Err(Error::Training {
            step,
            reason: "non-finite weights".into(),
        });
    }
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    #[serde(flatten)]
    pub report: SurrogateReport,
}

/// Runs `cfg.steps` SGD steps over reshuffled epochs of `data`.
pub fn train(model: &mut JointToyModel, data: &[MotionSample], cfg: &TrainConfig) -> Result<Vec<StepRecord>> {
    cfg.validate()?;
    if data.len() < cfg.batch {
        return Err(Error::Config(format!("{} samples cannot fill a batch of {}", data.len(), cfg.batch)));
    }
    let mut rng = Rng::new(cfg.seed).fork(0xDA7A);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut out = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        if cursor + cfg.batch > order.len() {
            order = (0..data.len()).collect();
            for i in (1..order.len()).rev() {
                order.swap(i, rng.below(i as u64 + 1) as usize);
            }
            cursor = 0;
        }
        let batch: Vec<&MotionSample> = order[cursor..cursor + cfg.batch].iter().map(|&i| &data[i]).collect();
        cursor += cfg.batch;
        let report = train_step(model, &batch, cfg, step)?;
        out.push(StepRecord { step, report });
    }
    Ok(out)
}

/// Relative fall of the mean total loss over the last five steps against the first five.
pub fn loss_drop(records: &[StepRecord]) -> Option<f64> {
    if records.len() < 10 {
        return None;
    }
    let mean = |r: &[StepRecord]| r.iter().map(|s| s.report.total as f64).sum::<f64>() / r.len() as f64;
    let first = mean(&records[..5]);
    let last = mean(&records[records.len() - 5..]);
    Some(1.0 - last / first)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub mean_tokens: f64,
    pub mean_gate: f64,
    pub task_loss: f64,
}

pub fn evaluate(model: &JointToyModel, data: &[MotionSample], budget: f32) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Parameter("empty evaluation set".into()));
    }
    let b = BudgetSignal::new(budget)?;
    let (mut correct, mut tokens, mut gate, mut loss) = (0usize, 0.0f64, 0.0f64, 0.0f64);
    for s in data {
        let mut g = Graph::inference();
        let f = model.forward(&mut g, &s.events, b)?;
        let logits = g.value(f.logits).data().to_vec();
        if crate::nn::argmax(&logits) == s.label {
            correct += 1;
        }
        tokens += g.value(f.token).item() as f64;
        gate += g.value(f.gate).item() as f64;
        let ce = cross_entropy(&mut g, f.logits, &[s.label])?;
        loss += g.value(ce).item() as f64;
    }
    let n = data.len() as f64;
    Ok(EvalReport {
        accuracy: correct as f64 / n,
        mean_tokens: tokens / n,
        mean_gate: gate / n,
        task_loss: loss / n,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepPoint {
    pub lambda1: f32,
    /// Validation mean relaxed token count, averaged over seeds.
    pub mean_tokens: f64,
    pub per_seed: Vec<f64>,
    pub loss_drop: Vec<f64>,
}

/// Trains one fresh model per `(lambda1, seed)` and reports the validation token surrogate.
pub fn lambda_sweep(task: &ToyTask, base: &TrainConfig, lambdas: &[f32], seeds: &[u64]) -> Result<Vec<SweepPoint>> {
    let data = motion_dataset(task)?;
    let mut out = Vec::with_capacity(lambdas.len());
    for &lambda1 in lambdas {
        let mut per_seed = Vec::with_capacity(seeds.len());
        let mut drops = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let cfg = TrainConfig {
                seed,
                loss: LossConfig { lambda1, ..base.loss },
                ..base.clone()
            };
            let mut model = JointToyModel::new(task.size, 8, seed)?;
            let records = train(&mut model, &data.train, &cfg)?;
            drops.push(loss_drop(&records).unwrap_or(0.0));
            per_seed.push(evaluate(&model, &data.val, cfg.budget)?.mean_tokens);
        }
        out.push(SweepPoint {
            lambda1,
            mean_tokens: per_seed.iter().sum::<f64>() / per_seed.len().max(1) as f64,
            per_seed,
            loss_drop: drops,
        });
    }
    Ok(out)
}

/// One SGD step of the similarity-threshold policy on its quality/latency loss.
pub fn tau_policy_step(policy: &mut TauPolicy, cos: &[f32], budget: f32, latency_weight: f32, lr: f32) -> Result<f32> {
    let mut g = Graph::new();
    let tau = policy.adapt_tau(&mut g, similarity_stats(cos), budget)?;
    let loss = policy_loss(&mut g, tau, cos, latency_weight)?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(Error::Numeric("tau policy loss".into()));
    }
    g.backward(loss)?;
    policy.sgd_step(&g.param_grads(), lr);
    Ok(value)
}

/// One SGD step of the echo task: each position must predict its own token.
pub fn echo_step(decoder: &mut MicroDecoder, batch: &[Vec<u32>], lr: f32) -> Result<f32> {
    let mut g = Graph::new();
    let mut total: Option<Var> = None;
    for seq in batch {
        let h = decoder.embed(&mut g, seq, 0)?;
        let logits = decoder.logits(&mut g, h, decoder.depth())?;
        let targets: Vec<usize> = seq.iter().map(|&t| t as usize).collect();
        let l = cross_entropy(&mut g, logits, &targets)?;
        total = Some(match total {
            Some(t) => g.add(t, l)?,
            None => l,
        });
    }
    let total = total.ok_or_else(|| Error::Parameter("empty batch".into()))?;
    let loss = g.scale(total, 1.0 / batch.len() as f32);
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(Error::Numeric("echo loss".into()));
    }
    g.backward(loss)?;
    decoder.sgd_step(&g.param_grads(), lr);
    Ok(value)
}

#[cfg(test)]
mod tests;
