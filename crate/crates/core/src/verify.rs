//! Oracle suite behind the `verify` command.
//!
//! Each check returns its measured value next to the tolerance it was held
//! to. Checks are sized to run in seconds on a CPU.

use std::collections::BTreeMap;
use std::path::Path;

use crate::anc::{anc_step, branch_forward, patch_features, route, AncConfig, AncModel, BudgetGate, BudgetSignal, RouteMode, LEVEL_NAMES};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{Mode, RunConfig, SynthOptions};
use crate::error::{Error, Result};
use crate::events::{read_stream, synth_stream, write_stream, EventFrame, SynthSceneConfig};
use crate::nn::Parameterized;
use crate::rng::Rng;
use crate::sttf::bank::LayerCache;
use crate::sttf::encoder::STAGE as ENCODER_STAGE;
use crate::sttf::fusion::fuse_rows;
use crate::sttf::{extract_active_patches, fuse_tokens, ChangeMask, SparseEncoder, SttfConfig, SttfModel, SttfSession, TokenBank};
use crate::tensor::{max_rel_error, Graph, Tensor};
use crate::train::{check_router, grad_check_all, GRAD_TOLERANCE};

pub const DENSE_TOLERANCE: f64 = 1e-5;
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-6;
pub const LOW_TEMPERATURE: f32 = 0.01;
pub const LOW_TEMPERATURE_MIN_WEIGHT: f32 = 0.99;
const PROMPT: [u32; 4] = [3, 14, 15, 92];

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub tolerance: String,
    pub measured: String,
    pub passed: bool,
}

impl CheckResult {
    fn new(name: &'static str, tolerance: impl Into<String>, measured: impl Into<String>, passed: bool) -> Self {
        Self {
            name,
            tolerance: tolerance.into(),
            measured: measured.into(),
            passed,
        }
    }

    /// Turns an error inside a check into a failed result.
    fn from_error(name: &'static str, e: Error) -> Self {
        Self::new(name, "-", format!("error: {e}"), false)
    }
}

impl std::fmt::Display for CheckResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {:<22} measured {} (tolerance {})",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.measured,
            self.tolerance
        )
    }
}

#[derive(Clone, Debug, Default)]
pub struct VerifySummary {
    pub checks: Vec<CheckResult>,
}

impl VerifySummary {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failing(&self) -> Vec<&'static str> {
        self.checks.iter().filter(|c| !c.passed).map(|c| c.name).collect()
    }
}

/// Selective update with every slot active against a full dense encode,
/// over `seeds` random shapes.
pub fn dense_equivalence(seeds: usize) -> Result<CheckResult> {
    let mut worst = 0.0f64;
    for s in 0..seeds as u64 {
        let mut rng = Rng::new(1000 + s);
        let patch = [4, 8][rng.below(2) as usize];
        let (gh, gw) = (2 + rng.below(4) as usize, 2 + rng.below(4) as usize);
        let (h, w) = (gh * patch, gw * patch);
        let d = [8, 16][rng.below(2) as usize];
        let depth = 1 + rng.below(3) as usize;
        let enc = SparseEncoder::new(h, w, patch, d, depth, 2, &mut rng)?;
        let a = Tensor::uniform(&[3, h, w], 0.0, 1.0, &mut rng);
        let b = Tensor::uniform(&[3, h, w], 0.0, 1.0, &mut rng);
        let prev = enc.full_encode(&mut Graph::inference(), &a, 0)?;
        let all = extract_active_patches(&b, &ChangeMask::uniform(h, w, patch, true)?, patch)?;
        let (next, _) = enc.selective_update(&mut Graph::inference(), &all, &prev, None)?;
        let dense = enc.full_encode(&mut Graph::inference(), &b, 1)?;
        worst = worst.max(max_rel_error(next.tokens.data(), dense.tokens.data()));
        for (l, r) in next.layers.iter().zip(&dense.layers) {
            worst = worst.max(max_rel_error(l.outputs.data(), r.outputs.data()));
        }
    }
    Ok(CheckResult::new(
        "dense_equivalence",
        format!("max rel error < {DENSE_TOLERANCE:.0e} over {seeds} shapes"),
        format!("{worst:.3e}"),
        worst < DENSE_TOLERANCE,
    ))
}

/// A silent frame after a real one keeps the bank bit-identical and spends
/// nothing in the sparse encoder.
pub fn cache_exactness() -> Result<CheckResult> {
    let model = SttfModel::new(SttfConfig::fast(), 11)?;
    let scene = synth_stream(&SynthSceneConfig {
        height: 64,
        width: 64,
        patch: 8,
        frames: 3,
        activity_fraction: 0.2,
        object_size: 10,
        ..SynthSceneConfig::desk()
    })?;
    let mut session = SttfSession::new();
    session.step(&model, &scene.rgb[0], &scene.frames[0], &PROMPT, 2)?;
    session.step(&model, &scene.rgb[1], &scene.frames[1], &PROMPT, 2)?;
    let before = session.state.clone().expect("state after a step");
    let silent = EventFrame::empty(64, 64, (0, 1));
    let out = session.step(&model, &scene.rgb[2], &silent, &PROMPT, 2)?;
    let same_layers = out.state.layers.len() == before.layers.len()
        && out.state.layers.iter().zip(&before.layers).all(|(a, b)| {
            a.keys.bit_eq(&b.keys) && a.values.bit_eq(&b.values) && a.outputs.bit_eq(&b.outputs)
        });
    let identical = out.state.tokens.bit_eq(&before.tokens) && same_layers;
    let flops = out.metrics.flops.get(ENCODER_STAGE);
    Ok(CheckResult::new(
        "cache_exactness",
        "bit-identical bank, 0 encoder FLOPs",
        format!("identical={identical}, encoder FLOPs {flops}"),
        identical && flops == 0,
    ))
}

/// Random distribution over three levels with every entry at least `floor`.
fn random_p(rng: &mut Rng, floor: f32) -> [f32; 3] {
    let raw = [rng.uniform_f32() + floor, rng.uniform_f32() + floor, rng.uniform_f32() + floor];
    let s: f32 = raw.iter().sum();
    [raw[0] / s, raw[1] / s, raw[2] / s]
}

fn infer_weights(p: [f32; 3], temperature: f32) -> Result<[f32; 3]> {
    let mut g = Graph::inference();
    let lp = g.constant(Tensor::row(&p.map(f32::ln)));
    let w = route(&mut g, lp, temperature, None)?;
    let v = g.value(w).data();
    Ok([v[0], v[1], v[2]])
}

/// Infer-mode weights sum to one, and a near-zero temperature is nearly hard.
pub fn router_weights(count: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = Rng::new(seed);
    let mut worst = 0.0f64;
    for _ in 0..count {
        let w = infer_weights(random_p(&mut rng, 1e-3), 0.5)?;
        let sum: f64 = w.iter().map(|&v| v as f64).sum();
        worst = worst.max((sum - 1.0).abs());
    }
    let cold = infer_weights([0.98, 0.01, 0.01], LOW_TEMPERATURE)?;
    let top = cold.iter().copied().fold(0.0f32, f32::max);
    Ok(CheckResult::new(
        "router_weights",
        format!("|sum - 1| <= {WEIGHT_SUM_TOLERANCE:.0e} on {count}; max w >= {LOW_TEMPERATURE_MIN_WEIGHT} at T={LOW_TEMPERATURE}"),
        format!("{worst:.3e}; {top}"),
        worst <= WEIGHT_SUM_TOLERANCE && top >= LOW_TEMPERATURE_MIN_WEIGHT,
    ))
}

/// Train-mode router gradient against finite differences on random instances.
pub fn router_gradients(count: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = Rng::new(seed);
    let mut worst = 0.0f64;
    for _ in 0..count {
        let p = random_p(&mut rng, 0.05);
        let noise = [rng.gumbel(), rng.gumbel(), rng.gumbel()];
        worst = worst.max(check_router(&Tensor::row(&p.map(f32::ln)), noise)?);
    }
    Ok(CheckResult::new(
        "router_gradients",
        format!("rel error < {GRAD_TOLERANCE:.0e} on {count}"),
        format!("{worst:.3e}"),
        worst < GRAD_TOLERANCE,
    ))
}

/// Random event frame with a random fraction of busy pixels.
fn random_events(size: usize, rng: &mut Rng) -> EventFrame {
    let mut f = EventFrame::empty(size, size, (0, 1));
    let busy = rng.uniform_f32();
    for v in f.counts.data_mut() {
        if rng.uniform_f32() < busy {
            *v = (1 + rng.below(4)) as f32;
        }
    }
    f
}

/// Per frame: inactive branches execute nothing, re-randomising them leaves
/// the mixed features and the output untouched, and `F` matches the ledger
/// and the weighted closed form to the unit.
pub fn sparse_activation(frames: usize, seed: u64) -> Result<CheckResult> {
    let cfg = AncConfig::fast();
    let model = AncModel::new(cfg.clone(), seed)?;
    let analytic = cfg.branch_flops();
    let budget = BudgetSignal::new(1.0)?;
    let mut rng = Rng::new(seed ^ 0x5eed);
    let mut failures = Vec::new();
    let mut skipped = 0usize;
    for f in 0..frames {
        let image = Tensor::uniform(&[3, 64, 64], 0.0, 1.0, &mut rng);
        let events = random_events(64, &mut rng);
        let mode = if f % 2 == 0 { RouteMode::Infer } else { RouteMode::Train { seed: f as u64 } };
        let step = anc_step(&model, &image, &events, &PROMPT, budget, mode, 2)?;
        let m = &step.metrics;
        let mut expected = 0u64;
        for i in 0..3 {
            let stage = format!("branch_{}", LEVEL_NAMES[i]);
            let active = m.routing.active.contains(&i);
            let ran = m.executed.get(&stage);
            if active {
                expected += (m.routing.w[i] as f64 * analytic[i] as f64).round() as u64;
                if ran != analytic[i] {
                    failures.push(format!("frame {f}: {stage} ran {ran}, closed form {}", analytic[i]));
                }
            } else if ran != 0 || m.ledger.get(&stage) != 0 {
                failures.push(format!("frame {f}: inactive {stage} cost {ran}"));
            }
        }
        for (stage, &v) in m.ledger.entries() {
            if !stage.starts_with("branch_") {
                expected += v;
            }
        }
        if step.flops != m.ledger.total() || step.flops != expected {
            failures.push(format!("frame {f}: F {} vs ledger {} vs closed form {expected}", step.flops, m.ledger.total()));
        }
        if m.routing.active.len() == 3 {
            skipped += 1;
            continue;
        }
        let mut ablated = model.clone();
        let mut other = Rng::new(seed.wrapping_add(f as u64 + 1));
        for i in (0..3).filter(|i| !m.routing.active.contains(i)) {
            for (_, t) in ablated.branches[i].params_mut() {
                *t = Tensor::randn(t.shape(), 1.0, &mut other);
            }
        }
        let feats = patch_features(&image, &events, cfg.patch)?;
        let z = |model: &AncModel| -> Result<Tensor> {
            let mut g = Graph::inference();
            let p = g.constant(feats.clone());
            let w = g.constant(Tensor::row(&m.routing.w));
            let z = branch_forward(&mut g, &model.branches, p, w, &m.routing)?;
            Ok(g.value(z).clone())
        };
        let again = anc_step(&ablated, &image, &events, &PROMPT, budget, mode, 2)?;
        if !z(&model)?.bit_eq(&z(&ablated)?) || again != step {
            failures.push(format!("frame {f}: inactive branches perturbed the result"));
        }
    }
    Ok(CheckResult::new(
        "sparse_activation",
        format!("exact on {frames} frames"),
        match failures.first() {
            None => format!("0 mismatches ({} all-active frames without ablation)", skipped),
            Some(first) => format!("{} mismatches, first: {first}", failures.len()),
        },
        failures.is_empty(),
    ))
}

pub const BUDGET_GRID: [f32; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

/// Active-channel counts never fall as the budget rises.
pub fn budget_monotonicity(inputs: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = Rng::new(seed);
    let (context, channels) = (16, 32);
    let gate = BudgetGate::new(context, channels, &mut rng);
    let mut violations = 0;
    for _ in 0..inputs {
        let h_prev = Tensor::randn(&[1, context], 1.0, &mut rng);
        let h = Tensor::randn(&[1, channels], 1.0, &mut rng);
        let mut last = 0;
        for b in BUDGET_GRID {
            let mut g = Graph::inference();
            let (hp, hv) = (g.constant(h_prev.clone()), g.constant(h.clone()));
            let (_, a) = gate.forward(&mut g, hp, hv, BudgetSignal::new(b)?)?;
            let n = crate::anc::active_channels(g.value(a));
            if n < last {
                violations += 1;
            }
            last = n;
        }
    }
    Ok(CheckResult::new(
        "budget_monotonicity",
        format!("0 violations over {inputs} inputs"),
        format!("{violations} violations"),
        violations == 0,
    ))
}

fn bank(tokens: Tensor, stale: Vec<u32>) -> TokenBank {
    let n = tokens.rows();
    TokenBank {
        layers: vec![LayerCache {
            keys: tokens.clone(),
            values: tokens.clone(),
            outputs: tokens.clone(),
        }],
        tokens,
        stale_age: stale,
        frame_index: 1,
        grid: (1, n),
    }
}

fn cosine64(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    if na * nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// `tau > 1` never merges, identical tokens merge to themselves, and the
/// merged set agrees with a float64 cosine oracle.
pub fn fusion_properties(frames: usize, banks: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = Rng::new(seed);
    let (n, d) = (24, 8);
    let mut failures = Vec::new();
    for f in 0..frames {
        let gate = Tensor::randn(&[2 * d, 1], 1.0, &mut rng);
        let prev = bank(Tensor::randn(&[n, d], 1.0, &mut rng), vec![1; n]);
        let stale = (0..n).map(|_| rng.below(2) as u32).collect();
        let curr = bank(Tensor::randn(&[n, d], 1.0, &mut rng), stale);
        let (out, count) = fuse_tokens(&mut Graph::inference(), &prev, &curr, 1.01, &gate)?;
        if count != 0 || out != curr {
            failures.push(format!("tau 1.01 changed frame {f}"));
        }
        let (out, count) = fuse_tokens(&mut Graph::inference(), &bank(curr.tokens.clone(), vec![1; n]), &curr, 0.9, &gate)?;
        if count != curr.refreshed().len() || !out.tokens.bit_eq(&curr.tokens) {
            failures.push(format!("identical tokens did not merge exactly on frame {f}"));
        }
    }
    for b in 0..banks {
        let prev = Tensor::randn(&[n, d], 1.0, &mut rng);
        let mut curr = Tensor::randn(&[n, d], 1.0, &mut rng);
        // Nudge a random subset towards prev so both outcomes occur.
        for i in 0..n {
            if rng.below(2) == 0 {
                let scale = rng.range(0.01, 0.6);
                for j in 0..d {
                    curr.data_mut()[i * d + j] = prev.at2(i, j) + scale * rng.normal();
                }
            }
        }
        let gate = Tensor::randn(&[2 * d, 1], 1.0, &mut rng);
        let mut g = Graph::inference();
        let (p, c) = (g.constant(prev.clone()), g.constant(curr.clone()));
        let (_, sel) = fuse_rows(&mut g, p, c, 0.9, &gate)?;
        let want: Vec<usize> = (0..n).filter(|&i| cosine64(prev.row_slice(i), curr.row_slice(i)) > 0.9).collect();
        if sel != want {
            failures.push(format!("bank {b}: merged {sel:?}, oracle {want:?}"));
        }
    }
    Ok(CheckResult::new(
        "fusion_properties",
        format!("exact on {frames} frames and {banks} banks"),
        match failures.first() {
            None => "0 mismatches".to_string(),
            Some(first) => format!("{} mismatches, first: {first}", failures.len()),
        },
        failures.is_empty(),
    ))
}

pub fn gradient_suite(seed: u64) -> Result<CheckResult> {
    let r = grad_check_all(seed)?;
    let worst = r.entries.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error));
    Ok(CheckResult::new(
        "gradient_suite",
        format!("rel error < {GRAD_TOLERANCE:.0e} on {} components", r.entries.len()),
        match worst {
            Some(e) => format!("{:.3e} ({})", e.max_rel_error, e.component),
            None => "no components".into(),
        },
        r.ensure(GRAD_TOLERANCE).is_ok(),
    ))
}

/// EVS1, checkpoint and session-state bytes survive a decode/encode cycle.
pub fn format_roundtrips(seed: u64) -> Result<CheckResult> {
    let scene = synth_stream(&SynthSceneConfig {
        height: 64,
        width: 64,
        patch: 8,
        frames: 4,
        activity_fraction: 0.2,
        object_size: 10,
        seed,
        ..SynthSceneConfig::desk()
    })?;
    let evs = write_stream(&scene.event_stream());
    let evs_ok = write_stream(&read_stream(&evs)?) == evs;
    let model = SttfModel::new(SttfConfig::fast(), seed)?;
    let ckpt = save_checkpoint(&model.state_dict())?;
    let mut loaded = SttfModel::new(SttfConfig::fast(), seed.wrapping_add(1))?;
    loaded.load_state_dict(&load_checkpoint(&ckpt)?)?;
    let ckpt_ok = save_checkpoint(&loaded.state_dict())? == ckpt;
    let mut session = SttfSession::new();
    session.step(&model, &scene.rgb[0], &scene.frames[0], &PROMPT, 1)?;
    let state = session.save_state()?;
    let state_ok = SttfSession::load_state(&state)?.save_state()? == state;
    Ok(CheckResult::new(
        "format_roundtrips",
        "byte-identical",
        format!("evs1={evs_ok}, checkpoint={ckpt_ok}, session={state_ok}"),
        evs_ok && ckpt_ok && state_ok,
    ))
}

/// Two runs of the same small configuration give identical report bytes.
pub fn report_determinism(seed: u64) -> Result<CheckResult> {
    let mut results = BTreeMap::new();
    for mode in [Mode::Sttf, Mode::Anc] {
        let cfg = RunConfig {
            seed,
            synth: Some(SynthOptions {
                preset: Some("dvs128".into()),
                frames: Some(4),
                activity: Some(0.15),
                seed: Some(seed),
                ..Default::default()
            }),
            ..RunConfig::new(mode)
        };
        let a = crate::run::run(&cfg)?.report;
        let b = crate::run::run(&cfg)?.report;
        a.validate()?;
        let same = a.to_json()? == b.to_json()? && a.csv_string()? == b.csv_string()?;
        results.insert(mode.to_string(), same);
    }
    Ok(CheckResult::new(
        "report_determinism",
        "byte-identical JSON and CSV",
        format!("{results:?}"),
        results.values().all(|&v| v),
    ))
}

/// Every check with its default size. A checkpoint, when given, must parse
/// before anything else runs.
pub fn verify(checkpoint: Option<&Path>, seed: u64) -> Result<VerifySummary> {
    if let Some(p) = checkpoint {
        let bytes = std::fs::read(p)?;
        let map = load_checkpoint(&bytes)?;
        if save_checkpoint(&map)? != bytes {
            return Err(Error::Corrupt(format!("{} does not re-encode to the same bytes", p.display())));
        }
    }
    type Check = (&'static str, Box<dyn Fn() -> Result<CheckResult>>);
    let checks: Vec<Check> = vec![
        ("dense_equivalence", Box::new(|| dense_equivalence(20))),
        ("cache_exactness", Box::new(cache_exactness)),
        ("router_weights", Box::new(move || router_weights(1000, seed))),
        ("router_gradients", Box::new(move || router_gradients(50, seed))),
        ("sparse_activation", Box::new(move || sparse_activation(20, seed))),
        ("budget_monotonicity", Box::new(move || budget_monotonicity(100, seed))),
        ("fusion_properties", Box::new(move || fusion_properties(100, 50, seed))),
        ("gradient_suite", Box::new(move || gradient_suite(seed))),
        ("format_roundtrips", Box::new(move || format_roundtrips(seed))),
        ("report_determinism", Box::new(move || report_determinism(seed))),
    ];
    Ok(VerifySummary {
        checks: checks
            .into_iter()
            .map(|(name, f)| f().unwrap_or_else(|e| CheckResult::from_error(name, e)))
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_suite_passes() {
        let s = verify(None, 0).unwrap();
        for c in &s.checks {
            eprintln!("{c}");
        }
        assert!(s.passed(), "failing: {:?}", s.failing());
        assert_eq!(s.checks.len(), 10);
    }

    #[test]
    fn corrupt_checkpoint_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"TGVM\x01\x00\x00\x00\x05\x00").unwrap();
        assert!(matches!(verify(Some(&path), 0), Err(Error::Corrupt(_))));
    }

    #[test]
    fn failing_check_is_named() {
        let c = CheckResult::from_error("x", Error::Parameter("boom".into()));
        let s = VerifySummary { checks: vec![c] };
        assert!(!s.passed());
        assert_eq!(s.failing(), vec!["x"]);
    }
}
