//! Cross-time token fusion and the per-layer threshold policy.

use crate::error::{Error, Result};
use crate::nn::{Linear, Parameterized};
use crate::rng::Rng;
use crate::tensor::{Graph, Tensor, Var};

use super::bank::TokenBank;

pub const STAGE: &str = "fusion";
pub const DEFAULT_TAU: f32 = 0.9;
pub const TAU_MIN: f32 = 0.7;
pub const TAU_MAX: f32 = 0.99;
/// Norms below this make the cosine 0.
pub const COS_EPS: f64 = 1e-8;
/// Temperature of the soft merge indicator in the policy loss.
pub const POLICY_TEMPERATURE: f32 = 0.05;

/// Where fusion thresholds come from.
#[derive(Clone, Debug, PartialEq)]
pub enum TauSchedule {
    /// One threshold applied to the final token bank.
    Fixed(f32),
    /// One threshold per encoder block, applied to that block's outputs.
    PerLayer(Vec<f32>),
    /// Per-block thresholds chosen by the policy network for a compute budget in `[0, 1]`.
    Policy { budget: f32 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionConfig {
    pub schedule: TauSchedule,
    pub theta_patch: f32,
    /// `[2d, 1]` gate weights over `concat(prev, curr)`.
    pub gate: Tensor,
}

impl FusionConfig {
    pub fn new(d: usize, schedule: TauSchedule) -> Self {
        Self {
            schedule,
            theta_patch: super::mask::THETA_PATCH,
            gate: Tensor::zeros(&[2 * d, 1]),
        }
    }

    /// A schedule that never merges anything.
    pub fn disabled(d: usize) -> Self {
        Self::new(d, TauSchedule::Fixed(1.01))
    }

    pub fn validate(&self, depth: usize) -> Result<()> {
        match &self.schedule {
            TauSchedule::Fixed(t) if !t.is_finite() => Err(Error::Config(format!("tau {t} not finite"))),
            TauSchedule::PerLayer(v) if v.len() != depth => Err(Error::Config(format!(
                "{} per-layer thresholds for an encoder of depth {depth}",
                v.len()
            ))),
            TauSchedule::Policy { budget } if !(0.0..=1.0).contains(budget) => {
                Err(Error::Config(format!("fusion budget {budget} outside [0, 1]")))
            }
            _ => Ok(()),
        }
    }
}

/// Cosine similarity, 0 when either norm is below [`COS_EPS`].
pub fn cosine(a: &[f32], b: &[f32]) -> f32 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        dot += x as f64 * y as f64;
        na += x as f64 * x as f64;
        nb += y as f64 * y as f64;
    }
    let (na, nb) = (na.sqrt(), nb.sqrt());
    if na < COS_EPS || nb < COS_EPS {
        0.0
    } else {
        (dot / (na * nb)) as f32
    }
}

/// Row-wise cosines between two `[k, d]` tensors, charged to the current stage.
pub fn row_cosines(g: &mut Graph, prev: &Tensor, curr: &Tensor) -> Vec<f32> {
    let (k, d) = (curr.rows(), curr.cols());
    g.charge(k * (6 * d + 3));
    (0..k).map(|i| cosine(prev.row_slice(i), curr.row_slice(i))).collect()
}

/// Population mean and standard deviation; `(0, 0)` for an empty slice.
pub fn similarity_stats(cos: &[f32]) -> (f32, f32) {
    if cos.is_empty() {
        return (0.0, 0.0);
    }
    let n = cos.len() as f64;
    let mean = cos.iter().map(|&c| c as f64).sum::<f64>() / n;
    let var = cos.iter().map(|&c| (c as f64 - mean).powi(2)).sum::<f64>() / n;
    (mean as f32, var.sqrt() as f32)
}

/// Gated merge of matching rows: rows whose cosine exceeds `tau` become
/// `prev + g * (curr - prev)` with `g = sigmoid(concat(prev, curr) . gate)`.
/// Returns the merged rows and the local indices that were merged.
pub fn fuse_rows(g: &mut Graph, prev: Var, curr: Var, tau: f32, gate: &Tensor) -> Result<(Var, Vec<usize>)> {
    let (pv, cv) = (g.value(prev).clone(), g.value(curr).clone());
    if pv.shape() != cv.shape() {
        return Err(Error::Dimension {
            op: "fuse_rows",
            lhs: pv.shape().to_vec(),
            rhs: cv.shape().to_vec(),
        });
    }
    g.with_stage(STAGE, |g| {
        let cos = row_cosines(g, &pv, &cv);
        let sel: Vec<usize> = (0..cos.len()).filter(|&i| cos[i] > tau).collect();
        if sel.is_empty() {
            return Ok((curr, sel));
        }
        let w = g.param("fusion.gate", gate);
        let p = g.gather_rows(prev, &sel)?;
        let c = g.gather_rows(curr, &sel)?;
        let cat = g.concat_cols(p, c)?;
        let logit = g.matmul(cat, w)?;
        let gv = g.sigmoid(logit);
        let diff = g.sub(c, p)?;
        let step = g.mul_col(diff, gv)?;
        let merged = g.add(p, step)?;
        Ok((g.scatter_rows(curr, &sel, merged)?, sel))
    })
}

/// Fuse the refreshed slots of `curr` with the same slots of `prev`.
pub fn fuse_tokens(
    g: &mut Graph,
    prev: &TokenBank,
    curr: &TokenBank,
    tau: f32,
    gate: &Tensor,
) -> Result<(TokenBank, usize)> {
    if prev.tokens.shape() != curr.tokens.shape() {
        return Err(Error::Dimension {
            op: "fuse_tokens",
            lhs: prev.tokens.shape().to_vec(),
            rhs: curr.tokens.shape().to_vec(),
        });
    }
    let slots = curr.refreshed();
    let mut out = curr.clone();
    if slots.is_empty() {
        return Ok((out, 0));
    }
    let p = g.constant(prev.tokens.gather_rows(&slots));
    let c = g.constant(curr.tokens.gather_rows(&slots));
    let (merged, sel) = fuse_rows(g, p, c, tau, gate)?;
    if !sel.is_empty() {
        out.tokens = curr.tokens.with_rows(&slots, g.value(merged));
        if let Some(last) = out.layers.last_mut() {
            last.outputs = out.tokens.clone();
        }
    }
    Ok((out, sel.len()))
}

/// `(mean sim, std sim, budget) -> 8 tanh units -> 1`, squashed into `[tau_min, tau_max]`.
#[derive(Debug, Clone)]
pub struct TauPolicy {
    pub fc1: Linear,
    pub fc2: Linear,
    pub tau_min: f32,
    pub tau_max: f32,
}

impl TauPolicy {
    pub const HIDDEN: usize = 8;

    pub fn new(rng: &mut Rng) -> Self {
        Self {
            fc1: Linear::new("tau_policy.fc1", 3, Self::HIDDEN, rng),
            fc2: Linear::new("tau_policy.fc2", Self::HIDDEN, 1, rng),
            tau_min: TAU_MIN,
            tau_max: TAU_MAX,
        }
    }

    pub fn zeros() -> Self {
        Self {
            fc1: Linear::zeros("tau_policy.fc1", 3, Self::HIDDEN),
            fc2: Linear::zeros("tau_policy.fc2", Self::HIDDEN, 1),
            tau_min: TAU_MIN,
            tau_max: TAU_MAX,
        }
    }

    /// Threshold as a `1x1` graph value.
    pub fn adapt_tau(&self, g: &mut Graph, stats: (f32, f32), budget: f32) -> Result<Var> {
        if !(0.0..=1.0).contains(&budget) {
            return Err(Error::Parameter(format!("budget {budget} outside [0, 1]")));
        }
        if !stats.0.is_finite() || !stats.1.is_finite() {
            return Err(Error::Parameter(format!("non-finite similarity stats {stats:?}")));
        }
        let x = g.constant(Tensor::row(&[stats.0, stats.1, budget]));
        let h = self.fc1.forward(g, x)?;
        let h = g.tanh(h);
        let o = self.fc2.forward(g, h)?;
        let s = g.sigmoid(o);
        let s = g.scale(s, self.tau_max - self.tau_min);
        Ok(g.add_scalar(s, self.tau_min))
    }

    pub fn tau(&self, stats: (f32, f32), budget: f32) -> Result<f32> {
        let mut g = Graph::inference();
        let t = self.adapt_tau(&mut g, stats, budget)?;
        Ok(g.value(t).item())
    }
}

impl Parameterized for TauPolicy {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut v = self.fc1.params();
        v.extend(self.fc2.params());
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = self.fc1.params_mut();
        v.extend(self.fc2.params_mut());
        v
    }
}

/// Latency-regularised threshold loss over one layer's similarities.
///
/// A soft merge indicator `m = sigmoid((c - tau) / T)` charges `1 - c` of
/// quality for every merged token and `latency_weight` for every token kept.
pub fn policy_loss(g: &mut Graph, tau: Var, cos: &[f32], latency_weight: f32) -> Result<Var> {
    let n = cos.len();
    let c = g.constant(Tensor::new(vec![n, 1], cos.to_vec())?);
    let neg = g.scale(tau, -1.0);
    let d = g.add_row(c, neg)?;
    let z = g.scale(d, 1.0 / POLICY_TEMPERATURE);
    let m = g.sigmoid(z);
    let dissim = g.constant(Tensor::new(vec![n, 1], cos.iter().map(|&c| 1.0 - c).collect())?);
    let q = g.mul(m, dissim)?;
    let quality = g.sum(q);
    let keep = g.scale(m, -1.0);
    let keep = g.add_scalar(keep, 1.0);
    let latency = g.sum(keep);
    let latency = g.scale(latency, latency_weight);
    g.add(quality, latency)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::gradcheck::check_params;
    use crate::sttf::bank::LayerCache;
    use proptest::prelude::*;

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

    #[test]
    fn tau_above_one_never_fuses() {
        let mut rng = Rng::new(1);
        let t = Tensor::randn(&[8, 6], 1.0, &mut rng);
        let prev = bank(t.clone(), vec![1; 8]);
        let curr = bank(t, vec![0; 8]);
        let mut g = Graph::inference();
        let (out, n) = fuse_tokens(&mut g, &prev, &curr, 1.01, &Tensor::zeros(&[12, 1])).unwrap();
        assert_eq!(n, 0);
        assert_eq!(out, curr);
    }

    #[test]
    fn identical_tokens_merge_to_the_same_value() {
        let mut rng = Rng::new(2);
        let t = Tensor::randn(&[5, 4], 1.0, &mut rng);
        let gate = Tensor::randn(&[8, 1], 1.0, &mut rng);
        let prev = bank(t.clone(), vec![3; 5]);
        let curr = bank(t.clone(), vec![0; 5]);
        let mut g = Graph::inference();
        let (out, n) = fuse_tokens(&mut g, &prev, &curr, 0.9, &gate).unwrap();
        assert_eq!(n, 5);
        assert!(out.tokens.bit_eq(&t));
    }

    #[test]
    fn merged_set_matches_brute_force_cosines() {
        let mut rng = Rng::new(3);
        let d = 4;
        let prev_t = Tensor::randn(&[40, d], 1.0, &mut rng);
        // Perturb half the rows slightly so both outcomes occur.
        let mut curr_t = Tensor::randn(&[40, d], 1.0, &mut rng);
        for i in 0..20 {
            for j in 0..d {
                curr_t.data_mut()[i * d + j] = prev_t.at2(i, j) + 0.05 * rng.normal();
            }
        }
        let stale: Vec<u32> = (0..40).map(|i| (i % 3 == 0) as u32).collect();
        let gate = Tensor::randn(&[2 * d, 1], 0.5, &mut rng);
        let prev = bank(prev_t.clone(), vec![1; 40]);
        let curr = bank(curr_t.clone(), stale.clone());
        let mut g = Graph::inference();
        let (out, n) = fuse_tokens(&mut g, &prev, &curr, 0.9, &gate).unwrap();
        let mut expected = 0;
        for i in 0..40 {
            let (a, b) = (prev_t.row_slice(i), curr_t.row_slice(i));
            let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
            let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
            let merge = stale[i] == 0 && dot / (na * nb) > 0.9;
            expected += merge as usize;
            if merge {
                let cat: Vec<f32> = a.iter().chain(b).copied().collect();
                let z: f64 = cat.iter().zip(gate.data()).map(|(x, w)| *x as f64 * *w as f64).sum();
                let gv = 1.0 / (1.0 + (-z).exp());
                for j in 0..d {
                    let want = gv * b[j] as f64 + (1.0 - gv) * a[j] as f64;
                    assert!((out.tokens.at2(i, j) as f64 - want).abs() < 1e-5);
                }
            } else {
                assert_eq!(out.tokens.row_slice(i), b);
            }
        }
        assert_eq!(n, expected);
        assert!(expected > 0 && expected < 40);
    }

    #[test]
    fn zero_norm_cosine_is_zero() {
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 2.0]), 0.0);
        assert!((cosine(&[1.0, 0.0], &[2.0, 0.0]) - 1.0).abs() < 1e-7);
    }

    #[test]
    fn zero_policy_gives_midpoint() {
        let p = TauPolicy::zeros();
        let t = p.tau((0.3, 0.1), 0.5).unwrap();
        assert!((t - 0.845).abs() < 1e-6, "{t}");
    }

    #[test]
    fn budget_outside_unit_interval_rejected() {
        let p = TauPolicy::zeros();
        assert!(matches!(p.tau((0.0, 0.0), 1.5), Err(Error::Parameter(_))));
        assert!(matches!(p.tau((0.0, 0.0), -0.1), Err(Error::Parameter(_))));
    }

    #[test]
    fn policy_loss_gradient_matches_finite_differences() {
        let mut rng = Rng::new(11);
        let policy = TauPolicy::new(&mut rng);
        let cos: Vec<f32> = (0..16).map(|_| rng.range(0.6, 1.0)).collect();
        let err = check_params(&policy, 1e-2, 8, |p, g| {
            let tau = p.adapt_tau(g, similarity_stats(&cos), 0.4)?;
            policy_loss(g, tau, &cos, 0.3)
        })
        .unwrap();
        assert!(err < 1e-3, "relative error {err}");
    }

    proptest! {
        #[test]
        fn tau_stays_in_range(seed in any::<u64>(), mean in -1.0f32..1.0, std in 0.0f32..1.0, budget in 0.0f32..=1.0) {
            let mut rng = Rng::new(seed);
            let mut p = TauPolicy::new(&mut rng);
            for (_, t) in p.params_mut() {
                for v in t.data_mut() {
                    *v *= 20.0;
                }
            }
            let t = p.tau((mean, std), budget).unwrap();
            prop_assert!((TAU_MIN..=TAU_MAX).contains(&t));
        }
    }
}
