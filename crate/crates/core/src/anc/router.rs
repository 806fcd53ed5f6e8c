//! Gumbel-Softmax routing over the encoder branches.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Graph, Tensor, Var};

use super::estimator::ComplexityScores;
use super::K;

pub const STAGE: &str = "router";
pub const DEFAULT_TEMPERATURE: f32 = 0.5;
/// Branches with a weight strictly above this execute.
pub const ACTIVE_THRESHOLD: f32 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RouteMode {
    /// Deterministic `softmax(log p / T)`.
    Infer,
    /// `softmax((log p + g) / T)` with Gumbel noise drawn from `seed`.
    Train { seed: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoutingDecision {
    pub w: [f32; K],
    /// Ascending indices with `w_i > ACTIVE_THRESHOLD`.
    pub active: Vec<usize>,
    pub temperature: f32,
    pub noise_seed: u64,
}

impl RoutingDecision {
    pub fn from_weights(w: [f32; K], temperature: f32, noise_seed: u64) -> Self {
        let active = (0..K).filter(|&i| w[i] > ACTIVE_THRESHOLD).collect::<Vec<_>>();
        // With three weights summing to one the largest is at least 1/3.
        assert!(!active.is_empty(), "routing weights {w:?} activate no branch");
        Self {
            w,
            active,
            temperature,
            noise_seed,
        }
    }
}

pub fn gumbel_noise(seed: u64) -> [f32; K] {
    let mut rng = Rng::new(seed);
    [rng.gumbel(), rng.gumbel(), rng.gumbel()]
}

/// Routing weights as a `[1, K]` graph value, differentiable in `log_p`.
pub fn route(g: &mut Graph, log_p: Var, temperature: f32, noise: Option<[f32; K]>) -> Result<Var> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::Parameter(format!("temperature {temperature} must be positive")));
    }
    g.with_stage(STAGE, |g| {
        let mut z = log_p;
        if let Some(n) = noise {
            let n = g.constant(Tensor::row(&n));
            z = g.add(z, n)?;
        }
        let z = g.scale(z, 1.0 / temperature);
        g.softmax_rows(z)
    })
}

/// Hard one-hot forward value with the soft weights' gradient.
pub fn straight_through(g: &mut Graph, w: Var) -> Result<Var> {
    let v = g.value(w).data().to_vec();
    let mut hard = vec![0.0; v.len()];
    hard[crate::nn::argmax(&v)] = 1.0;
    g.with_stage(STAGE, |g| {
        let h = g.constant(Tensor::row(&hard));
        let d = g.sub(h, w)?;
        let d = g.detach(d);
        g.add(w, d)
    })
}

pub fn gumbel_route(p: &ComplexityScores, temperature: f32, mode: RouteMode) -> Result<RoutingDecision> {
    let mut g = Graph::inference();
    let log_p: Vec<f32> = p.p.iter().map(|v| v.ln()).collect();
    let lp = g.constant(Tensor::row(&log_p));
    let (noise, seed) = match mode {
        RouteMode::Infer => (None, 0),
        RouteMode::Train { seed } => (Some(gumbel_noise(seed)), seed),
    };
    let w = route(&mut g, lp, temperature, noise)?;
    let v = g.value(w).data();
    Ok(RoutingDecision::from_weights([v[0], v[1], v[2]], temperature, seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_inputs;
    use proptest::prelude::*;

    #[test]
    fn uniform_scores_route_uniformly() {
        let p = ComplexityScores::new([1.0 / 3.0; 3]).unwrap();
        let d = gumbel_route(&p, 0.5, RouteMode::Infer).unwrap();
        for w in d.w {
            assert!((w - 1.0 / 3.0).abs() < 1e-6);
        }
        assert_eq!(d.active, vec![0, 1, 2]);
    }

    #[test]
    fn low_temperature_is_nearly_hard() {
        let p = ComplexityScores::new([0.98, 0.01, 0.01]).unwrap();
        let d = gumbel_route(&p, 0.01, RouteMode::Infer).unwrap();
        assert!(d.w.iter().cloned().fold(0.0, f32::max) >= 0.99);
        assert_eq!(d.active, vec![0]);
    }

    #[test]
    fn non_positive_temperature_rejected() {
        let p = ComplexityScores::new([0.2, 0.3, 0.5]).unwrap();
        assert!(matches!(gumbel_route(&p, 0.0, RouteMode::Infer), Err(Error::Parameter(_))));
        assert!(matches!(gumbel_route(&p, -1.0, RouteMode::Infer), Err(Error::Parameter(_))));
    }

    #[test]
    fn train_mode_gradient_matches_finite_differences() {
        let noise = gumbel_noise(77);
        let p = Tensor::row(&[0.5, 0.3, 0.2]);
        let err = check_inputs(&[p], 1e-2, |g, v| {
            let lp = g.log(v[0]);
            route(g, lp, 0.5, Some(noise))
        })
        .unwrap();
        assert!(err < 1e-3, "relative error {err}");
    }

    #[test]
    fn train_mode_is_seed_deterministic() {
        let p = ComplexityScores::new([0.2, 0.3, 0.5]).unwrap();
        let a = gumbel_route(&p, 0.5, RouteMode::Train { seed: 5 }).unwrap();
        let b = gumbel_route(&p, 0.5, RouteMode::Train { seed: 5 }).unwrap();
        assert_eq!(a, b);
        let infer = gumbel_route(&p, 0.5, RouteMode::Infer).unwrap();
        assert_ne!(a.w, infer.w);
    }

    #[test]
    fn straight_through_is_hard_forward_soft_backward() {
        let mut g = Graph::new();
        let lp = g.variable(Tensor::row(&[-0.5f32, -1.0, -2.0]));
        let w = route(&mut g, lp, 0.5, None).unwrap();
        let st = straight_through(&mut g, w).unwrap();
        let v = g.value(st).data().to_vec();
        assert!((v[0] - 1.0).abs() < 1e-6 && v[1].abs() < 1e-6 && v[2].abs() < 1e-6);
        let picked = g.slice_cols(st, 0, 1).unwrap();
        let s = g.sum(picked);
        g.backward(s).unwrap();
        assert!(g.grad(lp).unwrap().data().iter().any(|&x| x != 0.0));
    }

    proptest! {
        #[test]
        fn weights_sum_to_one_and_activate_a_branch(a in 0.01f32..1.0, b in 0.01f32..1.0, c in 0.01f32..1.0,
                                                     t in 0.05f32..2.0, seed in any::<u64>(), train in any::<bool>()) {
            let s = a + b + c;
            let mut p = [a / s, b / s, c / s];
            p[2] = 1.0 - p[0] - p[1];
            prop_assume!(p[2] > 0.0);
            let p = ComplexityScores::new(p).unwrap();
            let mode = if train { RouteMode::Train { seed } } else { RouteMode::Infer };
            let d = gumbel_route(&p, t, mode).unwrap();
            prop_assert!((d.w.iter().sum::<f32>() - 1.0).abs() < 1e-6);
            prop_assert!(!d.active.is_empty());
            for i in 0..3 {
                prop_assert_eq!(d.active.contains(&i), d.w[i] > ACTIVE_THRESHOLD);
            }
        }
    }
}
