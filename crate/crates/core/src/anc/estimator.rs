//! Event-driven scene complexity estimator.

use crate::error::{Error, Result};
use crate::events::{EventFrame, COUNT_KAPPA};
use crate::nn::{Conv2d, Linear, Parameterized};
use crate::rng::Rng;
use crate::tensor::{Graph, Tensor, Var};

use super::K;

pub const STAGE: &str = "complexity_estimator";
/// Slope of the calibrated output layer.
pub const CALIBRATION_SLOPE: f32 = 30.0;

/// Softmax scores over the three complexity levels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ComplexityScores {
    pub p: [f32; K],
}

impl ComplexityScores {
    pub fn new(p: [f32; K]) -> Result<Self> {
        let sum: f32 = p.iter().sum();
        if p.iter().any(|&v| !(v > 0.0 && v <= 1.0)) || (sum - 1.0).abs() > 1e-5 {
            return Err(Error::Parameter(format!("complexity scores {p:?} are not a positive distribution")));
        }
        Ok(Self { p })
    }

    /// Most likely level; ties go to the lower level.
    pub fn level(&self) -> usize {
        crate::nn::argmax(&self.p)
    }
}

/// Strided conv, tanh, global average pool, linear, softmax.
#[derive(Debug, Clone)]
pub struct ComplexityEstimator {
    pub conv: Conv2d,
    pub head: Linear,
}

/// Graph values produced by the estimator.
pub struct EstimatorOutput {
    /// `[1, HIDDEN]` pooled features.
    pub pooled: Var,
    /// `[1, K]` log-probabilities.
    pub log_p: Var,
    pub scores: ComplexityScores,
}

impl ComplexityEstimator {
    pub const HIDDEN: usize = 4;

    pub fn new(rng: &mut Rng) -> Self {
        Self {
            conv: Conv2d::new("estimator.conv", 2, Self::HIDDEN, 3, 2, 1, rng),
            head: Linear::new("estimator.head", Self::HIDDEN, K, rng),
        }
    }

    /// Estimator whose first pooled feature tracks event density.
    ///
    /// Channel 0 sums both polarities at the centre tap, so its pooled value
    /// runs from 0 on a silent frame to `tanh(2)` on a saturated one. The
    /// head scores the levels `[-s f + c1, 0, s f - c2]` with `c1` and `c2`
    /// placing the level boundaries at one and two thirds of saturation.
    pub fn calibrated() -> Self {
        let mut w = Tensor::zeros(&[Self::HIDDEN, 2, 3, 3]);
        w.data_mut()[4] = 1.0;
        w.data_mut()[9 + 4] = 1.0;
        let sat = 2.0f32.tanh();
        let s = CALIBRATION_SLOPE;
        let mut hw = Tensor::zeros(&[Self::HIDDEN, K]);
        hw.data_mut()[0] = -s;
        hw.data_mut()[2] = s;
        Self {
            conv: Conv2d {
                name: "estimator.conv".into(),
                weight: w,
                bias: Tensor::zeros(&[Self::HIDDEN, 1]),
                stride: 2,
                pad: 1,
            },
            head: Linear {
                name: "estimator.head".into(),
                weight: hw,
                bias: Tensor::row(&[s * sat / 3.0, 0.0, -s * 2.0 * sat / 3.0]),
            },
        }
    }

    /// Runs on a normalised `[2, H, W]` event input.
    pub fn forward(&self, g: &mut Graph, input: Var) -> Result<EstimatorOutput> {
        g.with_stage(STAGE, |g| {
            let h = self.conv.forward(g, input)?;
            let h = g.tanh(h);
            let shape = g.value(h).shape().to_vec();
            let flat = g.reshape(h, &[shape[0], shape[1] * shape[2]])?;
            let cols = g.transpose(flat)?;
            let pooled = g.mean_rows(cols)?;
            let logits = self.head.forward(g, pooled)?;
            let log_p = g.log_softmax_rows(logits)?;
            let p = g.softmax_rows(logits)?;
            let v = g.value(p).data();
            let scores = ComplexityScores::new([v[0], v[1], v[2]])
                .map_err(|_| Error::Numeric(format!("complexity scores {v:?}")))?;
            Ok(EstimatorOutput { pooled, log_p, scores })
        })
    }
}

/// Normalised event input after checking the frame size.
pub fn event_input(g: &mut Graph, e: &EventFrame, height: usize, width: usize) -> Result<Var> {
    if e.height() != height || e.width() != width {
        return Err(Error::Config(format!(
            "event frame {}x{} does not match model input {width}x{height}",
            e.width(),
            e.height()
        )));
    }
    Ok(g.constant(e.normalized(COUNT_KAPPA)))
}

pub fn estimate_complexity(g: &mut Graph, est: &ComplexityEstimator, e: &EventFrame, height: usize, width: usize) -> Result<ComplexityScores> {
    let x = event_input(g, e, height, width)?;
    Ok(est.forward(g, x)?.scores)
}

impl Parameterized for ComplexityEstimator {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut v = self.conv.params();
        v.extend(self.head.params());
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = self.conv.params_mut();
        v.extend(self.head.params_mut());
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn frame(fill: f32) -> EventFrame {
        let mut f = EventFrame::empty(32, 32, (0, 1));
        f.counts.data_mut().fill(fill);
        f
    }

    #[test]
    fn calibrated_levels_follow_event_density() {
        let est = ComplexityEstimator::calibrated();
        let mut g = Graph::inference();
        let silent = estimate_complexity(&mut g, &est, &frame(0.0), 32, 32).unwrap();
        assert_eq!(silent.level(), 0);
        let busy = estimate_complexity(&mut g, &est, &frame(3.0), 32, 32).unwrap();
        assert_eq!(busy.level(), 2);
        // Half of saturation sits between the two boundaries.
        let mut half = EventFrame::empty(32, 32, (0, 1));
        for (i, v) in half.counts.data_mut().iter_mut().enumerate() {
            // every other sampled row (stride 2 samples even rows) is saturated
            if (i / 32) % 4 == 0 {
                *v = 3.0;
            }
        }
        let mid = estimate_complexity(&mut g, &est, &half, 32, 32).unwrap();
        assert_eq!(mid.level(), 1, "{:?}", mid.p);
        assert!(g.ledger().get(STAGE) > 0);
    }

    #[test]
    fn scores_sum_to_one_for_random_weights() {
        let mut rng = Rng::new(4);
        let est = ComplexityEstimator::new(&mut rng);
        let mut f = EventFrame::empty(16, 16, (0, 1));
        for v in f.counts.data_mut() {
            *v = rng.below(4) as f32;
        }
        let s = estimate_complexity(&mut Graph::inference(), &est, &f, 16, 16).unwrap();
        assert!((s.p.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn wrong_frame_size_is_config_error() {
        let est = ComplexityEstimator::calibrated();
        let err = estimate_complexity(&mut Graph::inference(), &est, &frame(0.0), 64, 64).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
