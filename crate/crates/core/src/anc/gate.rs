//! Budget-conditioned channel gating.

use crate::error::{Error, Result};
use crate::nn::{Linear, Parameterized};
use crate::rng::Rng;
use crate::tensor::{Graph, Tensor, Var};

pub const STAGE: &str = "budget_gate";
/// Fixed slope of the budget term.
pub const BUDGET_SLOPE: f32 = 6.0;
/// A channel counts as active when its gate exceeds this.
pub const ACTIVE_CHANNEL: f32 = 0.5;

/// Compute budget clamped into `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BudgetSignal(f32);

impl BudgetSignal {
    pub fn new(b: f32) -> Result<Self> {
        if b.is_nan() {
            return Err(Error::Parameter("budget is NaN".into()));
        }
        Ok(Self(b.clamp(0.0, 1.0)))
    }

    pub fn value(self) -> f32 {
        self.0
    }
}

/// `a = sigmoid(W h_prev + bias + s (b - 0.5))`, output `a * h`.
#[derive(Debug, Clone)]
pub struct BudgetGate {
    pub linear: Linear,
}

impl BudgetGate {
    pub fn new(context: usize, channels: usize, rng: &mut Rng) -> Self {
        Self {
            linear: Linear::new("budget_gate", context, channels, rng),
        }
    }

    pub fn zeros(context: usize, channels: usize) -> Self {
        Self {
            linear: Linear::zeros("budget_gate", context, channels),
        }
    }

    /// Returns `(gated, a)` for `h_prev: [1, context]` and `h: [1, channels]`.
    pub fn forward(&self, g: &mut Graph, h_prev: Var, h: Var, b: BudgetSignal) -> Result<(Var, Var)> {
        g.with_stage(STAGE, |g| {
            let z = self.linear.forward(g, h_prev)?;
            let z = g.add_scalar(z, BUDGET_SLOPE * (b.value() - 0.5));
            let a = g.sigmoid(z);
            Ok((g.mul(a, h)?, a))
        })
    }

    /// Same gate with the budget as a graph value `[1, 1]`, so gradients reach `b`.
    /// The budget is broadcast by an outer product, which the ledger charges
    /// as a matmul; only the gradient suite uses this path.
    pub fn forward_budget_var(&self, g: &mut Graph, h_prev: Var, h: Var, b: Var) -> Result<(Var, Var)> {
        g.with_stage(STAGE, |g| {
            let z = self.linear.forward(g, h_prev)?;
            let ones = g.constant(Tensor::ones(&[1, self.linear.d_out()]));
            let bb = g.matmul(b, ones)?;
            let bb = g.scale(bb, BUDGET_SLOPE);
            let bb = g.add_scalar(bb, -0.5 * BUDGET_SLOPE);
            let z = g.add(z, bb)?;
            let a = g.sigmoid(z);
            Ok((g.mul(a, h)?, a))
        })
    }
}

pub fn active_channels(a: &Tensor) -> usize {
    a.data().iter().filter(|&&v| v > ACTIVE_CHANNEL).count()
}

impl Parameterized for BudgetGate {
    fn params(&self) -> Vec<(String, &Tensor)> {
        self.linear.params()
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.linear.params_mut()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_inputs, check_params};
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn run(gate: &BudgetGate, prev: &Tensor, h: &Tensor, b: f32) -> (Tensor, Tensor) {
        let mut g = Graph::inference();
        let p = g.constant(prev.clone());
        let x = g.constant(h.clone());
        let (y, a) = gate.forward(&mut g, p, x, BudgetSignal::new(b).unwrap()).unwrap();
        (g.value(y).clone(), g.value(a).clone())
    }

    #[test]
    fn closed_gates_zero_the_output() {
        let mut gate = BudgetGate::zeros(4, 8);
        gate.linear.bias = Tensor::full(&[1, 8], -1e4);
        let mut rng = Rng::new(1);
        let (y, _) = run(&gate, &Tensor::randn(&[1, 4], 1.0, &mut rng), &Tensor::randn(&[1, 8], 1.0, &mut rng), 1.0);
        assert!(y.data().iter().all(|v| v.abs() < 1e-30));
    }

    #[test]
    fn neutral_gate_halves_the_input() {
        let gate = BudgetGate::zeros(4, 8);
        let mut rng = Rng::new(2);
        let h = Tensor::randn(&[1, 8], 1.0, &mut rng);
        let (y, a) = run(&gate, &Tensor::randn(&[1, 4], 1.0, &mut rng), &h, 0.5);
        assert!(a.data().iter().all(|&v| v == 0.5));
        for (o, i) in y.data().iter().zip(h.data()) {
            assert_eq!(*o, i / 2.0);
        }
    }

    #[test]
    fn budget_is_clamped() {
        assert_eq!(BudgetSignal::new(3.0).unwrap().value(), 1.0);
        assert_eq!(BudgetSignal::new(-2.0).unwrap().value(), 0.0);
        assert!(BudgetSignal::new(f32::NAN).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = Rng::new(3);
        let gate = BudgetGate::new(4, 6, &mut rng);
        let prev = Tensor::randn(&[1, 4], 1.0, &mut rng);
        let h = Tensor::randn(&[1, 6], 1.0, &mut rng);
        let b = BudgetSignal::new(0.3).unwrap();
        let e = check_inputs(&[prev.clone(), h.clone()], 1e-2, |g, v| Ok(gate.forward(g, v[0], v[1], b)?.0)).unwrap();
        assert!(e < 1e-3, "inputs {e}");
        let e = check_params(&gate, 1e-2, 16, |m, g| {
            let p = g.constant(prev.clone());
            let x = g.constant(h.clone());
            Ok(m.forward(g, p, x, b)?.0)
        })
        .unwrap();
        assert!(e < 1e-3, "params {e}");
    }

    proptest! {
        #[test]
        fn active_channels_grow_with_budget(seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let gate = BudgetGate::new(4, 16, &mut rng);
            let prev = Tensor::randn(&[1, 4], 1.0, &mut rng);
            let h = Tensor::randn(&[1, 16], 1.0, &mut rng);
            let mut last = 0;
            for b in [0.0, 0.25, 0.5, 0.75, 1.0] {
                let (_, a) = run(&gate, &prev, &h, b);
                let n = active_channels(&a);
                prop_assert!(n >= last);
                last = n;
            }
        }
    }
}
