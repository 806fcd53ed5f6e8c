//! Central finite-difference gradient checks.
//!
//! The function under test may return a tensor of any shape; it is reduced to a
//! scalar by a fixed random projection `L = Σ w_i y_i`. The analytic side
//! backpropagates that projection through the graph, the numeric side evaluates
//! it in f64 so the oracle adds no float32 summation noise of its own. The
//! numeric derivative is a Richardson-extrapolated central difference, so its
//! truncation error is fourth order in the step.
//!
//! Relative error of a gradient is `max_j |a_j - n_j| / max(max|a|, max|n|)`,
//! the worst absolute deviation scaled by the gradient's magnitude, taken over
//! every probed entry of every input or parameter at once. Per-entry and
//! per-tensor ratios are meaningless where the true gradient is exactly zero
//! (a key bias under softmax, for one), so the scale is shared.

use crate::error::Result;
use crate::nn::Parameterized;
use crate::rng::Rng;
use crate::tensor::{Graph, Tensor, Var};

const PROJECTION_SEED: u64 = 0x5EED_0F_D1FF;

/// Scale-normalised max deviation between an analytic and a numeric gradient.
pub fn gradient_rel_error(analytic: &[f32], numeric: &[f64]) -> f64 {
    let mut scale = 1e-6f64;
    let mut worst = 0.0f64;
    for (&a, &n) in analytic.iter().zip(numeric) {
        scale = scale.max((a as f64).abs()).max(n.abs());
        worst = worst.max((a as f64 - n).abs());
    }
    worst / scale
}

/// Combines central differences at steps `h` and `h/2`, cancelling the
/// `h^2` truncation term.
fn richardson(d_h: f64, d_half: f64) -> f64 {
    (4.0 * d_half - d_h) / 3.0
}

fn projection(shape: &[usize]) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, &mut Rng::new(PROJECTION_SEED))
}

fn projected_loss(g: &mut Graph, y: Var) -> Result<Var> {
    let w = g.constant(projection(g.value(y).shape()));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn projected_value(y: &Tensor) -> f64 {
    let w = projection(y.shape());
    y.data()
        .iter()
        .zip(w.data())
        .map(|(&a, &b)| a as f64 * b as f64)
        .sum()
}

/// Checks the gradient of `f` with respect to `inputs`, jointly over all of them.
pub fn check_inputs(
    inputs: &[Tensor],
    h: f32,
    f: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let y = f(&mut g, &vars)?;
    let loss = projected_loss(&mut g, y)?;
    g.backward(loss)?;

    let eval = |probe: &[Tensor]| -> Result<f64> {
        let mut g = Graph::inference();
        let vars: Vec<Var> = probe.iter().map(|t| g.constant(t.clone())).collect();
        let y = f(&mut g, &vars)?;
        Ok(projected_value(g.value(y)))
    };

    let (mut all_a, mut all_n) = (Vec::new(), Vec::new());
    let mut probe = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = g
            .grad(*v)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[k].numel()]);
        let mut numeric = Vec::with_capacity(analytic.len());
        for j in 0..inputs[k].numel() {
            let orig = probe[k].data()[j];
            let mut central = |step: f32| -> Result<f64> {
                let (xp, xm) = (orig + step, orig - step);
                probe[k].data_mut()[j] = xp;
                let fp = eval(&probe)?;
                probe[k].data_mut()[j] = xm;
                let fm = eval(&probe)?;
                probe[k].data_mut()[j] = orig;
                Ok((fp - fm) / (xp as f64 - xm as f64))
            };
            numeric.push(richardson(central(h)?, central(h / 2.0)?));
        }
        all_a.extend(analytic);
        all_n.extend(numeric);
    }
    Ok(gradient_rel_error(&all_a, &all_n))
}

/// Checks the gradient of `f` with respect to a module's parameters. At most
/// `max_per_tensor` evenly strided entries of each parameter are probed.
pub fn check_params<M: Parameterized + Clone>(
    module: &M,
    h: f32,
    max_per_tensor: usize,
    f: impl Fn(&M, &mut Graph) -> Result<Var>,
) -> Result<f64> {
    let mut g = Graph::new();
    let y = f(module, &mut g)?;
    let loss = projected_loss(&mut g, y)?;
    g.backward(loss)?;
    let grads = g.param_grads();

    let names: Vec<(String, usize)> = module
        .params()
        .into_iter()
        .map(|(n, t)| (n, t.numel()))
        .collect();
    let (mut all_a, mut all_n) = (Vec::new(), Vec::new());
    for (name, numel) in names {
        let stride = numel.div_ceil(max_per_tensor.max(1)).max(1);
        let idx: Vec<usize> = (0..numel).step_by(stride).collect();
        let analytic: Vec<f32> = idx
            .iter()
            .map(|&j| grads.get(&name).map_or(0.0, |t| t.data()[j]))
            .collect();
        let mut numeric = Vec::with_capacity(idx.len());
        for &j in &idx {
            let eval = |delta: f32| -> Result<(f64, f32)> {
                let mut m = module.clone();
                let mut moved = 0.0;
                for (n, t) in m.params_mut() {
                    if n == name {
                        t.data_mut()[j] += delta;
                        moved = t.data()[j];
                    }
                }
                let mut g = Graph::inference();
                let y = f(&m, &mut g)?;
                Ok((projected_value(g.value(y)), moved))
            };
            let central = |step: f32| -> Result<f64> {
                let (fp, xp) = eval(step)?;
                let (fm, xm) = eval(-step)?;
                Ok((fp - fm) / (xp as f64 - xm as f64))
            };
            numeric.push(richardson(central(h)?, central(h / 2.0)?));
        }
        all_a.extend(analytic);
        all_n.extend(numeric);
    }
    Ok(gradient_rel_error(&all_a, &all_n))
}

/// Checks the graph gradient of `f` against central differences of an
/// independent float64 implementation `reference` of the same function.
/// Use it where the float32 forward cannot resolve the derivative, such as
/// a nearly one-hot softmax whose gradient is far below float32 spacing at 1.
pub fn check_inputs_reference(
    inputs: &[Tensor],
    h: f64,
    f: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
    reference: impl Fn(&[Vec<f64>]) -> Vec<f64>,
) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let y = f(&mut g, &vars)?;
    let shape = g.value(y).shape().to_vec();
    let loss = projected_loss(&mut g, y)?;
    g.backward(loss)?;
    let w = projection(&shape);
    let eval = |probe: &[Vec<f64>]| -> f64 {
        reference(probe)
            .iter()
            .zip(w.data())
            .map(|(&a, &b)| a * b as f64)
            .sum()
    };

    let (mut all_a, mut all_n) = (Vec::new(), Vec::new());
    let mut probe: Vec<Vec<f64>> = inputs
        .iter()
        .map(|t| t.data().iter().map(|&v| v as f64).collect())
        .collect();
    for (k, v) in vars.iter().enumerate() {
        all_a.extend(
            g.grad(*v)
                .map(|t| t.data().to_vec())
                .unwrap_or_else(|| vec![0.0; inputs[k].numel()]),
        );
        for j in 0..inputs[k].numel() {
            let orig = probe[k][j];
            let mut central = |step: f64| {
                probe[k][j] = orig + step;
                let fp = eval(&probe);
                probe[k][j] = orig - step;
                let fm = eval(&probe);
                probe[k][j] = orig;
                (fp - fm) / (2.0 * step)
            };
            all_n.push(richardson(central(h), central(h / 2.0)));
        }
    }
    Ok(gradient_rel_error(&all_a, &all_n))
}
