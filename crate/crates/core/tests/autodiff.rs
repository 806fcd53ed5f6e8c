//! Finite-difference oracle for every differentiable graph op.

use evfuse_core::gradcheck::check_inputs;
use evfuse_core::nn::{attention, cross_entropy, Linear, Parameterized};
use evfuse_core::{Graph, Result, Rng, Tensor, Var};

// float32 rounding noise in the numeric side scales like 1/h; 1e-2 keeps it
// well under the tolerance while the truncation error stays O(h^2).
const H: f32 = 1e-2;
const TOL: f64 = 1e-3;
const MLP_H: f32 = 1e-3;

fn rand(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, &mut Rng::new(seed))
}

fn check(name: &str, inputs: Vec<Tensor>, f: impl Fn(&mut Graph, &[Var]) -> Result<Var>) {
    for trial in 0..3u64 {
        let shifted: Vec<Tensor> = inputs
            .iter()
            .enumerate()
            .map(|(i, t)| rand(t.shape(), 1000 * trial + i as u64 + 7))
            .collect();
        let inputs = if trial == 0 { inputs.clone() } else { shifted };
        let err = check_inputs(&inputs, H, &f).unwrap();
        assert!(err < TOL, "{name} trial {trial}: relative error {err:.3e}");
    }
}

#[test]
fn matmul_grad() {
    check("matmul", vec![rand(&[3, 4], 1), rand(&[4, 5], 2)], |g, v| g.matmul(v[0], v[1]));
}

#[test]
fn elementwise_binary_grads() {
    check("add", vec![rand(&[2, 3], 1), rand(&[2, 3], 2)], |g, v| g.add(v[0], v[1]));
    check("sub", vec![rand(&[2, 3], 1), rand(&[2, 3], 2)], |g, v| g.sub(v[0], v[1]));
    check("mul", vec![rand(&[2, 3], 1), rand(&[2, 3], 2)], |g, v| g.mul(v[0], v[1]));
}

#[test]
fn broadcast_grads() {
    check("add_row", vec![rand(&[3, 4], 1), rand(&[1, 4], 2)], |g, v| g.add_row(v[0], v[1]));
    check("add_col", vec![rand(&[3, 4], 1), rand(&[3, 1], 2)], |g, v| g.add_col(v[0], v[1]));
    check("mul_row", vec![rand(&[3, 4], 1), rand(&[1, 4], 2)], |g, v| g.mul_row(v[0], v[1]));
    check("mul_col", vec![rand(&[3, 4], 1), rand(&[3, 1], 2)], |g, v| g.mul_col(v[0], v[1]));
}

#[test]
fn unary_grads() {
    check("scale", vec![rand(&[2, 3], 1)], |g, v| Ok(g.scale(v[0], -1.7)));
    check("add_scalar", vec![rand(&[2, 3], 1)], |g, v| Ok(g.add_scalar(v[0], 0.3)));
    check("sigmoid", vec![rand(&[2, 3], 1)], |g, v| Ok(g.sigmoid(v[0])));
    check("tanh", vec![rand(&[2, 3], 1)], |g, v| Ok(g.tanh(v[0])));
    check("silu", vec![rand(&[2, 3], 1)], |g, v| Ok(g.silu(v[0])));
    check("exp", vec![rand(&[2, 3], 1)], |g, v| Ok(g.exp(v[0])));
    check("log", vec![rand(&[2, 3], 1)], |g, v| {
        let s = g.sigmoid(v[0]);
        Ok(g.log(s))
    });
}

#[test]
fn relu_grad_away_from_kink() {
    let x = Tensor::new(vec![2, 3], vec![0.5, -0.7, 0.9, -0.2, 0.3, -1.1]).unwrap();
    let err = check_inputs(&[x], H, |g, v| Ok(g.relu(v[0]))).unwrap();
    assert!(err < TOL, "{err}");
}

#[test]
fn row_normalisation_grads() {
    check("softmax_rows", vec![rand(&[3, 5], 1)], |g, v| g.softmax_rows(v[0]));
    check("log_softmax_rows", vec![rand(&[3, 5], 1)], |g, v| g.log_softmax_rows(v[0]));
    check("layer_norm_rows", vec![rand(&[3, 6], 1)], |g, v| g.layer_norm_rows(v[0], 1e-5));
}

#[test]
fn reduction_grads() {
    check("sum", vec![rand(&[3, 4], 1)], |g, v| Ok(g.sum(v[0])));
    check("mean", vec![rand(&[3, 4], 1)], |g, v| Ok(g.mean(v[0])));
    check("mean_rows", vec![rand(&[3, 4], 1)], |g, v| g.mean_rows(v[0]));
}

#[test]
fn data_movement_grads() {
    check("transpose", vec![rand(&[3, 4], 1)], |g, v| g.transpose(v[0]));
    check("reshape", vec![rand(&[3, 4], 1)], |g, v| g.reshape(v[0], &[2, 6]));
    check("gather_rows", vec![rand(&[4, 3], 1)], |g, v| g.gather_rows(v[0], &[3, 0, 3]));
    check("scatter_rows", vec![rand(&[4, 3], 1), rand(&[2, 3], 2)], |g, v| {
        g.scatter_rows(v[0], &[2, 0], v[1])
    });
    check("concat_cols", vec![rand(&[2, 3], 1), rand(&[2, 2], 2)], |g, v| g.concat_cols(v[0], v[1]));
    check("concat_rows", vec![rand(&[2, 3], 1), rand(&[1, 3], 2)], |g, v| g.concat_rows(v[0], v[1]));
    check("slice_cols", vec![rand(&[2, 5], 1)], |g, v| g.slice_cols(v[0], 1, 3));
    check("pick", vec![rand(&[3, 4], 1)], |g, v| g.pick(v[0], &[3, 0, 2]));
}

#[test]
fn conv2d_grad() {
    check("conv2d", vec![rand(&[2, 5, 5], 1), rand(&[3, 2, 3, 3], 2)], |g, v| {
        g.conv2d(v[0], v[1], 1, 1)
    });
    check("conv2d_strided", vec![rand(&[1, 6, 6], 1), rand(&[2, 1, 2, 2], 2)], |g, v| {
        g.conv2d(v[0], v[1], 2, 0)
    });
}

#[test]
fn attention_grad() {
    check(
        "attention",
        vec![rand(&[3, 4], 1), rand(&[5, 4], 2), rand(&[5, 4], 3), rand(&[1, 5], 4)],
        |g, v| attention(g, v[0], v[1], v[2], Some(v[3]), false),
    );
    check("causal_attention", vec![rand(&[4, 4], 1), rand(&[4, 4], 2), rand(&[4, 4], 3)], |g, v| {
        attention(g, v[0], v[1], v[2], None, true)
    });
}

#[test]
fn cross_entropy_grad() {
    let err = check_inputs(&[rand(&[4, 5], 1)], H, |g, v| cross_entropy(g, v[0], &[0, 4, 2, 2])).unwrap();
    assert!(err < TOL, "{err}");
}

/// Three tanh layers, parameter gradients against central differences at h = 1e-3.
#[test]
fn random_three_layer_mlp() {
    #[derive(Clone)]
    struct Mlp(Vec<Linear>);
    impl Parameterized for Mlp {
        fn params(&self) -> Vec<(String, &Tensor)> {
            self.0.iter().flat_map(|l| l.params()).collect()
        }
        fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
            self.0.iter_mut().flat_map(|l| l.params_mut()).collect()
        }
    }
    for seed in 0..5u64 {
        let mut rng = Rng::new(seed);
        let mut mlp = Mlp(vec![
            Linear::new("l0", 4, 6, &mut rng),
            Linear::new("l1", 6, 5, &mut rng),
            Linear::new("l2", 5, 3, &mut rng),
        ]);
        for (_, t) in mlp.params_mut() {
            for v in t.data_mut() {
                *v += 0.1 * rng.normal();
            }
        }
        let x = Tensor::randn(&[2, 4], 1.0, &mut rng);
        let err = evfuse_core::gradcheck::check_params(&mlp, MLP_H, usize::MAX, |m, g| {
            let mut h = g.constant(x.clone());
            for (i, l) in m.0.iter().enumerate() {
                h = l.forward(g, h)?;
                if i < 2 {
                    h = g.tanh(h);
                }
            }
            Ok(h)
        })
        .unwrap();
        assert!(err < TOL, "seed {seed}: {err:.3e}");
    }
}
