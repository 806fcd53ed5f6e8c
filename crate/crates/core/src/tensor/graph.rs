//! Tape-based reverse-mode autodiff.
//!
//! Every op appends a node holding its output value, so node indices are a
//! topological order and `backward` is a single reverse sweep. Each forward
//! op also charges its FLOPs to the ledger under the graph's current stage.

use std::collections::{BTreeMap, HashMap};

use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};
use crate::flops::FlopsLedger;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    AddCol(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f32),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Silu(Var),
    Exp(Var),
    Log(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNormRows(Var, f32),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    Transpose(Var),
    Reshape(Var),
    GatherRows(Var, Vec<usize>),
    ScatterRows(Var, Vec<usize>, Var),
    ConcatCols(Var, Var),
    ConcatRows(Var, Var),
    SliceCols(Var, usize),
    PickElems(Var, Vec<usize>),
    Conv2d(Var, Var, ConvGeom),
    Detach,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Computation tape plus the FLOPs ledger its ops charge.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    grad_enabled: bool,
    stage: String,
    ledger: FlopsLedger,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn dims2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.ndim() != 2 {
        return Err(Error::Dimension {
            op,
            lhs: t.shape().to_vec(),
            rhs: vec![],
        });
    }
    Ok((t.rows(), t.cols()))
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Graph {
    /// Graph that records parameters as differentiable leaves.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            grad_enabled: true,
            stage: "default".to_string(),
            ledger: FlopsLedger::new(),
        }
    }

    /// Graph whose parameters are constants; `backward` has nothing to do.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn ledger(&self) -> &FlopsLedger {
        &self.ledger
    }

    pub fn take_ledger(&mut self) -> FlopsLedger {
        std::mem::take(&mut self.ledger)
    }

    pub fn stage(&self) -> &str {
        &self.stage
    }

    /// Sets the stage that subsequent ops are charged to, returning the previous one.
    pub fn set_stage(&mut self, stage: &str) -> String {
        std::mem::replace(&mut self.stage, stage.to_string())
    }

    /// Runs `f` with ops charged to `stage`, restoring the previous stage afterwards.
    pub fn with_stage<T>(&mut self, stage: &str, f: impl FnOnce(&mut Self) -> T) -> T {
        let prev = self.set_stage(stage);
        let out = f(self);
        self.stage = prev;
        out
    }

    /// Charges `flops` to the current stage; for work done outside the tape.
    pub fn charge(&mut self, flops: usize) {
        self.ledger.record(&self.stage, flops as u64);
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable leaf regardless of grad mode (used by gradient checks on inputs).
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Registers a named model parameter. Repeated names return the same leaf,
    /// so a parameter used several times accumulates one gradient.
    pub fn param(&mut self, name: &str, t: &Tensor) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.push(t.clone(), Op::Leaf, self.grad_enabled);
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    /// Gradients of every registered parameter that received one.
    pub fn param_grads(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .filter_map(|(k, v)| self.grad(*v).map(|g| (k.clone(), g.clone())))
            .collect()
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = dims2("matmul", ta)?;
        let (k2, n) = dims2("matmul", tb)?;
        if k != k2 {
            return Err(mismatch("matmul", ta, tb));
        }
        let out = kernels::matmul(ta.data(), tb.data(), m, k, n);
        self.charge(2 * m * k * n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = dims2("transpose", t)?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = t.data()[i * n + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(x), rg))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        if stride == 0 {
            return Err(Error::Parameter("conv2d stride must be positive".into()));
        }
        let (tx, tw) = (self.value(x), self.value(w));
        if tx.ndim() != 3 || tw.ndim() != 4 || tx.shape()[0] != tw.shape()[1] {
            return Err(mismatch("conv2d", tx, tw));
        }
        let geom = ConvGeom {
            c_in: tx.shape()[0],
            h: tx.shape()[1],
            w: tx.shape()[2],
            c_out: tw.shape()[0],
            kh: tw.shape()[2],
            kw: tw.shape()[3],
            stride,
            pad,
        };
        if geom.h + 2 * pad < geom.kh || geom.w + 2 * pad < geom.kw {
            return Err(mismatch("conv2d", tx, tw));
        }
        let out = kernels::conv2d(tx.data(), tw.data(), geom);
        let (oh, ow) = (geom.out_h(), geom.out_w());
        self.charge(2 * geom.c_out * geom.c_in * geom.kh * geom.kw * oh * ow);
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(
            Tensor::new(vec![geom.c_out, oh, ow], out)?,
            Op::Conv2d(x, w, geom),
            rg,
        ))
    }

    // ---- elementwise ----

    fn binary_same(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(op, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        self.charge(t.numel());
        Ok(t)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary_same(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary_same(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary_same(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    fn broadcast(&mut self, x: Var, v: Var, op: &'static str, along_rows: bool, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        let (tx, tv) = (self.value(x), self.value(v));
        let (m, n) = dims2(op, tx)?;
        let expect = if along_rows { n } else { m };
        if tv.numel() != expect {
            return Err(mismatch(op, tx, tv));
        }
        let mut out = tx.data().to_vec();
        for i in 0..m {
            for j in 0..n {
                let s = if along_rows { tv.data()[j] } else { tv.data()[i] };
                out[i * n + j] = f(out[i * n + j], s);
            }
        }
        self.charge(m * n);
        Tensor::new(vec![m, n], out)
    }

    /// `x[m×n] + b` with `b` holding `n` values broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let t = self.broadcast(x, b, "add_row", true, |a, s| a + s)?;
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(t, Op::AddRow(x, b), rg))
    }

    /// `x[m×n] + b` with `b` holding `m` values broadcast over columns.
    pub fn add_col(&mut self, x: Var, b: Var) -> Result<Var> {
        let t = self.broadcast(x, b, "add_col", false, |a, s| a + s)?;
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(t, Op::AddCol(x, b), rg))
    }

    /// Scales column `j` of `x` by `s[j]`.
    pub fn mul_row(&mut self, x: Var, s: Var) -> Result<Var> {
        let t = self.broadcast(x, s, "mul_row", true, |a, s| a * s)?;
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(t, Op::MulRow(x, s), rg))
    }

    /// Scales row `i` of `x` by `s[i]`.
    pub fn mul_col(&mut self, x: Var, s: Var) -> Result<Var> {
        let t = self.broadcast(x, s, "mul_col", false, |a, s| a * s)?;
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(t, Op::MulCol(x, s), rg))
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f32) -> f32) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.charge(out.numel());
        let rg = self.rg(x);
        self.push(out, op, rg)
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Var {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f32) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + c)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), kernels::sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), f32::tanh)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Silu(x), |v| v * kernels::sigmoid(v))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f32::exp)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x), f32::ln)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = dims2("softmax_rows", t)?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            kernels::softmax_row(&t.data()[i * n..(i + 1) * n], &mut out[i * n..(i + 1) * n]);
        }
        self.charge(m * n);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::SoftmaxRows(x), rg))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = dims2("log_softmax_rows", t)?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &t.data()[i * n..(i + 1) * n];
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f32;
            for &v in row {
                sum += (v - max).exp();
            }
            let lse = max + sum.ln();
            for j in 0..n {
                out[i * n + j] = row[j] - lse;
            }
        }
        self.charge(m * n);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::LogSoftmaxRows(x), rg))
    }

    /// Per-row standardisation `(x - mean) / sqrt(var + eps)` without affine terms.
    pub fn layer_norm_rows(&mut self, x: Var, eps: f32) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = dims2("layer_norm_rows", t)?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &t.data()[i * n..(i + 1) * n];
            let mut mean = 0.0f32;
            for &v in row {
                mean += v;
            }
            mean /= n as f32;
            let mut var = 0.0f32;
            for &v in row {
                var += (v - mean) * (v - mean);
            }
            var /= n as f32;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..n {
                out[i * n + j] = (row[j] - mean) * inv;
            }
        }
        self.charge(m * n);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::LayerNormRows(x, eps), rg))
    }

    // ---- reductions ----

    pub fn sum(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let mut s = 0.0f32;
        for &v in t.data() {
            s += v;
        }
        self.charge(t.numel());
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let mut s = 0.0f32;
        for &v in t.data() {
            s += v;
        }
        let n = t.numel();
        self.charge(n);
        let rg = self.rg(x);
        self.push(Tensor::scalar(s / n as f32), Op::Mean(x), rg)
    }

    /// Column means of `x[m×n]` as a `1×n` row.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = dims2("mean_rows", t)?;
        let mut out = vec![0.0f32; n];
        for i in 0..m {
            add_into(&mut out, &t.data()[i * n..(i + 1) * n]);
        }
        for o in &mut out {
            *o /= m as f32;
        }
        self.charge(m * n);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![1, n], out)?, Op::MeanRows(x), rg))
    }

    // ---- data movement (free) ----

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (m, _) = dims2("gather_rows", t)?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::Dimension {
                op: "gather_rows",
                lhs: t.shape().to_vec(),
                rhs: vec![bad],
            });
        }
        let out = t.gather_rows(idx);
        let rg = self.rg(x);
        Ok(self.push(out, Op::GatherRows(x, idx.to_vec()), rg))
    }

    /// Copy of `base` with rows `idx` replaced by the rows of `src`.
    pub fn scatter_rows(&mut self, base: Var, idx: &[usize], src: Var) -> Result<Var> {
        let (tb, ts) = (self.value(base), self.value(src));
        let (m, n) = dims2("scatter_rows", tb)?;
        let (k, n2) = dims2("scatter_rows", ts)?;
        if n != n2 || k != idx.len() || idx.iter().any(|&i| i >= m) {
            return Err(mismatch("scatter_rows", tb, ts));
        }
        let mut out = tb.data().to_vec();
        for (r, &i) in idx.iter().enumerate() {
            out[i * n..(i + 1) * n].copy_from_slice(ts.row_slice(r));
        }
        let rg = self.rg(base) || self.rg(src);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::ScatterRows(base, idx.to_vec(), src),
            rg,
        ))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, na) = dims2("concat_cols", ta)?;
        let (m2, nb) = dims2("concat_cols", tb)?;
        if m != m2 {
            return Err(mismatch("concat_cols", ta, tb));
        }
        let mut out = Vec::with_capacity(m * (na + nb));
        for i in 0..m {
            out.extend_from_slice(ta.row_slice(i));
            out.extend_from_slice(tb.row_slice(i));
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, na + nb], out)?, Op::ConcatCols(a, b), rg))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (ma, n) = dims2("concat_rows", ta)?;
        let (mb, n2) = dims2("concat_rows", tb)?;
        if n != n2 {
            return Err(mismatch("concat_rows", ta, tb));
        }
        let mut out = ta.data().to_vec();
        out.extend_from_slice(tb.data());
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![ma + mb, n], out)?, Op::ConcatRows(a, b), rg))
    }

    /// Columns `start..start+len` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = dims2("slice_cols", t)?;
        if start + len > n {
            return Err(Error::Dimension {
                op: "slice_cols",
                lhs: t.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&t.data()[i * n + start..i * n + start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![m, len], out)?, Op::SliceCols(x, start), rg))
    }

    /// `out[i] = x[i, idx[i]]` as an `m×1` column.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = dims2("pick", t)?;
        if idx.len() != m || idx.iter().any(|&j| j >= n) {
            return Err(Error::Dimension {
                op: "pick",
                lhs: t.shape().to_vec(),
                rhs: vec![idx.len()],
            });
        }
        let out = idx.iter().enumerate().map(|(i, &j)| t.data()[i * n + j]).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![m, 1], out)?, Op::PickElems(x, idx.to_vec()), rg))
    }

    /// Same value, cut off from the gradient.
    pub fn detach(&mut self, x: Var) -> Var {
        let t = self.value(x).clone();
        self.push(t, Op::Detach, false)
    }

    // ---- backward ----

    /// Accumulates `d loss / d leaf` into every reachable differentiable leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        if !self.rg(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => add_into(acc.data_mut(), &g),
                    None => {
                        node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                    }
                }
                continue;
            }
            for (parent, contrib) in self.local_grads(i, &g) {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => add_into(acc, &contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(())
    }

    /// Clears accumulated leaf gradients.
    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn local_grads(&self, i: usize, g: &[f32]) -> Vec<(Var, Vec<f32>)> {
        let node = &self.nodes[i];
        let y = node.value.data();
        let val = |v: Var| &self.nodes[v.0].value;
        let want = |v: Var| self.nodes[v.0].requires_grad;
        let map = |x: Var, f: &dyn Fn(usize) -> f32| -> Vec<(Var, Vec<f32>)> {
            vec![(x, (0..g.len()).map(f).collect())]
        };
        match &node.op {
            Op::Leaf | Op::Detach => vec![],
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                let mut out = Vec::new();
                if want(*a) {
                    out.push((*a, kernels::matmul_bt(g, tb.data(), m, n, k)));
                }
                if want(*b) {
                    out.push((*b, kernels::matmul_at(ta.data(), g, m, k, n)));
                }
                out
            }
            Op::Transpose(x) => {
                let (m, n) = (val(*x).rows(), val(*x).cols());
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        d[i * n + j] = g[j * m + i];
                    }
                }
                vec![(*x, d)]
            }
            Op::Conv2d(x, w, geom) => {
                let (dx, dw) = kernels::conv2d_backward(val(*x).data(), val(*w).data(), g, *geom);
                vec![(*x, dx), (*w, dw)]
            }
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|v| -v).collect())],
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a).data(), val(*b).data());
                vec![
                    (*a, g.iter().zip(tb).map(|(d, v)| d * v).collect()),
                    (*b, g.iter().zip(ta).map(|(d, v)| d * v).collect()),
                ]
            }
            Op::AddRow(x, b) => {
                let n = val(*x).cols();
                let mut db = vec![0.0; n];
                for row in g.chunks(n) {
                    add_into(&mut db, row);
                }
                vec![(*x, g.to_vec()), (*b, db)]
            }
            Op::AddCol(x, b) => {
                let n = val(*x).cols();
                let db = g.chunks(n).map(|row| row.iter().sum()).collect();
                vec![(*x, g.to_vec()), (*b, db)]
            }
            Op::MulRow(x, s) => {
                let n = val(*x).cols();
                let (tx, ts) = (val(*x).data(), val(*s).data());
                let mut ds = vec![0.0; n];
                let mut dx = vec![0.0; g.len()];
                for (k, &d) in g.iter().enumerate() {
                    dx[k] = d * ts[k % n];
                    ds[k % n] += d * tx[k];
                }
                vec![(*x, dx), (*s, ds)]
            }
            Op::MulCol(x, s) => {
                let n = val(*x).cols();
                let (tx, ts) = (val(*x).data(), val(*s).data());
                let mut ds = vec![0.0; ts.len()];
                let mut dx = vec![0.0; g.len()];
                for (k, &d) in g.iter().enumerate() {
                    dx[k] = d * ts[k / n];
                    ds[k / n] += d * tx[k];
                }
                vec![(*x, dx), (*s, ds)]
            }
            Op::Scale(x, c) => map(*x, &|k| g[k] * c),
            Op::AddScalar(x) => vec![(*x, g.to_vec())],
            Op::Sigmoid(x) => map(*x, &|k| g[k] * y[k] * (1.0 - y[k])),
            Op::Tanh(x) => map(*x, &|k| g[k] * (1.0 - y[k] * y[k])),
            Op::Relu(x) => {
                let tx = val(*x).data();
                map(*x, &|k| if tx[k] > 0.0 { g[k] } else { 0.0 })
            }
            Op::Silu(x) => {
                let tx = val(*x).data();
                map(*x, &|k| {
                    let s = kernels::sigmoid(tx[k]);
                    g[k] * s * (1.0 + tx[k] * (1.0 - s))
                })
            }
            Op::Exp(x) => map(*x, &|k| g[k] * y[k]),
            Op::Log(x) => {
                let tx = val(*x).data();
                map(*x, &|k| g[k] / tx[k])
            }
            Op::SoftmaxRows(x) => {
                let n = val(*x).cols();
                let mut d = vec![0.0; g.len()];
                for (r, (gr, yr)) in g.chunks(n).zip(y.chunks(n)).enumerate() {
                    // dot(g, y) = g_m - c with c = sum_{k != m} y_k (g_m - g_k) around the
                    // largest weight m; forming c from the small weights avoids the
                    // cancellation in g_m - dot when the row is nearly one-hot.
                    let m = crate::nn::argmax(yr);
                    let mut c = 0.0f32;
                    for k in 0..n {
                        if k != m {
                            c += yr[k] * (gr[m] - gr[k]);
                        }
                    }
                    for j in 0..n {
                        d[r * n + j] = yr[j] * ((gr[j] - gr[m]) + c);
                    }
                }
                vec![(*x, d)]
            }
            Op::LogSoftmaxRows(x) => {
                let n = val(*x).cols();
                let mut d = vec![0.0; g.len()];
                for (r, (gr, yr)) in g.chunks(n).zip(y.chunks(n)).enumerate() {
                    let mut s = 0.0f32;
                    for v in gr {
                        s += v;
                    }
                    for j in 0..n {
                        d[r * n + j] = gr[j] - yr[j].exp() * s;
                    }
                }
                vec![(*x, d)]
            }
            Op::LayerNormRows(x, eps) => {
                let tx = val(*x);
                let n = tx.cols();
                let mut d = vec![0.0; g.len()];
                for r in 0..tx.rows() {
                    let row = tx.row_slice(r);
                    let mut mean = 0.0f32;
                    for &v in row {
                        mean += v;
                    }
                    mean /= n as f32;
                    let mut var = 0.0f32;
                    for &v in row {
                        var += (v - mean) * (v - mean);
                    }
                    var /= n as f32;
                    let inv = 1.0 / (var + eps).sqrt();
                    let (gr, yr) = (&g[r * n..(r + 1) * n], &y[r * n..(r + 1) * n]);
                    let (mut sg, mut sgy) = (0.0f32, 0.0f32);
                    for j in 0..n {
                        sg += gr[j];
                        sgy += gr[j] * yr[j];
                    }
                    for j in 0..n {
                        d[r * n + j] = inv / n as f32 * (n as f32 * gr[j] - sg - yr[j] * sgy);
                    }
                }
                vec![(*x, d)]
            }
            Op::Sum(x) => vec![(*x, vec![g[0]; val(*x).numel()])],
            Op::Mean(x) => {
                let n = val(*x).numel();
                vec![(*x, vec![g[0] / n as f32; n])]
            }
            Op::MeanRows(x) => {
                let (m, n) = (val(*x).rows(), val(*x).cols());
                let mut d = Vec::with_capacity(m * n);
                for _ in 0..m {
                    d.extend(g.iter().map(|v| v / m as f32));
                }
                vec![(*x, d)]
            }
            Op::Reshape(x) => vec![(*x, g.to_vec())],
            Op::GatherRows(x, idx) => {
                let tx = val(*x);
                let n = tx.cols();
                let mut d = vec![0.0; tx.numel()];
                for (r, &i) in idx.iter().enumerate() {
                    add_into(&mut d[i * n..(i + 1) * n], &g[r * n..(r + 1) * n]);
                }
                vec![(*x, d)]
            }
            Op::ScatterRows(base, idx, src) => {
                let n = val(*base).cols();
                let mut db = g.to_vec();
                let mut ds = Vec::with_capacity(idx.len() * n);
                for &i in idx {
                    ds.extend_from_slice(&g[i * n..(i + 1) * n]);
                    db[i * n..(i + 1) * n].iter_mut().for_each(|v| *v = 0.0);
                }
                vec![(*base, db), (*src, ds)]
            }
            Op::ConcatCols(a, b) => {
                let (na, nb) = (val(*a).cols(), val(*b).cols());
                let (mut da, mut db) = (Vec::new(), Vec::new());
                for row in g.chunks(na + nb) {
                    da.extend_from_slice(&row[..na]);
                    db.extend_from_slice(&row[na..]);
                }
                vec![(*a, da), (*b, db)]
            }
            Op::ConcatRows(a, b) => {
                let split = val(*a).numel();
                vec![(*a, g[..split].to_vec()), (*b, g[split..].to_vec())]
            }
            Op::SliceCols(x, start) => {
                let tx = val(*x);
                let (n, len) = (tx.cols(), node.value.cols());
                let mut d = vec![0.0; tx.numel()];
                for r in 0..tx.rows() {
                    d[r * n + start..r * n + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                vec![(*x, d)]
            }
            Op::PickElems(x, idx) => {
                let tx = val(*x);
                let n = tx.cols();
                let mut d = vec![0.0; tx.numel()];
                for (r, &j) in idx.iter().enumerate() {
                    d[r * n + j] = g[r];
                }
                vec![(*x, d)]
            }
        }
    }
}
