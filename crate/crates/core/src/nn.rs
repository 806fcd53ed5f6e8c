//! Layers shared by the encoders, routers and decoders.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Graph, Tensor, Var};

/// Anything that owns named parameter tensors.
pub trait Parameterized {
    fn params(&self) -> Vec<(String, &Tensor)>;
    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)>;

    fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.numel()).sum()
    }

    fn state_dict(&self) -> BTreeMap<String, Tensor> {
        self.params()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect()
    }

    /// Overwrites every parameter from `map`; names and shapes must all match.
    fn load_state_dict(&mut self, map: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, t) in self.params_mut() {
            let src = map
                .get(&name)
                .ok_or_else(|| Error::Config(format!("checkpoint is missing parameter {name}")))?;
            if src.shape() != t.shape() {
                return Err(Error::Dimension {
                    op: "load_state_dict",
                    lhs: t.shape().to_vec(),
                    rhs: src.shape().to_vec(),
                });
            }
            *t = src.clone();
        }
        Ok(())
    }

    /// Plain SGD update `p -= lr * grad` for every parameter with a gradient.
    fn sgd_step(&mut self, grads: &BTreeMap<String, Tensor>, lr: f32) {
        for (name, t) in self.params_mut() {
            if let Some(g) = grads.get(&name) {
                for (p, d) in t.data_mut().iter_mut().zip(g.data()) {
                    *p -= lr * d;
                }
            }
        }
    }

    fn all_finite(&self) -> bool {
        self.params().iter().all(|(_, t)| t.all_finite())
    }
}

/// `y = x W + b` with `W: [in×out]`, `b: [1×out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(name: &str, d_in: usize, d_out: usize, rng: &mut Rng) -> Self {
        Self {
            name: name.to_string(),
            weight: Tensor::randn(&[d_in, d_out], 1.0 / (d_in as f32).sqrt(), rng),
            bias: Tensor::zeros(&[1, d_out]),
        }
    }

    pub fn zeros(name: &str, d_in: usize, d_out: usize) -> Self {
        Self {
            name: name.to_string(),
            weight: Tensor::zeros(&[d_in, d_out]),
            bias: Tensor::zeros(&[1, d_out]),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(&format!("{}.weight", self.name), &self.weight);
        let b = g.param(&format!("{}.bias", self.name), &self.bias);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

impl Parameterized for Linear {
    fn params(&self) -> Vec<(String, &Tensor)> {
        vec![
            (format!("{}.weight", self.name), &self.weight),
            (format!("{}.bias", self.name), &self.bias),
        ]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            (format!("{}.weight", self.name), &mut self.weight),
            (format!("{}.bias", self.name), &mut self.bias),
        ]
    }
}

pub const LN_EPS: f32 = 1e-5;

/// Row-wise layer norm with learned gain and shift.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub name: String,
    pub gain: Tensor,
    pub shift: Tensor,
}

impl LayerNorm {
    pub fn new(name: &str, d: usize) -> Self {
        Self {
            name: name.to_string(),
            gain: Tensor::ones(&[1, d]),
            shift: Tensor::zeros(&[1, d]),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gain = g.param(&format!("{}.gain", self.name), &self.gain);
        let shift = g.param(&format!("{}.shift", self.name), &self.shift);
        let n = g.layer_norm_rows(x, LN_EPS)?;
        let y = g.mul_row(n, gain)?;
        g.add_row(y, shift)
    }
}

impl Parameterized for LayerNorm {
    fn params(&self) -> Vec<(String, &Tensor)> {
        vec![
            (format!("{}.gain", self.name), &self.gain),
            (format!("{}.shift", self.name), &self.shift),
        ]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            (format!("{}.gain", self.name), &mut self.gain),
            (format!("{}.shift", self.name), &mut self.shift),
        ]
    }
}

/// 2-D convolution over a single `[C×H×W]` sample, with per-channel bias.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub name: String,
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(name: &str, c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize, rng: &mut Rng) -> Self {
        let fan_in = (c_in * k * k) as f32;
        Self {
            name: name.to_string(),
            weight: Tensor::randn(&[c_out, c_in, k, k], 1.0 / fan_in.sqrt(), rng),
            bias: Tensor::zeros(&[c_out, 1]),
            stride,
            pad,
        }
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(&format!("{}.weight", self.name), &self.weight);
        let b = g.param(&format!("{}.bias", self.name), &self.bias);
        let y = g.conv2d(x, w, self.stride, self.pad)?;
        let shape = g.value(y).shape().to_vec();
        let flat = g.reshape(y, &[shape[0], shape[1] * shape[2]])?;
        let flat = g.add_col(flat, b)?;
        g.reshape(flat, &shape)
    }
}

impl Parameterized for Conv2d {
    fn params(&self) -> Vec<(String, &Tensor)> {
        vec![
            (format!("{}.weight", self.name), &self.weight),
            (format!("{}.bias", self.name), &self.bias),
        ]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            (format!("{}.weight", self.name), &mut self.weight),
            (format!("{}.bias", self.name), &mut self.bias),
        ]
    }
}

/// Large negative logit used for hard masks; finite so no `inf - inf` appears.
pub const MASKED: f32 = -1e30;

/// Single-head scaled dot-product attention. `key_bias` (one value per key) is
/// added to every query's logits; `causal` masks keys after the query position.
pub fn attention(g: &mut Graph, q: Var, k: Var, v: Var, key_bias: Option<Var>, causal: bool) -> Result<Var> {
    let d = g.value(q).cols();
    let kt = g.transpose(k)?;
    let s = g.matmul(q, kt)?;
    let mut s = g.scale(s, 1.0 / (d as f32).sqrt());
    if let Some(b) = key_bias {
        s = g.add_row(s, b)?;
    }
    if causal {
        let (m, n) = (g.value(s).rows(), g.value(s).cols());
        // Query i sits at key position i + (n - m) so a shorter query block attends to its own prefix.
        let offset = n - m;
        let mut mask = vec![0.0f32; m * n];
        for i in 0..m {
            for j in (i + offset + 1)..n {
                mask[i * n + j] = MASKED;
            }
        }
        let mask = g.constant(Tensor::new(vec![m, n], mask)?);
        s = g.add(s, mask)?;
    }
    let p = g.softmax_rows(s)?;
    g.matmul(p, v)
}

/// Pre-norm transformer block: attention then a SiLU MLP, both residual.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl TransformerBlock {
    pub fn new(name: &str, d: usize, mlp_ratio: usize, rng: &mut Rng) -> Self {
        Self {
            ln1: LayerNorm::new(&format!("{name}.ln1"), d),
            q: Linear::new(&format!("{name}.q"), d, d, rng),
            k: Linear::new(&format!("{name}.k"), d, d, rng),
            v: Linear::new(&format!("{name}.v"), d, d, rng),
            o: Linear::new(&format!("{name}.o"), d, d, rng),
            ln2: LayerNorm::new(&format!("{name}.ln2"), d),
            fc1: Linear::new(&format!("{name}.fc1"), d, d * mlp_ratio, rng),
            fc2: Linear::new(&format!("{name}.fc2"), d * mlp_ratio, d, rng),
        }
    }

    pub fn width(&self) -> usize {
        self.q.d_in()
    }

    /// Query, key and value projections of the normalised input rows.
    pub fn qkv(&self, g: &mut Graph, x: Var) -> Result<(Var, Var, Var)> {
        let u = self.ln1.forward(g, x)?;
        Ok((self.q.forward(g, u)?, self.k.forward(g, u)?, self.v.forward(g, u)?))
    }

    /// Output projection, residual, and MLP applied to the attended rows.
    pub fn finish(&self, g: &mut Graph, x: Var, attended: Var) -> Result<Var> {
        let o = self.o.forward(g, attended)?;
        let x = g.add(x, o)?;
        let u = self.ln2.forward(g, x)?;
        let h = self.fc1.forward(g, u)?;
        let h = g.silu(h);
        let h = self.fc2.forward(g, h)?;
        g.add(x, h)
    }

    pub fn forward(&self, g: &mut Graph, x: Var, causal: bool) -> Result<Var> {
        let (q, k, v) = self.qkv(g, x)?;
        let a = attention(g, q, k, v, None, causal)?;
        self.finish(g, x, a)
    }
}

impl Parameterized for TransformerBlock {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut v = self.ln1.params();
        v.extend(self.q.params());
        v.extend(self.k.params());
        v.extend(self.v.params());
        v.extend(self.o.params());
        v.extend(self.ln2.params());
        v.extend(self.fc1.params());
        v.extend(self.fc2.params());
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = self.ln1.params_mut();
        v.extend(self.q.params_mut());
        v.extend(self.k.params_mut());
        v.extend(self.v.params_mut());
        v.extend(self.o.params_mut());
        v.extend(self.ln2.params_mut());
        v.extend(self.fc1.params_mut());
        v.extend(self.fc2.params_mut());
        v
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Small causal transformer language decoder.
#[derive(Debug, Clone)]
pub struct MicroDecoder {
    pub name: String,
    pub token_emb: Tensor,
    pub pos_emb: Tensor,
    pub blocks: Vec<TransformerBlock>,
    pub ln_f: LayerNorm,
    pub head: Linear,
}

impl MicroDecoder {
    pub fn new(name: &str, vocab: usize, context: usize, d: usize, layers: usize, rng: &mut Rng) -> Self {
        Self {
            name: name.to_string(),
            token_emb: Tensor::randn(&[vocab, d], 0.5, rng),
            pos_emb: Tensor::randn(&[context, d], 0.1, rng),
            blocks: (0..layers)
                .map(|l| TransformerBlock::new(&format!("{name}.block{l}"), d, 2, rng))
                .collect(),
            ln_f: LayerNorm::new(&format!("{name}.ln_f"), d),
            head: Linear::new(&format!("{name}.head"), d, vocab, rng),
        }
    }

    pub fn vocab(&self) -> usize {
        self.token_emb.shape()[0]
    }

    pub fn context(&self) -> usize {
        self.pos_emb.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.token_emb.shape()[1]
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    /// Token plus position embeddings for `tokens`, positions starting at `offset`.
    pub fn embed(&self, g: &mut Graph, tokens: &[u32], offset: usize) -> Result<Var> {
        if offset + tokens.len() > self.context() {
            return Err(Error::Parameter(format!(
                "sequence of {} exceeds decoder context {}",
                offset + tokens.len(),
                self.context()
            )));
        }
        let mut ids = Vec::with_capacity(tokens.len());
        for &t in tokens {
            if t as usize >= self.vocab() {
                return Err(Error::Vocab {
                    id: t,
                    vocab: self.vocab(),
                });
            }
            ids.push(t as usize);
        }
        let emb = g.param(&format!("{}.token_emb", self.name), &self.token_emb);
        let pos = g.param(&format!("{}.pos_emb", self.name), &self.pos_emb);
        let e = g.gather_rows(emb, &ids)?;
        let positions: Vec<usize> = (offset..offset + tokens.len()).collect();
        let p = g.gather_rows(pos, &positions)?;
        g.add(e, p)
    }

    /// Runs the first `layers` causal blocks and returns next-token logits for every row.
    pub fn logits(&self, g: &mut Graph, h: Var, layers: usize) -> Result<Var> {
        if layers == 0 || layers > self.depth() {
            return Err(Error::Parameter(format!(
                "decoder depth {layers} outside 1..={}",
                self.depth()
            )));
        }
        let mut x = h;
        for b in &self.blocks[..layers] {
            x = b.forward(g, x, true)?;
        }
        let x = self.ln_f.forward(g, x)?;
        self.head.forward(g, x)
    }

    /// Next-token distribution after the last row of `h`.
    pub fn next_distribution(&self, g: &mut Graph, h: Var, layers: usize) -> Result<Vec<f32>> {
        if layers == 0 || layers > self.depth() {
            return Err(Error::Parameter(format!(
                "decoder depth {layers} outside 1..={}",
                self.depth()
            )));
        }
        // Causal blocks still run over every row; only the head sees the last one.
        let mut x = h;
        for b in &self.blocks[..layers] {
            x = b.forward(g, x, true)?;
        }
        let rows = g.value(x).rows();
        let x = g.gather_rows(x, &[rows - 1])?;
        let x = self.ln_f.forward(g, x)?;
        let l = self.head.forward(g, x)?;
        let p = g.softmax_rows(l)?;
        Ok(g.value(p).data().to_vec())
    }

    /// Greedy generation of `n` tokens after the conditioning rows `h`,
    /// running the first `layers` blocks. Each new token is embedded at the
    /// next position and the whole prefix is re-run.
    pub fn greedy(&self, g: &mut Graph, h: Var, n: usize, layers: usize) -> Result<Vec<u32>> {
        let prefix = g.value(h).rows();
        let mut seq = h;
        let mut out = Vec::with_capacity(n);
        for step in 0..n {
            let dist = self.next_distribution(g, seq, layers)?;
            let tok = argmax(&dist) as u32;
            out.push(tok);
            if step + 1 < n {
                let e = self.embed(g, &[tok], prefix + step)?;
                seq = g.concat_rows(seq, e)?;
            }
        }
        Ok(out)
    }
}

impl Parameterized for MicroDecoder {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut v = vec![
            (format!("{}.token_emb", self.name), &self.token_emb),
            (format!("{}.pos_emb", self.name), &self.pos_emb),
        ];
        for b in &self.blocks {
            v.extend(b.params());
        }
        v.extend(self.ln_f.params());
        v.extend(self.head.params());
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = vec![
            (format!("{}.token_emb", self.name), &mut self.token_emb),
            (format!("{}.pos_emb", self.name), &mut self.pos_emb),
        ];
        for b in &mut self.blocks {
            v.extend(b.params_mut());
        }
        v.extend(self.ln_f.params_mut());
        v.extend(self.head.params_mut());
        v
    }
}

/// Mean cross-entropy of `logits[m×C]` against class `targets`.
pub fn cross_entropy(g: &mut Graph, logits: Var, targets: &[usize]) -> Result<Var> {
    let lp = g.log_softmax_rows(logits)?;
    let picked = g.pick(lp, targets)?;
    let m = g.mean(picked);
    Ok(g.scale(m, -1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_ties_pick_lowest() {
        assert_eq!(argmax(&[0.2, 0.7, 0.7, 0.1]), 1);
        assert_eq!(argmax(&[1.0, 1.0, 1.0]), 0);
    }

    #[test]
    fn decoder_distribution_sums_to_one() {
        let mut rng = Rng::new(3);
        let dec = MicroDecoder::new("dec", 32, 8, 16, 2, &mut rng);
        let mut g = Graph::inference();
        let h = dec.embed(&mut g, &[1, 5, 7], 0).unwrap();
        let p = dec.next_distribution(&mut g, h, 2).unwrap();
        let s: f32 = p.iter().sum();
        assert!((s - 1.0).abs() <= 1e-6, "sum {s}");
    }

    #[test]
    fn decoder_rejects_unknown_token() {
        let mut rng = Rng::new(3);
        let dec = MicroDecoder::new("dec", 32, 8, 16, 2, &mut rng);
        let mut g = Graph::inference();
        assert!(matches!(dec.embed(&mut g, &[40], 0), Err(Error::Vocab { id: 40, .. })));
    }

    #[test]
    fn state_dict_round_trip() {
        let mut rng = Rng::new(1);
        let a = TransformerBlock::new("b", 8, 2, &mut rng);
        let mut b = TransformerBlock::new("b", 8, 2, &mut rng);
        b.load_state_dict(&a.state_dict()).unwrap();
        for ((_, x), (_, y)) in a.params().iter().zip(b.params()) {
            assert!(x.bit_eq(y));
        }
    }

    #[test]
    fn sgd_with_zero_lr_is_identity() {
        let mut rng = Rng::new(1);
        let mut l = Linear::new("l", 3, 2, &mut rng);
        let before = l.state_dict();
        let grads: BTreeMap<_, _> = before.iter().map(|(k, v)| (k.clone(), Tensor::ones(v.shape()))).collect();
        l.sgd_step(&grads, 0.0);
        for (k, v) in l.state_dict() {
            assert!(v.bit_eq(&before[&k]));
        }
    }
}
