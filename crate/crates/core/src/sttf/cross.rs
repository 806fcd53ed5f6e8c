//! Text-to-vision cross-attention with a staleness penalty on keys.

use crate::error::{Error, Result};
use crate::nn::{attention, Linear, Parameterized};
use crate::rng::Rng;
use crate::tensor::{Graph, Tensor, Var};

use super::bank::TokenBank;

pub const STAGE: &str = "cross_attn";
pub const DEFAULT_GAMMA: f32 = 1.0;

#[derive(Debug, Clone)]
pub struct CrossAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl CrossAttention {
    pub fn new(d: usize, rng: &mut Rng) -> Self {
        Self {
            q: Linear::new("cross_attn.q", d, d, rng),
            k: Linear::new("cross_attn.k", d, d, rng),
            v: Linear::new("cross_attn.v", d, d, rng),
            o: Linear::new("cross_attn.o", d, d, rng),
        }
    }

    /// `text + O(attn(Q text, K z, V z))`, with `-gamma` added to the logits
    /// of every stale slot.
    pub fn forward(&self, g: &mut Graph, text: Var, bank: &TokenBank, gamma: f32) -> Result<Var> {
        if g.value(text).cols() != bank.width() {
            return Err(Error::Dimension {
                op: "cross_attention",
                lhs: g.value(text).shape().to_vec(),
                rhs: bank.tokens.shape().to_vec(),
            });
        }
        let bias: Vec<f32> = (0..bank.len())
            .map(|i| if bank.is_stale(i) { -gamma } else { 0.0 })
            .collect();
        g.with_stage(STAGE, |g| {
            let z = g.constant(bank.tokens.clone());
            let bias = g.constant(Tensor::row(&bias));
            let q = self.q.forward(g, text)?;
            let k = self.k.forward(g, z)?;
            let v = self.v.forward(g, z)?;
            let a = attention(g, q, k, v, Some(bias), false)?;
            let o = self.o.forward(g, a)?;
            g.add(text, o)
        })
    }
}

impl Parameterized for CrossAttention {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut v = self.q.params();
        v.extend(self.k.params());
        v.extend(self.v.params());
        v.extend(self.o.params());
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = self.q.params_mut();
        v.extend(self.k.params_mut());
        v.extend(self.v.params_mut());
        v.extend(self.o.params_mut());
        v
    }
}
