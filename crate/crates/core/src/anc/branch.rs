//! Encoder branches of increasing cost.

use crate::error::{Error, Result};
use crate::nn::{Linear, Parameterized, TransformerBlock};
use crate::rng::Rng;
use crate::tensor::{Graph, Tensor, Var};

/// Static description of one branch.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchSpec {
    pub name: String,
    pub width: usize,
    pub depth: usize,
    pub mlp_ratio: usize,
}

impl BranchSpec {
    pub fn new(name: &str, width: usize, depth: usize) -> Self {
        Self {
            name: name.to_string(),
            width,
            depth,
            mlp_ratio: 2,
        }
    }

    /// Closed-form FLOPs of one frame: `n` tokens of `input` features,
    /// projected to `out` features after mean pooling.
    pub fn analytic_flops(&self, n: usize, input: usize, out: usize) -> u64 {
        let (n, c, d, h, o) = (n as u64, input as u64, self.width as u64, (self.width * self.mlp_ratio) as u64, out as u64);
        // patch embedding with bias, plus positions
        let embed = 2 * n * c * d + 2 * n * d;
        // q, k, v, o projections; scores, scale, softmax, weighted sum;
        // MLP; two layer norms (3 per element each) and the other
        // elementwise terms
        let block = 8 * n * d * d + 4 * n * d * h + 4 * n * n * d + 2 * n * n + 13 * n * d + 2 * n * h;
        let head = n * d + 2 * d * o + o;
        embed + self.depth as u64 * block + head
    }
}

#[derive(Debug, Clone)]
pub struct Branch {
    pub spec: BranchSpec,
    pub patch_embed: Linear,
    pub pos_emb: Tensor,
    pub blocks: Vec<TransformerBlock>,
    /// Projection to the shared feature width.
    pub proj: Linear,
}

impl Branch {
    pub fn new(spec: BranchSpec, tokens: usize, input: usize, out: usize, rng: &mut Rng) -> Result<Self> {
        if spec.width == 0 || spec.depth == 0 || spec.mlp_ratio == 0 {
            return Err(Error::Config(format!("branch {} needs positive width and depth", spec.name)));
        }
        let n = &spec.name;
        Ok(Self {
            patch_embed: Linear::new(&format!("{n}.patch_embed"), input, spec.width, rng),
            pos_emb: Tensor::randn(&[tokens, spec.width], 0.1, rng),
            blocks: (0..spec.depth)
                .map(|l| TransformerBlock::new(&format!("{n}.block{l}"), spec.width, spec.mlp_ratio, rng))
                .collect(),
            proj: Linear::new(&format!("{n}.proj"), spec.width, out, rng),
            spec,
        })
    }

    pub fn stage(&self) -> String {
        format!("branch_{}", self.spec.name)
    }

    /// `[N, input]` patch features to a `[1, out]` summary.
    pub fn forward(&self, g: &mut Graph, patches: Var) -> Result<Var> {
        let stage = self.stage();
        g.with_stage(&stage, |g| {
            let x = self.patch_embed.forward(g, patches)?;
            let pos = g.param(&format!("{}.pos_emb", self.spec.name), &self.pos_emb);
            let mut x = g.add(x, pos)?;
            for b in &self.blocks {
                x = b.forward(g, x, false)?;
            }
            let pooled = g.mean_rows(x)?;
            self.proj.forward(g, pooled)
        })
    }
}

impl Parameterized for Branch {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut v = self.patch_embed.params();
        v.push((format!("{}.pos_emb", self.spec.name), &self.pos_emb));
        for b in &self.blocks {
            v.extend(b.params());
        }
        v.extend(self.proj.params());
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let name = self.spec.name.clone();
        let mut v = self.patch_embed.params_mut();
        v.push((format!("{name}.pos_emb"), &mut self.pos_emb));
        for b in &mut self.blocks {
            v.extend(b.params_mut());
        }
        v.extend(self.proj.params_mut());
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn ledger_matches_closed_form() {
        let mut rng = Rng::new(8);
        for (w, d) in [(8, 1), (12, 2), (20, 3)] {
            let spec = BranchSpec::new("b", w, d);
            let branch = Branch::new(spec.clone(), 10, 20, 6, &mut rng).unwrap();
            let mut g = Graph::inference();
            let x = g.constant(Tensor::randn(&[10, 20], 1.0, &mut rng));
            let y = branch.forward(&mut g, x).unwrap();
            assert_eq!(g.value(y).shape(), &[1, 6]);
            assert_eq!(g.ledger().get("branch_b"), spec.analytic_flops(10, 20, 6));
            assert_eq!(g.ledger().total(), g.ledger().get("branch_b"));
        }
    }
}
