//! Patch embedding plus transformer blocks, runnable densely or on a subset of slots.
//!
//! The selective path re-encodes only active slots. Their queries attend over
//! every slot: fresh keys and values for active slots, cached (constant) ones
//! for stale slots. Inactive slots are copied from the previous bank untouched,
//! so the work done scales with the number of active slots.

use crate::error::{Error, Result};
use crate::nn::{attention, Linear, Parameterized, TransformerBlock};
use crate::rng::Rng;
use crate::tensor::{Graph, Tensor};

use super::bank::{LayerCache, TokenBank};
use super::fusion::{fuse_rows, row_cosines, similarity_stats, TauPolicy, TauSchedule};
use super::mask::{check_grid, patch_rows, ActivePatchSet};

pub const STAGE: &str = "sparse_encoder";

#[derive(Debug, Clone)]
pub struct SparseEncoder {
    pub patch: usize,
    pub grid: (usize, usize),
    pub patch_embed: Linear,
    /// `[N, d]` learned slot positions.
    pub pos_emb: Tensor,
    pub blocks: Vec<TransformerBlock>,
}

/// Per-block fusion applied while encoding.
pub struct LayerFusion<'a> {
    pub schedule: &'a TauSchedule,
    pub policy: &'a TauPolicy,
    pub gate: &'a Tensor,
}

/// What per-block fusion did during one encode.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FusionReport {
    /// Distinct slots merged at any block.
    pub fused_slots: Vec<usize>,
    /// Threshold used at each fused block.
    pub taus: Vec<f32>,
}

impl SparseEncoder {
    pub fn new(height: usize, width: usize, patch: usize, d: usize, depth: usize, mlp_ratio: usize, rng: &mut Rng) -> Result<Self> {
        check_grid(height, width, patch)?;
        let grid = (height / patch, width / patch);
        Ok(Self {
            patch,
            grid,
            patch_embed: Linear::new("encoder.patch_embed", 3 * patch * patch, d, rng),
            pos_emb: Tensor::randn(&[grid.0 * grid.1, d], 0.1, rng),
            blocks: (0..depth)
                .map(|l| TransformerBlock::new(&format!("encoder.block{l}"), d, mlp_ratio, rng))
                .collect(),
        })
    }

    pub fn slots(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn width(&self) -> usize {
        self.pos_emb.cols()
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    fn check_bank(&self, bank: &TokenBank) -> Result<()> {
        if bank.len() != self.slots() || bank.width() != self.width() || bank.layers.len() != self.depth() {
            return Err(Error::Config(format!(
                "bank of {} slots x {} (depth {}) does not fit an encoder of {} slots x {} (depth {})",
                bank.len(),
                bank.width(),
                bank.layers.len(),
                self.slots(),
                self.width(),
                self.depth()
            )));
        }
        Ok(())
    }

    /// Core pass over rows `idx` with pixel blocks `pixels`.
    fn encode_rows(
        &self,
        g: &mut Graph,
        idx: &[usize],
        pixels: &Tensor,
        prev: Option<&TokenBank>,
        fusion: Option<&LayerFusion>,
    ) -> Result<(Vec<LayerCache>, FusionReport)> {
        let mut report = FusionReport::default();
        let mut fused = vec![false; self.slots()];
        let mut layers = Vec::with_capacity(self.depth());
        let x = g.with_stage(STAGE, |g| -> Result<_> {
            let p = g.constant(pixels.clone());
            let x = self.patch_embed.forward(g, p)?;
            let pos = g.param("encoder.pos_emb", &self.pos_emb);
            let pos = g.gather_rows(pos, idx)?;
            g.add(x, pos)
        })?;
        let mut x = x;
        for (l, block) in self.blocks.iter().enumerate() {
            let (y, keys, values) = g.with_stage(STAGE, |g| -> Result<_> {
                let (q, k, v) = block.qkv(g, x)?;
                let (k, v) = match prev {
                    Some(b) => {
                        let ck = g.constant(b.layers[l].keys.clone());
                        let cv = g.constant(b.layers[l].values.clone());
                        (g.scatter_rows(ck, idx, k)?, g.scatter_rows(cv, idx, v)?)
                    }
                    None => (k, v),
                };
                let a = attention(g, q, k, v, None, false)?;
                let y = block.finish(g, x, a)?;
                Ok((y, g.value(k).clone(), g.value(v).clone()))
            })?;
            let mut y = y;
            if let (Some(f), Some(b)) = (fusion, prev) {
                let prev_rows = b.layers[l].outputs.gather_rows(idx);
                let tau = g.with_stage(super::fusion::STAGE, |g| -> Result<Option<f32>> {
                    Ok(match f.schedule {
                        TauSchedule::Fixed(_) => None,
                        TauSchedule::PerLayer(taus) => Some(taus[l]),
                        TauSchedule::Policy { budget } => {
                            let cur = g.value(y).clone();
                            let cos = row_cosines(g, &prev_rows, &cur);
                            let t = f.policy.adapt_tau(g, similarity_stats(&cos), *budget)?;
                            Some(g.value(t).item())
                        }
                    })
                })?;
                if let Some(tau) = tau {
                    let pr = g.constant(prev_rows);
                    let (merged, sel) = fuse_rows(g, pr, y, tau, f.gate)?;
                    for &s in &sel {
                        fused[idx[s]] = true;
                    }
                    report.taus.push(tau);
                    y = merged;
                }
            }
            let outputs = match prev {
                Some(b) => b.layers[l].outputs.with_rows(idx, g.value(y)),
                None => g.value(y).clone(),
            };
            layers.push(LayerCache { keys, values, outputs });
            x = y;
        }
        report.fused_slots = (0..self.slots()).filter(|&i| fused[i]).collect();
        Ok((layers, report))
    }

    /// Encode every slot of `image` from scratch; all slots come out fresh.
    pub fn full_encode(&self, g: &mut Graph, image: &Tensor, frame_index: u64) -> Result<TokenBank> {
        let idx: Vec<usize> = (0..self.slots()).collect();
        let pixels = patch_rows(image, self.patch, &idx)?;
        let (layers, _) = self.encode_rows(g, &idx, &pixels, None, None)?;
        Ok(TokenBank {
            tokens: layers.last().map_or_else(|| Tensor::zeros(&[0, 0]), |c| c.outputs.clone()),
            stale_age: vec![0; self.slots()],
            frame_index,
            grid: self.grid,
            layers,
        })
    }

    /// Re-encode the active slots against `prev`, copying the rest.
    pub fn selective_update(
        &self,
        g: &mut Graph,
        active: &ActivePatchSet,
        prev: &TokenBank,
        fusion: Option<&LayerFusion>,
    ) -> Result<(TokenBank, FusionReport)> {
        self.check_bank(prev)?;
        if active.indices.windows(2).any(|w| w[0] >= w[1]) || active.indices.last().is_some_and(|&i| i >= self.slots()) {
            return Err(Error::Parameter("active slots must be ascending and inside the grid".into()));
        }
        let stale_age = (0..self.slots())
            .map(|i| {
                if active.indices.binary_search(&i).is_ok() {
                    0
                } else {
                    prev.stale_age[i].saturating_add(1)
                }
            })
            .collect();
        if active.is_empty() {
            let mut next = prev.clone();
            next.stale_age = stale_age;
            next.frame_index = prev.frame_index + 1;
            return Ok((next, FusionReport::default()));
        }
        let (layers, report) = self.encode_rows(g, &active.indices, &active.pixels, Some(prev), fusion)?;
        Ok((
            TokenBank {
                tokens: layers.last().expect("depth >= 1").outputs.clone(),
                stale_age,
                frame_index: prev.frame_index + 1,
                grid: self.grid,
                layers,
            },
            report,
        ))
    }
}

impl Parameterized for SparseEncoder {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut v = self.patch_embed.params();
        v.push(("encoder.pos_emb".into(), &self.pos_emb));
        for b in &self.blocks {
            v.extend(b.params());
        }
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = self.patch_embed.params_mut();
        v.push(("encoder.pos_emb".into(), &mut self.pos_emb));
        for b in &mut self.blocks {
            v.extend(b.params_mut());
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::sttf::mask::{extract_active_patches, ChangeMask};
    use crate::tensor::max_rel_error;
    use proptest::prelude::*;

    fn encoder(size: usize, patch: usize) -> SparseEncoder {
        SparseEncoder::new(size, size, patch, 16, 2, 2, &mut Rng::new(21)).unwrap()
    }

    fn image(size: usize, seed: u64) -> Tensor {
        Tensor::uniform(&[3, size, size], 0.0, 1.0, &mut Rng::new(seed))
    }

    fn update(enc: &SparseEncoder, img: &Tensor, active: &[usize], prev: &TokenBank) -> (TokenBank, u64) {
        let size = img.shape()[1];
        let mask = ChangeMask::from_patches(size, size, enc.patch, active).unwrap();
        let set = extract_active_patches(img, &mask, enc.patch).unwrap();
        let mut g = Graph::inference();
        let (bank, _) = enc.selective_update(&mut g, &set, prev, None).unwrap();
        (bank, g.ledger().get(STAGE))
    }

    #[test]
    fn full_encode_is_deterministic_and_fills_the_grid() {
        let enc = encoder(32, 8);
        let img = image(32, 1);
        let a = enc.full_encode(&mut Graph::inference(), &img, 0).unwrap();
        let b = enc.full_encode(&mut Graph::inference(), &img, 0).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.tokens.shape(), &[16, 16]);
        assert!(a.stale_age.iter().all(|&s| s == 0));
        a.validate().unwrap();
    }

    #[test]
    fn desk_grid_has_196_tokens() {
        let enc = SparseEncoder::new(224, 224, 16, 64, 2, 2, &mut Rng::new(0)).unwrap();
        let bank = enc.full_encode(&mut Graph::inference(), &image(224, 2), 0).unwrap();
        assert_eq!(bank.len(), 196);
        assert_eq!(bank.tokens.shape(), &[196, 64]);
    }

    #[test]
    fn no_active_slots_reuses_the_bank() {
        let enc = encoder(32, 8);
        let prev = enc.full_encode(&mut Graph::inference(), &image(32, 1), 0).unwrap();
        let (next, flops) = update(&enc, &image(32, 2), &[], &prev);
        assert_eq!(flops, 0);
        assert!(next.tokens.bit_eq(&prev.tokens));
        assert_eq!(next.frame_index, 1);
        assert!(next.stale_age.iter().all(|&s| s == 1));
    }

    #[test]
    fn all_active_matches_dense_encoding() {
        let enc = encoder(32, 8);
        let prev = enc.full_encode(&mut Graph::inference(), &image(32, 1), 0).unwrap();
        let img = image(32, 2);
        let all: Vec<usize> = (0..16).collect();
        let (next, _) = update(&enc, &img, &all, &prev);
        let dense = enc.full_encode(&mut Graph::inference(), &img, 1).unwrap();
        assert!(max_rel_error(next.tokens.data(), dense.tokens.data()) < 1e-5);
        assert!(next.stale_age.iter().all(|&s| s == 0));
    }

    #[test]
    fn thirty_active_slots_change_exactly_thirty_tokens() {
        let enc = SparseEncoder::new(224, 224, 16, 64, 2, 2, &mut Rng::new(0)).unwrap();
        let prev = enc.full_encode(&mut Graph::inference(), &image(224, 3), 0).unwrap();
        let active: Vec<usize> = (0..30).map(|i| i * 6 + 1).collect();
        let (next, _) = update(&enc, &image(224, 4), &active, &prev);
        let changed: Vec<usize> = (0..196)
            .filter(|&i| next.tokens.row_slice(i) != prev.tokens.row_slice(i))
            .collect();
        assert_eq!(changed, active);
        for i in 0..196 {
            assert_eq!(next.stale_age[i], if active.contains(&i) { 0 } else { 1 });
        }
    }

    #[test]
    fn bank_of_another_width_is_a_config_error() {
        let enc = encoder(32, 8);
        let other = SparseEncoder::new(32, 32, 8, 8, 2, 2, &mut Rng::new(1)).unwrap();
        let prev = other.full_encode(&mut Graph::inference(), &image(32, 1), 0).unwrap();
        let mask = ChangeMask::from_patches(32, 32, 8, &[0]).unwrap();
        let set = extract_active_patches(&image(32, 1), &mask, 8).unwrap();
        let err = enc.selective_update(&mut Graph::inference(), &set, &prev, None).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn stale_slots_are_detached_from_the_gradient() {
        let enc = encoder(32, 8);
        let prev = enc.full_encode(&mut Graph::inference(), &image(32, 1), 0).unwrap();
        let mask = ChangeMask::from_patches(32, 32, 8, &[2, 9]).unwrap();
        let set = extract_active_patches(&image(32, 5), &mask, 8).unwrap();
        let mut g = Graph::new();
        enc.selective_update(&mut g, &set, &prev, None).unwrap();
        // Only the two active positional rows can receive gradient.
        let pos = g.param_var("encoder.pos_emb").unwrap();
        assert!(g.requires_grad(pos));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn encoder_flops_grow_with_active_count(a in proptest::collection::btree_set(0usize..16, 0..16),
                                                 b in proptest::collection::btree_set(0usize..16, 0..16)) {
            let enc = encoder(32, 8);
            let img = image(32, 7);
            let prev = enc.full_encode(&mut Graph::inference(), &image(32, 6), 0).unwrap();
            let a: Vec<usize> = a.into_iter().collect();
            let b: Vec<usize> = b.into_iter().collect();
            let (_, fa) = update(&enc, &img, &a, &prev);
            let (_, fb) = update(&enc, &img, &b, &prev);
            if a.len() <= b.len() {
                prop_assert!(fa <= fb);
            } else {
                prop_assert!(fa >= fb);
            }
        }
    }
}
