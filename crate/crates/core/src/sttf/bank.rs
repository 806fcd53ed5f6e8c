//! Persistent per-patch token memory.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-layer cache kept so later frames can re-encode a subset of slots.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerCache {
    /// `[N, d]` attention keys of every slot.
    pub keys: Tensor,
    /// `[N, d]` attention values of every slot.
    pub values: Tensor,
    /// `[N, d]` block outputs of every slot.
    pub outputs: Tensor,
}

/// Fixed set of `N` positional token slots with staleness bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBank {
    /// `[N, d]`, equal to the last layer's outputs.
    pub tokens: Tensor,
    /// Frames since each slot was last re-encoded.
    pub stale_age: Vec<u32>,
    pub frame_index: u64,
    /// Patch grid `(rows, cols)`.
    pub grid: (usize, usize),
    pub layers: Vec<LayerCache>,
}

impl TokenBank {
    pub fn len(&self) -> usize {
        self.stale_age.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stale_age.is_empty()
    }

    pub fn width(&self) -> usize {
        self.tokens.cols()
    }

    pub fn is_stale(&self, i: usize) -> bool {
        self.stale_age[i] > 0
    }

    pub fn refreshed(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.stale_age[i] == 0).collect()
    }

    /// Checks internal shape agreement.
    pub fn validate(&self) -> Result<()> {
        let (n, d) = (self.len(), self.tokens.cols());
        if self.tokens.shape() != [n, d] || self.grid.0 * self.grid.1 != n {
            return Err(Error::Session(format!(
                "token bank of shape {:?} disagrees with {n} slots on a {:?} grid",
                self.tokens.shape(),
                self.grid
            )));
        }
        for (l, c) in self.layers.iter().enumerate() {
            for t in [&c.keys, &c.values, &c.outputs] {
                if t.shape() != [n, d] {
                    return Err(Error::Session(format!("layer {l} cache has shape {:?}", t.shape())));
                }
            }
        }
        match self.layers.last() {
            Some(c) if !c.outputs.bit_eq(&self.tokens) => {
                Err(Error::Session("tokens differ from the last layer outputs".into()))
            }
            _ => Ok(()),
        }
    }

    /// Checkpoint entries; integers are stored bit-cast inside f32 words.
    pub fn to_tensors(&self) -> BTreeMap<String, Tensor> {
        let mut m = BTreeMap::new();
        m.insert("state.tokens".into(), self.tokens.clone());
        m.insert("state.stale_age".into(), words(self.stale_age.iter().copied()));
        m.insert(
            "state.frame_index".into(),
            words([self.frame_index as u32, (self.frame_index >> 32) as u32]),
        );
        m.insert("state.grid".into(), words([self.grid.0 as u32, self.grid.1 as u32]));
        m.insert("state.depth".into(), words([self.layers.len() as u32]));
        for (l, c) in self.layers.iter().enumerate() {
            m.insert(format!("state.layer{l}.keys"), c.keys.clone());
            m.insert(format!("state.layer{l}.values"), c.values.clone());
            m.insert(format!("state.layer{l}.outputs"), c.outputs.clone());
        }
        m
    }

    pub fn from_tensors(m: &BTreeMap<String, Tensor>) -> Result<Self> {
        let get = |k: &str| {
            m.get(k)
                .ok_or_else(|| Error::Session(format!("state is missing {k}")))
        };
        let frame = unwords(get("state.frame_index")?);
        let grid = unwords(get("state.grid")?);
        let depth = unwords(get("state.depth")?);
        if frame.len() != 2 || grid.len() != 2 || depth.len() != 1 {
            return Err(Error::Session("malformed state header".into()));
        }
        let mut layers = Vec::with_capacity(depth[0] as usize);
        for l in 0..depth[0] {
            layers.push(LayerCache {
                keys: get(&format!("state.layer{l}.keys"))?.clone(),
                values: get(&format!("state.layer{l}.values"))?.clone(),
                outputs: get(&format!("state.layer{l}.outputs"))?.clone(),
            });
        }
        let bank = Self {
            tokens: get("state.tokens")?.clone(),
            stale_age: unwords(get("state.stale_age")?),
            frame_index: frame[0] as u64 | ((frame[1] as u64) << 32),
            grid: (grid[0] as usize, grid[1] as usize),
            layers,
        };
        bank.validate()?;
        Ok(bank)
    }
}

fn words(v: impl IntoIterator<Item = u32>) -> Tensor {
    let data: Vec<f32> = v.into_iter().map(f32::from_bits).collect();
    Tensor::new(vec![data.len()], data).expect("1-d")
}

fn unwords(t: &Tensor) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::{load_checkpoint, save_checkpoint};
    use crate::rng::Rng;

    fn bank() -> TokenBank {
        let mut rng = Rng::new(3);
        let tokens = Tensor::randn(&[6, 4], 1.0, &mut rng);
        TokenBank {
            tokens: tokens.clone(),
            stale_age: vec![0, 1, 2, 0, u32::MAX, 7],
            frame_index: (1u64 << 40) + 5,
            grid: (2, 3),
            layers: vec![LayerCache {
                keys: Tensor::randn(&[6, 4], 1.0, &mut rng),
                values: Tensor::randn(&[6, 4], 1.0, &mut rng),
                outputs: tokens,
            }],
        }
    }

    #[test]
    fn state_round_trips_through_checkpoint() {
        let b = bank();
        let bytes = save_checkpoint(&b.to_tensors()).unwrap();
        let back = TokenBank::from_tensors(&load_checkpoint(&bytes).unwrap()).unwrap();
        assert_eq!(back.stale_age, b.stale_age);
        assert_eq!(back.frame_index, b.frame_index);
        assert!(back.tokens.bit_eq(&b.tokens));
        assert!(back.layers[0].keys.bit_eq(&b.layers[0].keys));
    }

    #[test]
    fn inconsistent_state_rejected() {
        let mut m = bank().to_tensors();
        m.insert("state.grid".into(), words([3, 3]));
        assert!(matches!(TokenBank::from_tensors(&m), Err(Error::Session(_))));
        let mut m = bank().to_tensors();
        m.remove("state.layer0.values");
        assert!(TokenBank::from_tensors(&m).is_err());
    }
}
