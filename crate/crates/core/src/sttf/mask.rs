//! Event-gated change detection and active-patch extraction.

use crate::error::{Error, Result};
use crate::events::{EventFrame, COUNT_KAPPA};
use crate::nn::{Conv2d, Parameterized};
use crate::rng::Rng;
use crate::tensor::{Graph, Tensor, Var};

pub const STAGE: &str = "event_gate";

/// Default per-patch threshold on the mean of the pixel mask.
pub const THETA_PATCH: f32 = 0.01;

/// Two-layer convolutional gate producing a per-pixel change probability.
#[derive(Debug, Clone)]
pub struct EventGate {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

impl EventGate {
    pub const HIDDEN: usize = 4;

    /// Randomly initialised gate, for training.
    pub fn new(name: &str, rng: &mut Rng) -> Self {
        Self {
            conv1: Conv2d::new(&format!("{name}.conv1"), 2, Self::HIDDEN, 3, 1, 1, rng),
            conv2: Conv2d::new(&format!("{name}.conv2"), Self::HIDDEN, 1, 3, 1, 1, rng),
        }
    }

    /// Gate that fires exactly on pixels holding at least one event.
    ///
    /// Hidden channel 0 sums both polarities at the centre tap; the output
    /// reads it back with a negative bias, so a silent pixel scores
    /// `sigmoid(-4) ~ 0.018` and a single event scores about 0.95.
    pub fn calibrated(name: &str) -> Self {
        let mut w1 = Tensor::zeros(&[Self::HIDDEN, 2, 3, 3]);
        w1.data_mut()[4] = 4.0;
        w1.data_mut()[9 + 4] = 4.0;
        let mut w2 = Tensor::zeros(&[1, Self::HIDDEN, 3, 3]);
        w2.data_mut()[4] = 8.0;
        Self {
            conv1: Conv2d {
                name: format!("{name}.conv1"),
                weight: w1,
                bias: Tensor::zeros(&[Self::HIDDEN, 1]),
                stride: 1,
                pad: 1,
            },
            conv2: Conv2d {
                name: format!("{name}.conv2"),
                weight: w2,
                bias: Tensor::full(&[1, 1], -4.0),
                stride: 1,
                pad: 1,
            },
        }
    }

    /// Change probabilities `[1, H, W]` for a normalised `[2, H, W]` input.
    pub fn probabilities(&self, g: &mut Graph, input: Var) -> Result<Var> {
        g.with_stage(STAGE, |g| {
            let h = self.conv1.forward(g, input)?;
            let h = g.tanh(h);
            let o = self.conv2.forward(g, h)?;
            Ok(g.sigmoid(o))
        })
    }
}

impl Parameterized for EventGate {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut v = self.conv1.params();
        v.extend(self.conv2.params());
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = self.conv1.params_mut();
        v.extend(self.conv2.params_mut());
        v
    }
}

/// Binary change map plus its per-patch reduction.
#[derive(Clone, Debug, PartialEq)]
pub struct ChangeMask {
    /// `[1, H, W]` of zeros and ones.
    pub pixel: Tensor,
    pub per_patch: Vec<bool>,
    pub active_count: u32,
    pub patch: usize,
}

impl ChangeMask {
    /// Reduce a binary pixel mask: patch `i` is active when its mean exceeds `theta`.
    pub fn from_pixels(pixel: Tensor, patch: usize, theta: f32) -> Result<Self> {
        let (h, w) = match pixel.shape() {
            [1, h, w] => (*h, *w),
            other => {
                return Err(Error::Dimension {
                    op: "change_mask",
                    lhs: other.to_vec(),
                    rhs: vec![1],
                })
            }
        };
        check_grid(h, w, patch)?;
        let (gh, gw) = (h / patch, w / patch);
        let area = (patch * patch) as f32;
        let mut per_patch = vec![false; gh * gw];
        for (i, active) in per_patch.iter_mut().enumerate() {
            let (py, px) = (i / gw, i % gw);
            let mut sum = 0.0f32;
            for y in py * patch..(py + 1) * patch {
                sum += pixel.data()[y * w + px * patch..y * w + (px + 1) * patch].iter().sum::<f32>();
            }
            *active = sum / area > theta;
        }
        let active_count = per_patch.iter().filter(|&&a| a).count() as u32;
        Ok(Self {
            pixel,
            per_patch,
            active_count,
            patch,
        })
    }

    /// Mask with every patch in the given state, for tests and dense baselines.
    pub fn uniform(height: usize, width: usize, patch: usize, active: bool) -> Result<Self> {
        check_grid(height, width, patch)?;
        let v = if active { 1.0 } else { 0.0 };
        Self::from_pixels(Tensor::full(&[1, height, width], v), patch, THETA_PATCH)
    }

    /// Mask activating exactly the patches in `active`.
    pub fn from_patches(height: usize, width: usize, patch: usize, active: &[usize]) -> Result<Self> {
        check_grid(height, width, patch)?;
        let gw = width / patch;
        let mut pixel = Tensor::zeros(&[1, height, width]);
        for &i in active {
            if i >= (height / patch) * gw {
                return Err(Error::Parameter(format!("patch {i} outside the grid")));
            }
            let (py, px) = (i / gw, i % gw);
            for y in py * patch..(py + 1) * patch {
                pixel.data_mut()[y * width + px * patch..y * width + (px + 1) * patch].fill(1.0);
            }
        }
        Self::from_pixels(pixel, patch, THETA_PATCH)
    }

    pub fn active_indices(&self) -> Vec<usize> {
        self.per_patch
            .iter()
            .enumerate()
            .filter_map(|(i, &a)| a.then_some(i))
            .collect()
    }
}

pub(crate) fn check_grid(h: usize, w: usize, patch: usize) -> Result<()> {
    if patch == 0 || !h.is_multiple_of(patch) || !w.is_multiple_of(patch) {
        return Err(Error::Config(format!("patch {patch} does not tile {w}x{h}")));
    }
    Ok(())
}

/// Run the gate on raw counts and threshold at 0.5, then reduce per patch.
pub fn detect_change_mask(
    g: &mut Graph,
    gate: &EventGate,
    frame: &EventFrame,
    height: usize,
    width: usize,
    patch: usize,
    theta: f32,
) -> Result<ChangeMask> {
    if frame.height() != height || frame.width() != width {
        return Err(Error::Config(format!(
            "event frame {}x{} does not match model input {width}x{height}",
            frame.width(),
            frame.height()
        )));
    }
    let input = g.constant(frame.normalized(COUNT_KAPPA));
    let probs = gate.probabilities(g, input)?;
    let pixel: Vec<f32> = g
        .value(probs)
        .data()
        .iter()
        .map(|&p| if p > 0.5 { 1.0 } else { 0.0 })
        .collect();
    g.with_stage(STAGE, |g| g.charge(pixel.len()));
    ChangeMask::from_pixels(Tensor::new(vec![1, height, width], pixel)?, patch, theta)
}

/// Indices and flattened pixel blocks of the active patches.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivePatchSet {
    /// Ascending patch indices.
    pub indices: Vec<usize>,
    /// `[k, C * patch * patch]`, channel-major then row-major inside a patch.
    pub pixels: Tensor,
}

impl ActivePatchSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Flattened pixel blocks of patches `indices` from a `[C, H, W]` image.
pub fn patch_rows(image: &Tensor, patch: usize, indices: &[usize]) -> Result<Tensor> {
    let (c, h, w) = match image.shape() {
        [c, h, w] => (*c, *h, *w),
        other => {
            return Err(Error::Dimension {
                op: "patch_rows",
                lhs: other.to_vec(),
                rhs: vec![3],
            })
        }
    };
    check_grid(h, w, patch)?;
    let gw = w / patch;
    let n = (h / patch) * gw;
    let row_len = c * patch * patch;
    let mut out = Vec::with_capacity(indices.len() * row_len);
    for &i in indices {
        if i >= n {
            return Err(Error::Parameter(format!("patch {i} outside a grid of {n}")));
        }
        let (py, px) = (i / gw, i % gw);
        for ch in 0..c {
            for y in py * patch..(py + 1) * patch {
                let start = ch * h * w + y * w + px * patch;
                out.extend_from_slice(&image.data()[start..start + patch]);
            }
        }
    }
    Tensor::new(vec![indices.len(), row_len], out)
}

pub fn extract_active_patches(image: &Tensor, mask: &ChangeMask, patch: usize) -> Result<ActivePatchSet> {
    let expected = [mask.pixel.shape()[1], mask.pixel.shape()[2]];
    if image.ndim() != 3 || image.shape()[1..] != expected {
        return Err(Error::Dimension {
            op: "extract_active_patches",
            lhs: image.shape().to_vec(),
            rhs: mask.pixel.shape().to_vec(),
        });
    }
    let indices = mask.active_indices();
    let pixels = patch_rows(image, patch, &indices)?;
    Ok(ActivePatchSet { indices, pixels })
}
