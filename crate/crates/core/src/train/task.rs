//! Synthetic toy tasks for joint training.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::events::{OFF, ON};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Direction classes of the motion task, in label order.
pub const DIRECTIONS: [&str; 4] = ["right", "left", "down", "up"];
const OBJECT_SIZES: [usize; 3] = [4, 6, 8];
const MOTION_STEP: usize = 2;
/// The square starts within this many pixels of the frame centre, so where
/// the events land already says which way it moved.
const START_JITTER: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum TaskKind {
    /// 4-way motion direction of a square, from one event frame.
    MotionDirection,
    /// Reproduce a token sequence position by position.
    TokenEcho,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyTask {
    pub kind: TaskKind,
    pub seed: u64,
    pub size: usize,
    pub train: usize,
    pub val: usize,
}

impl ToyTask {
    pub fn motion(seed: u64) -> Self {
        Self {
            kind: TaskKind::MotionDirection,
            seed,
            size: 32,
            train: 512,
            val: 128,
        }
    }

    pub fn echo(seed: u64) -> Self {
        Self {
            kind: TaskKind::TokenEcho,
            seed,
            size: 8,
            train: 256,
            val: 64,
        }
    }
}

/// One motion sample: `[2, size, size]` polarity counts and a direction label.
#[derive(Clone, Debug)]
pub struct MotionSample {
    pub events: Tensor,
    pub label: usize,
    pub key: (usize, usize, usize, usize),
}

#[derive(Clone, Debug)]
pub struct MotionDataset {
    pub train: Vec<MotionSample>,
    pub val: Vec<MotionSample>,
}

fn shuffle<T>(v: &mut [T], rng: &mut Rng) {
    for i in (1..v.len()).rev() {
        let j = rng.below(i as u64 + 1) as usize;
        v.swap(i, j);
    }
}

fn motion_frame(size: usize, dir: usize, side: usize, x: usize, y: usize) -> Tensor {
    let (nx, ny) = match dir {
        0 => (x + MOTION_STEP, y),
        1 => (x - MOTION_STEP, y),
        2 => (x, y + MOTION_STEP),
        _ => (x, y - MOTION_STEP),
    };
    let inside = |px: usize, py: usize, ox: usize, oy: usize| (ox..ox + side).contains(&px) && (oy..oy + side).contains(&py);
    let mut t = Tensor::zeros(&[2, size, size]);
    let d = t.data_mut();
    for py in 0..size {
        for px in 0..size {
            let (was, is) = (inside(px, py, x, y), inside(px, py, nx, ny));
            if is && !was {
                d[ON as usize * size * size + py * size + px] = 1.0;
            } else if was && !is {
                d[OFF as usize * size * size + py * size + px] = 1.0;
            }
        }
    }
    t
}

/// Every `(direction, side, x, y)` start is enumerated once, shuffled by the
/// task seed and cut into train and val, so the splits never share a scene.
pub fn motion_dataset(task: &ToyTask) -> Result<MotionDataset> {
    if task.kind != TaskKind::MotionDirection {
        return Err(Error::Config("motion_dataset needs a motion task".into()));
    }
    let mut keys = Vec::new();
    for dir in 0..4 {
        for &side in &OBJECT_SIZES {
            if side + 2 * (MOTION_STEP + START_JITTER) > task.size {
                continue;
            }
            let centre = (task.size - side) / 2;
            for y in centre - START_JITTER..=centre + START_JITTER {
                for x in centre - START_JITTER..=centre + START_JITTER {
                    keys.push((dir, side, x, y));
                }
            }
        }
    }
    if keys.len() < task.train + task.val {
        return Err(Error::Config(format!(
            "{} distinct scenes cannot fill {} train + {} val",
            keys.len(),
            task.train,
            task.val
        )));
    }
    shuffle(&mut keys, &mut Rng::new(task.seed));
    let sample = |&(dir, side, x, y): &(usize, usize, usize, usize)| MotionSample {
        events: motion_frame(task.size, dir, side, x, y),
        label: dir,
        key: (dir, side, x, y),
    };
    Ok(MotionDataset {
        train: keys[..task.train].iter().map(sample).collect(),
        val: keys[task.train..task.train + task.val].iter().map(sample).collect(),
    })
}

/// Token sequences of length `task.size` drawn from `vocab`, split into disjoint sets.
pub fn echo_dataset(task: &ToyTask, vocab: usize) -> Result<(Vec<Vec<u32>>, Vec<Vec<u32>>)> {
    if task.kind != TaskKind::TokenEcho {
        return Err(Error::Config("echo_dataset needs an echo task".into()));
    }
    let mut rng = Rng::new(task.seed);
    let mut seen = std::collections::BTreeSet::new();
    let mut all = Vec::with_capacity(task.train + task.val);
    let mut attempts = 0;
    while all.len() < task.train + task.val {
        attempts += 1;
        if attempts > 100 * (task.train + task.val) {
            return Err(Error::Config("vocabulary too small for distinct echo sequences".into()));
        }
        let seq: Vec<u32> = (0..task.size).map(|_| rng.below(vocab as u64) as u32).collect();
        if seen.insert(seq.clone()) {
            all.push(seq);
        }
    }
    let val = all.split_off(task.train);
    Ok((all, val))
}
