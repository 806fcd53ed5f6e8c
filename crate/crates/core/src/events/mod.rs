//! Event records, polarity-count frames and the `EVS1` stream format.

mod format;
mod synth;

pub use format::{read_stream, write_stream, EventStream, HEADER_LEN, RECORD_LEN};
pub use synth::{synth_stream, ShapeKind, SynthSceneConfig, SynthStream};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const OFF: u8 = 0;
pub const ON: u8 = 1;

/// Scale used to map raw counts into `[0, 1]` before the gate network.
pub const COUNT_KAPPA: f32 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct EventRecord {
    /// Microseconds.
    pub t: u64,
    pub x: u16,
    pub y: u16,
    pub polarity: u8,
}

/// Polarity counts over a half-open time window `[start, end)`.
#[derive(Clone, Debug, PartialEq)]
pub struct EventFrame {
    /// Shape `[2, H, W]`; channel 0 counts OFF events, channel 1 ON events.
    pub counts: Tensor,
    pub window: (u64, u64),
}

impl EventFrame {
    pub fn empty(height: usize, width: usize, window: (u64, u64)) -> Self {
        Self {
            counts: Tensor::zeros(&[2, height, width]),
            window,
        }
    }

    pub fn height(&self) -> usize {
        self.counts.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.counts.shape()[2]
    }

    pub fn total(&self) -> f64 {
        self.counts.data().iter().map(|&c| c as f64).sum()
    }

    /// `clamp(count / kappa, 0, 1)` elementwise.
    pub fn normalized(&self, kappa: f32) -> Tensor {
        let data = self
            .counts
            .data()
            .iter()
            .map(|&c| (c / kappa).clamp(0.0, 1.0))
            .collect();
        Tensor::new(self.counts.shape().to_vec(), data).expect("same shape")
    }
}

/// Count events per polarity and pixel inside `[window.0, window.1)`.
///
/// Every record is bounds-checked, including those outside the window.
pub fn voxelize(
    records: &[EventRecord],
    height: usize,
    width: usize,
    window: (u64, u64),
) -> Result<EventFrame> {
    if window.0 >= window.1 {
        return Err(Error::Parameter(format!(
            "empty window [{}, {})",
            window.0, window.1
        )));
    }
    let mut frame = EventFrame::empty(height, width, window);
    let plane = height * width;
    let data = frame.counts.data_mut();
    let mut last_t = 0u64;
    for (index, r) in records.iter().enumerate() {
        if (r.x as usize) >= width || (r.y as usize) >= height {
            return Err(Error::EventBounds {
                index,
                x: r.x,
                y: r.y,
                width,
                height,
            });
        }
        if r.polarity > ON {
            return Err(Error::Format(format!(
                "event {index} has polarity {}",
                r.polarity
            )));
        }
        if r.t < last_t {
            return Err(Error::Format(format!("event {index} breaks time order")));
        }
        last_t = r.t;
        if r.t >= window.0 && r.t < window.1 {
            data[r.polarity as usize * plane + r.y as usize * width + r.x as usize] += 1.0;
        }
    }
    Ok(frame)
}

/// Consecutive frames `[k * period, (k + 1) * period)` for `k < count`.
/// Records must be time-ordered; events past the last window are ignored.
pub fn frames_from_records(
    records: &[EventRecord],
    height: usize,
    width: usize,
    period: u64,
    count: usize,
) -> Result<Vec<EventFrame>> {
    if period == 0 {
        return Err(Error::Parameter("frame period must be positive".into()));
    }
    let mut frames = Vec::with_capacity(count);
    let mut lo = 0;
    for k in 0..count as u64 {
        let window = (k * period, (k + 1) * period);
        let hi = lo + records[lo..].partition_point(|r| r.t < window.1);
        frames.push(voxelize(&records[lo..hi], height, width, window)?);
        lo = hi;
    }
    Ok(frames)
}

/// Number of `period` windows needed to cover every record.
pub fn frames_covering(records: &[EventRecord], period: u64) -> usize {
    records.last().map_or(1, |r| (r.t / period.max(1)) as usize + 1)
}
