//! Benchmark reports: per-frame records plus aggregates derived from them.
//!
//! JSON and CSV carry the same records. Wall-clock timing lives in a
//! separate [`Timing`] value so that reports stay byte-identical across runs.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const REPORT_VERSION: u32 = 1;
const STAGE_PREFIX: &str = "flops.";
const FIXED_COLUMNS: [&str; 10] = [
    "frame",
    "active_tokens",
    "fused_count",
    "flops",
    "w_tiny",
    "w_small",
    "w_medium",
    "level",
    "active_channels",
    "output",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame: usize,
    /// Tokens encoded this frame.
    pub active_tokens: usize,
    pub fused_count: usize,
    /// Total cost `F` of the frame.
    pub flops: u64,
    pub stages: BTreeMap<String, u64>,
    pub routing_w: Option<[f32; 3]>,
    pub level: Option<usize>,
    pub active_channels: Option<usize>,
    pub output: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub frames: usize,
    pub slots: usize,
    pub mean_active_tokens: f64,
    pub token_reduction_pct: f64,
    pub total_flops: u64,
    /// `dense` for the token engines, `medium-only` for the routed one.
    pub baseline: String,
    pub baseline_flops_per_frame: u64,
    pub baseline_flops: u64,
    pub flops_reduction_pct: f64,
}

impl Aggregates {
    pub fn compute(records: &[FrameRecord], slots: usize, baseline: &str, baseline_flops_per_frame: u64) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Parameter("a report needs at least one frame".into()));
        }
        if slots == 0 {
            return Err(Error::Parameter("slot count must be positive".into()));
        }
        let frames = records.len();
        let mean_active_tokens = records.iter().map(|r| r.active_tokens as f64).sum::<f64>() / frames as f64;
        let total_flops = records.iter().map(|r| r.flops).sum();
        let baseline_flops = baseline_flops_per_frame * frames as u64;
        let flops_reduction_pct = if baseline_flops == 0 {
            0.0
        } else {
            100.0 * (1.0 - total_flops as f64 / baseline_flops as f64)
        };
        Ok(Self {
            frames,
            slots,
            mean_active_tokens,
            token_reduction_pct: 100.0 * (1.0 - mean_active_tokens / slots as f64),
            total_flops,
            baseline: baseline.to_string(),
            baseline_flops_per_frame,
            baseline_flops,
            flops_reduction_pct,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub report_version: u32,
    pub mode: String,
    pub seed: u64,
    pub source: String,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub aggregates: Aggregates,
    pub frames: Vec<FrameRecord>,
}

impl BenchReport {
    /// Checks the per-frame records against themselves and the aggregates.
    pub fn validate(&self) -> Result<()> {
        if self.report_version != REPORT_VERSION {
            return Err(Error::Format(format!("unsupported report version {}", self.report_version)));
        }
        for r in &self.frames {
            let sum: u64 = r.stages.values().sum();
            if sum != r.flops {
                return Err(Error::Contract(format!("frame {}: stages sum to {sum}, total says {}", r.frame, r.flops)));
            }
        }
        let a = &self.aggregates;
        let again = Aggregates::compute(&self.frames, a.slots, &a.baseline, a.baseline_flops_per_frame)?;
        if &again != a {
            return Err(Error::Contract("aggregates do not match the per-frame records".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Stage columns are the sorted union over frames; absent stages read as 0.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let stages: BTreeSet<&String> = self.frames.iter().flat_map(|r| r.stages.keys()).collect();
        let mut w = csv::Writer::from_writer(out);
        let header: Vec<String> = FIXED_COLUMNS
            .iter()
            .map(|s| s.to_string())
            .chain(stages.iter().map(|s| format!("{STAGE_PREFIX}{s}")))
            .collect();
        w.write_record(&header)?;
        let opt = |v: Option<String>| v.unwrap_or_default();
        for r in &self.frames {
            let mut row = vec![
                r.frame.to_string(),
                r.active_tokens.to_string(),
                r.fused_count.to_string(),
                r.flops.to_string(),
            ];
            for i in 0..3 {
                row.push(opt(r.routing_w.map(|w| w[i].to_string())));
            }
            row.push(opt(r.level.map(|v| v.to_string())));
            row.push(opt(r.active_channels.map(|v| v.to_string())));
            row.push(r.output.iter().map(u32::to_string).collect::<Vec<_>>().join(" "));
            for s in &stages {
                row.push(r.stages.get(*s).copied().unwrap_or(0).to_string());
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        String::from_utf8(buf).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn write_files(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.json"), self.to_json()?)?;
        self.write_csv(std::fs::File::create(dir.join("report.csv"))?)
    }
}

/// Frame records from a report CSV. Zero stage counts are dropped, matching
/// how the ledger stores them.
pub fn read_csv<R: Read>(input: R) -> Result<Vec<FrameRecord>> {
    let mut rd = csv::Reader::from_reader(input);
    let header = rd.headers()?.clone();
    if header.len() < FIXED_COLUMNS.len() || header.iter().zip(FIXED_COLUMNS).any(|(a, b)| a != b) {
        return Err(Error::Format("report CSV header does not match".into()));
    }
    let mut stage_names = Vec::new();
    for h in header.iter().skip(FIXED_COLUMNS.len()) {
        let name = h
            .strip_prefix(STAGE_PREFIX)
            .ok_or_else(|| Error::Format(format!("unexpected column {h:?}")))?;
        stage_names.push(name.to_string());
    }
    fn num<T: std::str::FromStr>(field: &str, col: &str) -> Result<T> {
        field.parse().map_err(|_| Error::Format(format!("bad value {field:?} in column {col}")))
    }
    fn opt<T: std::str::FromStr>(field: &str, col: &str) -> Result<Option<T>> {
        if field.is_empty() {
            Ok(None)
        } else {
            num(field, col).map(Some)
        }
    }
    let mut out = Vec::new();
    for row in rd.records() {
        let row = row?;
        let f = |i: usize| row.get(i).unwrap_or("");
        let w: [Option<f32>; 3] = [opt(f(4), "w_tiny")?, opt(f(5), "w_small")?, opt(f(6), "w_medium")?];
        let routing_w = match w {
            [Some(a), Some(b), Some(c)] => Some([a, b, c]),
            [None, None, None] => None,
            _ => return Err(Error::Format("routing weights must be all present or all absent".into())),
        };
        let output = f(9)
            .split_whitespace()
            .map(|t| num(t, "output"))
            .collect::<Result<Vec<u32>>>()?;
        let mut stages = BTreeMap::new();
        for (k, name) in stage_names.iter().enumerate() {
            let v: u64 = num(f(FIXED_COLUMNS.len() + k), name)?;
            if v != 0 {
                stages.insert(name.clone(), v);
            }
        }
        out.push(FrameRecord {
            frame: num(f(0), "frame")?,
            active_tokens: num(f(1), "active_tokens")?,
            fused_count: num(f(2), "fused_count")?,
            flops: num(f(3), "flops")?,
            stages,
            routing_w,
            level: opt(f(7), "level")?,
            active_channels: opt(f(8), "active_channels")?,
            output,
        });
    }
    Ok(out)
}

/// Wall-clock measurements; informational only and never part of the report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub seconds: f64,
    pub frames_per_sec: f64,
}

impl Timing {
    pub fn new(frames: usize, seconds: f64) -> Self {
        Self {
            seconds,
            frames_per_sec: if seconds > 0.0 { frames as f64 / seconds } else { 0.0 },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn record(frame: usize, tokens: usize, stages: &[(&str, u64)], w: Option<[f32; 3]>) -> FrameRecord {
        let stages: BTreeMap<String, u64> = stages.iter().map(|(k, v)| (k.to_string(), *v)).collect();
        FrameRecord {
            frame,
            active_tokens: tokens,
            fused_count: tokens / 2,
            flops: stages.values().sum(),
            stages,
            routing_w: w,
            level: w.map(|_| 1),
            active_channels: w.map(|_| 7),
            output: vec![1, 2, frame as u32],
        }
    }

    fn report(frames: Vec<FrameRecord>) -> BenchReport {
        BenchReport {
            report_version: REPORT_VERSION,
            mode: "sttf".into(),
            seed: 0,
            source: "test".into(),
            height: 224,
            width: 224,
            patch: 16,
            aggregates: Aggregates::compute(&frames, 196, "dense", 1000).unwrap(),
            frames,
        }
    }

    #[test]
    fn aggregates_by_hand() {
        let frames = vec![
            record(0, 196, &[("a", 600)], None),
            record(1, 30, &[("a", 100), ("b", 50)], None),
            record(2, 20, &[("b", 50)], None),
            record(3, 2, &[], None),
        ];
        let a = Aggregates::compute(&frames, 196, "dense", 1000).unwrap();
        assert_eq!(a.mean_active_tokens, 62.0);
        assert!((a.token_reduction_pct - 100.0 * (1.0 - 62.0 / 196.0)).abs() < 1e-12);
        assert_eq!((a.total_flops, a.baseline_flops), (800, 4000));
        assert!((a.flops_reduction_pct - 80.0).abs() < 1e-12);
    }

    #[test]
    fn empty_report_rejected() {
        assert!(Aggregates::compute(&[], 196, "dense", 1).is_err());
    }

    #[test]
    fn tampered_aggregates_fail_validation() {
        let mut r = report(vec![record(0, 10, &[("a", 5)], None)]);
        r.validate().unwrap();
        r.aggregates.total_flops += 1;
        assert!(matches!(r.validate(), Err(Error::Contract(_))));
        let mut r = report(vec![record(0, 10, &[("a", 5)], None)]);
        r.frames[0].flops += 1;
        assert!(r.validate().is_err());
    }

    #[test]
    fn bad_csv_header_rejected() {
        assert!(matches!(read_csv("frame,x\n1,2\n".as_bytes()), Err(Error::Format(_))));
    }

    fn arb_record() -> impl Strategy<Value = FrameRecord> {
        (
            0usize..500,
            0usize..197,
            proptest::collection::btree_map("[a-z_]{1,8}", 1u64..1_000_000, 0..4),
            proptest::option::of(proptest::array::uniform3(0f32..1.0)),
            proptest::collection::vec(0u32..256, 0..5),
        )
            .prop_map(|(frame, tokens, stages, w, output)| FrameRecord {
                frame,
                active_tokens: tokens,
                fused_count: tokens / 3,
                flops: stages.values().sum(),
                stages,
                routing_w: w,
                level: w.map(|_| 2),
                active_channels: w.map(|_| 11),
                output,
            })
    }

    proptest! {
        #[test]
        fn csv_and_json_carry_the_same_records(frames in proptest::collection::vec(arb_record(), 1..6)) {
            let r = report(frames);
            let back = BenchReport::from_json(&r.to_json().unwrap()).unwrap();
            prop_assert_eq!(&back, &r);
            back.validate().unwrap();
            let csv = read_csv(r.csv_string().unwrap().as_bytes()).unwrap();
            prop_assert_eq!(&csv, &r.frames);
        }
    }
}
