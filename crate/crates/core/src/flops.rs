//! Deterministic FLOPs accounting.
//!
//! Conventions: one multiply-accumulate is 2 FLOPs (so `matmul` costs
//! `2·m·k·n` and `conv2d` costs `2·C_out·C_in·kh·kw·H'·W'`); elementwise
//! ops cost 1 FLOP per output element; reductions cost 1 FLOP per input
//! element; pure data movement (reshape, gather, scatter, concat, detach)
//! is free. Backward passes are not counted.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsLedger {
    entries: BTreeMap<String, u64>,
    total: u64,
}

impl FlopsLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, stage: &str, flops: u64) {
        if flops == 0 {
            return;
        }
        match self.entries.get_mut(stage) {
            Some(c) => *c += flops,
            None => {
                self.entries.insert(stage.to_string(), flops);
            }
        }
        self.total += flops;
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn get(&self, stage: &str) -> u64 {
        self.entries.get(stage).copied().unwrap_or(0)
    }

    pub fn entries(&self) -> &BTreeMap<String, u64> {
        &self.entries
    }

    pub fn merge(&mut self, other: &FlopsLedger) {
        for (k, v) in &other.entries {
            self.record(k, *v);
        }
    }

    /// Per-stage difference `self - earlier`; `earlier` must be a prefix state of `self`.
    pub fn delta_since(&self, earlier: &FlopsLedger) -> FlopsLedger {
        let mut out = FlopsLedger::new();
        for (k, v) in &self.entries {
            let before = earlier.get(k);
            debug_assert!(*v >= before, "ledger counts never decrease");
            out.record(k, v - before);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn total_tracks_entries() {
        let mut l = FlopsLedger::new();
        l.record("a", 10);
        l.record("b", 5);
        l.record("a", 1);
        assert_eq!(l.get("a"), 11);
        assert_eq!(l.total(), 16);
        assert_eq!(l.entries().values().sum::<u64>(), l.total());
    }

    #[test]
    fn zero_records_leave_no_entry() {
        let mut l = FlopsLedger::new();
        l.record("idle", 0);
        assert!(l.entries().is_empty());
    }

    #[test]
    fn delta_since_prefix() {
        let mut l = FlopsLedger::new();
        l.record("a", 3);
        let snap = l.clone();
        l.record("a", 4);
        l.record("b", 2);
        let d = l.delta_since(&snap);
        assert_eq!(d.get("a"), 4);
        assert_eq!(d.get("b"), 2);
        assert_eq!(d.total(), 6);
    }
}
