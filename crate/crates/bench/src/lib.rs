//! Criterion benchmarks for the engines live under `benches/`.
