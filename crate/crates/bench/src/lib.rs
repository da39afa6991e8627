//! Criterion benchmarks for the `specdec` crate; see `benches/`.
