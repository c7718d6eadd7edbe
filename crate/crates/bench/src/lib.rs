//! Criterion benchmarks for the solver library; see `benches/`.
