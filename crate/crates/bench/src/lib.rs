//! Criterion benchmarks for the attention branches; see `benches/`.
