//! Criterion benchmarks for the tensor engine and model; see `benches/`.
