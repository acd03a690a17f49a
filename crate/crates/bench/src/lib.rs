//! Criterion benchmarks for the numerical kernels live under `benches/`.
