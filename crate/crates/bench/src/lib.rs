//! Criterion benchmarks for the omnifuse kernels; see `benches/`.
