//! Criterion benchmarks for the rate loss, autodiff kernels and tile codec; see `benches/`.
