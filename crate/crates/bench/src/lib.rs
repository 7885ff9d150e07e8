//! Criterion benchmarks for the simulator, grid resolvents and discrete
//! potential theory; see `benches/kernels.rs`.
