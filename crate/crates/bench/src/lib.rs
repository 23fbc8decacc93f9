//! Criterion benchmarks for the DPANet kernels and model forward pass.
//! See `benches/kernels.rs`.
