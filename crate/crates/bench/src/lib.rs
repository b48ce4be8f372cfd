//! Criterion benchmarks for the MHA-UNet kernels live in `benches/`.
