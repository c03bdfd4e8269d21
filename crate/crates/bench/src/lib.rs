//! Criterion benchmarks for the numeric kernels and the elastic forward pass
//! live under `benches/`; run them with `cargo bench -p elastron-bench`.
