//! Criterion benchmarks for the model's forward pass and per-sample training
//! step; run with `cargo bench -p segqa-bench`.
