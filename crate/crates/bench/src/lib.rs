//! Benchmarks live in `benches/`; run them with `cargo bench -p netid1d-bench`.
