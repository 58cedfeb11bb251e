//! Benchmark targets live in `benches/`; run them with `cargo bench -p glatts-bench`.
