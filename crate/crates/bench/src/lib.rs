//! Criterion benchmarks for optstop-core; see `benches/`.
