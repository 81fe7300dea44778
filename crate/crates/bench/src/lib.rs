//! Criterion benchmarks for `mni-core`; see `benches/`.
