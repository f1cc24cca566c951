//! Criterion benchmarks for the codec and the model forward pass live in `benches/`.
