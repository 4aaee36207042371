//! Criterion benchmarks for the codec, the training step and the channel; see `benches/`.
