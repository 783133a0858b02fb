//! Criterion benchmarks for the imaging kernels; see benches/.
