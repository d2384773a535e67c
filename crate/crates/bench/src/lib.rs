//! Criterion benchmarks for ifs-seg live under benches/.
