//! Incremental decoding with per-layer caches, generation and a throughput
//! benchmark over sharing-region lengths.

mod bench;
mod cache;
mod decode;

pub use bench::{bench_throughput, to_csv, BenchConfig, BenchRow, CSV_HEADER};
pub use cache::{cache_footprint, DecodeCache, LayerCache};
pub use decode::{generate, Decoder, GenOutput, GenRequest, Sampling};
