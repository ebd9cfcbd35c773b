//! Training: corpus ingestion, AdamW, the progressive-sharing loop, metrics
//! and checkpoints.

mod checkpoint;
mod corpus;
mod metrics;
mod optim;
mod trainer;

pub use checkpoint::{read_manifest, stored_dtype, Checkpoint, Manifest, TensorEntry, FORMAT_VERSION, MAGIC};
pub use corpus::{ingest_corpus, tokenize, window_starts, Dataset, BOS, BYTE_VOCAB};
pub use metrics::{read_records, MetricsWriter, TrainRecord};
pub use optim::{AdamW, AdamWConfig};
pub use trainer::{evaluate, TrainConfig, Trainer};
