//! Decoder-only transformer with switchable QK activation sharing.
//!
//! Layers can run in compute mode (own Q, K, V) or sharing mode (own V,
//! Q and K reused from the nearest shallower compute layer). A progressive
//! schedule grows the shared region from the deep end during training, and a
//! trained checkpoint can be served at any sharing length up to the trained
//! region.

pub mod error;
pub mod flops;
pub mod infer;
pub mod model;
pub mod numcore;
pub mod schedule;
pub mod train;

pub use error::{Error, Result};
