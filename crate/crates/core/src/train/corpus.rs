//! Byte-level corpus ingestion, windowing and the train/validation split.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Beginning-of-stream token, one past the byte range.
pub const BOS: usize = 256;
/// 256 byte values plus [`BOS`].
pub const BYTE_VOCAB: usize = 257;

/// Reads a file as raw bytes and prefixes it with [`BOS`].
pub fn ingest_corpus(path: &Path) -> Result<Vec<usize>> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Ingest(format!("cannot read corpus {}: {e}", path.display())))?;
    tokenize(&bytes).ok_or_else(|| Error::Ingest(format!("corpus {} is empty", path.display())))
}

/// `None` for empty input.
pub fn tokenize(bytes: &[u8]) -> Option<Vec<usize>> {
    if bytes.is_empty() {
        return None;
    }
    let mut out = Vec::with_capacity(bytes.len() + 1);
    out.push(BOS);
    out.extend(bytes.iter().map(|&b| b as usize));
    Some(out)
}

/// Start offsets of every `(seq_len+1)`-token window placed `stride` apart.
pub fn window_starts(n_tokens: usize, seq_len: usize, stride: usize) -> Vec<usize> {
    let w = seq_len + 1;
    if n_tokens < w || stride == 0 {
        return Vec::new();
    }
    (0..=n_tokens - w).step_by(stride).collect()
}

/// Token stream with a fixed split of its windows.
#[derive(Debug, Clone)]
pub struct Dataset {
    tokens: Vec<usize>,
    seq_len: usize,
    train: Vec<usize>,
    val: Vec<usize>,
}

impl Dataset {
    /// Splits the windows by a seeded shuffle; `val_frac` of them (at least
    /// one) go to validation.
    pub fn new(tokens: Vec<usize>, seq_len: usize, stride: usize, val_frac: f64, seed: u64) -> Result<Self> {
        if seq_len == 0 {
            return Err(Error::config("seq_len must be at least 1"));
        }
        if !(0.0..1.0).contains(&val_frac) {
            return Err(Error::config(format!("val_frac {val_frac} outside [0, 1)")));
        }
        let mut starts = window_starts(tokens.len(), seq_len, stride);
        if starts.len() < 2 {
            return Err(Error::Ingest(format!(
                "corpus of {} tokens yields {} windows of {} tokens, need at least 2",
                tokens.len(),
                starts.len(),
                seq_len + 1
            )));
        }
        starts.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_val = ((starts.len() as f64 * val_frac).round() as usize).clamp(1, starts.len() - 1);
        let train = starts.split_off(n_val);
        Ok(Self { tokens, seq_len, train, val: starts })
    }

    pub fn load(path: &Path, seq_len: usize, stride: usize, val_frac: f64, seed: u64) -> Result<Self> {
        Self::new(ingest_corpus(path)?, seq_len, stride, val_frac, seed)
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn train_starts(&self) -> &[usize] {
        &self.train
    }

    pub fn val_starts(&self) -> &[usize] {
        &self.val
    }

    pub fn window(&self, start: usize) -> &[usize] {
        &self.tokens[start..start + self.seq_len + 1]
    }

    fn pack(&self, starts: impl IntoIterator<Item = usize>) -> Vec<usize> {
        starts.into_iter().flat_map(|s| self.window(s).iter().copied()).collect()
    }

    /// Training batch for `step`, a pure function of `(seed, step)`.
    pub fn batch(&self, seed: u64, step: usize, batch_size: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(step as u64 + 1);
        let picks: Vec<usize> = (0..batch_size).map(|_| self.train[rng.gen_range(0..self.train.len())]).collect();
        self.pack(picks)
    }

    /// First `max` validation windows (all when `None`), packed.
    pub fn val_windows(&self, max: Option<usize>) -> Vec<usize> {
        let n = max.map_or(self.val.len(), |m| m.min(self.val.len()));
        self.pack(self.val[..n].iter().copied())
    }
}
