use crate::model::{ModelConfig, ShareSet};
use crate::numcore::Float;

/// Per-layer decode state. Sharing layers keep values only and read keys
/// from their boundary layer.
#[derive(Debug, Clone)]
pub enum LayerCache<T> {
    Compute { k: Vec<T>, v: Vec<T> },
    Sharing { source: usize, v: Vec<T> },
}

impl<T> LayerCache<T> {
    pub fn v(&self) -> &[T] {
        match self {
            LayerCache::Compute { v, .. } | LayerCache::Sharing { v, .. } => v,
        }
    }

    pub fn has_keys(&self) -> bool {
        matches!(self, LayerCache::Compute { .. })
    }
}

#[derive(Debug, Clone)]
pub struct DecodeCache<T> {
    pub layers: Vec<LayerCache<T>>,
    /// Row width of every K/V entry.
    pub d_kv: usize,
    /// Positions stored so far.
    pub len: usize,
}

impl<T: Float> DecodeCache<T> {
    pub fn new(config: &ModelConfig, share: &ShareSet) -> Self {
        let sources = share.qk_sources(config.n_layers);
        let layers = (0..config.n_layers)
            .map(|i| {
                if share.contains(i) {
                    LayerCache::Sharing { source: sources[i], v: Vec::new() }
                } else {
                    LayerCache::Compute { k: Vec::new(), v: Vec::new() }
                }
            })
            .collect();
        Self { layers, d_kv: config.d_kv(), len: 0 }
    }

    /// Keys layer `i` attends with, `[len, d_kv]`.
    pub fn keys(&self, i: usize) -> &[T] {
        match &self.layers[i] {
            LayerCache::Compute { k, .. } => k,
            LayerCache::Sharing { source, .. } => self.keys(*source),
        }
    }

    /// Bytes held by every cache buffer.
    pub fn bytes(&self) -> usize {
        let el = std::mem::size_of::<T>();
        self.layers
            .iter()
            .map(|l| match l {
                LayerCache::Compute { k, v } => (k.len() + v.len()) * el,
                LayerCache::Sharing { v, .. } => v.len() * el,
            })
            .sum()
    }
}

/// Closed-form cache size with `k` sharing layers after `positions` tokens.
pub fn cache_footprint(config: &ModelConfig, k: usize, positions: usize, bytes_per_el: usize) -> usize {
    let k = k.min(config.n_layers);
    (2 * (config.n_layers - k) + k) * positions * config.d_kv() * bytes_per_el
}
