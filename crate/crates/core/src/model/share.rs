use std::collections::BTreeSet;

use crate::error::{Error, Result};

/// Layers running in sharing mode for one forward pass.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct ShareSet(BTreeSet<usize>);

impl ShareSet {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn from_layers(layers: impl IntoIterator<Item = usize>) -> Self {
        Self(layers.into_iter().collect())
    }

    /// The `k` deepest entries of an ascending target region.
    pub fn deepest(target: &[usize], k: usize) -> Result<Self> {
        if k > target.len() {
            return Err(Error::config(format!(
                "{k} sharing layers requested but the region holds {}",
                target.len()
            )));
        }
        Ok(Self::from_layers(target[target.len() - k..].iter().copied()))
    }

    pub fn contains(&self, layer: usize) -> bool {
        self.0.contains(&layer)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().copied()
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if self.contains(0) {
            return Err(Error::config("layer 0 cannot share: it has no shallower layer"));
        }
        if let Some(bad) = self.iter().find(|&l| l >= n_layers) {
            return Err(Error::config(format!("sharing layer {bad} outside a {n_layers}-layer model")));
        }
        Ok(())
    }

    /// For each layer, the compute-mode layer whose Q/K it attends with:
    /// itself in compute mode, the nearest shallower compute layer in
    /// sharing mode. Within a contiguous block every layer resolves to the
    /// block's boundary layer.
    pub fn qk_sources(&self, n_layers: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(n_layers);
        let mut last_compute = 0;
        for i in 0..n_layers {
            if !self.contains(i) {
                last_compute = i;
            }
            out.push(last_compute);
        }
        out
    }
}

impl FromIterator<usize> for ShareSet {
    fn from_iter<I: IntoIterator<Item = usize>>(iter: I) -> Self {
        Self::from_layers(iter)
    }
}
