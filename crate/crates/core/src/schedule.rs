//! Progressive growth of the sharing region.
//!
//! Training step `t` (0-based) runs with the `k·B` deepest layers of the
//! target region in sharing mode, `k = min(t / I, |S_c| / B)`. A switch
//! therefore takes effect at the start of step `I`, `2I`, ... which is the
//! same state the in-loop formulation reaches after finishing step `I` when
//! steps are counted from one. The state is a pure function of the step so a
//! resumed run sees exactly the sets an uninterrupted one would.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ShareSet};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SharingSchedule {
    /// Steps between growth events.
    pub interval: usize,
    /// Layers switched per growth event.
    pub growth: usize,
    /// Target region, ascending (shallow to deep).
    pub target: Vec<usize>,
    pub n_layers: usize,
}

/// One growth event: `layers` enter sharing mode at the start of `step`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct GrowthEvent {
    pub step: usize,
    pub layers: Vec<usize>,
}

/// Deepest `ceil(L/2)` layers, shifted up by one when the last layer is
/// excluded. Layer 0 is never part of it.
pub fn default_target(config: &ModelConfig) -> Vec<usize> {
    target_for_fraction(config, 0.5, true)
}

/// Deepest `round_mode(frac·L)` layers eligible to share. `ceil` picks the
/// rounding; `false` floors, which maps 25% of 22 layers to 5.
pub fn target_for_fraction(config: &ModelConfig, frac: f64, ceil: bool) -> Vec<usize> {
    let l = config.n_layers;
    let last = if config.include_last_layer { l } else { l.saturating_sub(1) };
    let raw = frac * l as f64;
    let want = if ceil { raw.ceil() } else { (raw + 1e-9).floor() } as usize;
    let n = want.min(last.saturating_sub(1));
    (last - n..last).collect()
}

impl SharingSchedule {
    pub fn new(interval: usize, growth: usize, target: Vec<usize>, n_layers: usize) -> Self {
        Self { interval, growth, target, n_layers }
    }

    /// Default region for `config`: half the layers, one at a time.
    pub fn default_for(config: &ModelConfig, interval: usize) -> Self {
        Self::new(interval, 1, default_target(config), config.n_layers)
    }

    /// Checks the growth assertions, index bounds and the last-layer option.
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.growth < 1 {
            return Err(Error::config("schedule growth B must be at least 1"));
        }
        if self.target.is_empty() {
            return Err(Error::config("schedule target region must hold at least one layer"));
        }
        if self.target.len() % self.growth != 0 {
            return Err(Error::config(format!(
                "growth does not divide target region: |S_c| = {} is not a multiple of B = {}",
                self.target.len(),
                self.growth
            )));
        }
        if self.interval < 1 {
            return Err(Error::config("schedule interval I must be at least 1"));
        }
        if self.n_layers != config.n_layers {
            return Err(Error::config(format!(
                "schedule was built for {} layers, the model has {}",
                self.n_layers, config.n_layers
            )));
        }
        if self.target.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("schedule target region must be strictly ascending"));
        }
        if self.target.contains(&0) {
            return Err(Error::config("layer 0 cannot share: it has no shallower layer"));
        }
        if let Some(&bad) = self.target.iter().find(|&&l| l >= config.n_layers) {
            return Err(Error::config(format!(
                "target layer {bad} outside a {}-layer model",
                config.n_layers
            )));
        }
        if !config.include_last_layer && self.target.contains(&(config.n_layers - 1)) {
            return Err(Error::config(format!(
                "last layer {} is excluded from sharing but listed in the target region",
                config.n_layers - 1
            )));
        }
        Ok(())
    }

    /// Number of growth events that have happened by the start of `step`.
    pub fn groups_at(&self, step: usize) -> usize {
        let max_groups = self.target.len() / self.growth.max(1);
        (step / self.interval.max(1)).min(max_groups)
    }

    /// Layers in sharing mode during `step`, ascending.
    pub fn active_set(&self, step: usize) -> Vec<usize> {
        let n = self.groups_at(step) * self.growth;
        self.target[self.target.len() - n..].to_vec()
    }

    pub fn share_set(&self, step: usize) -> ShareSet {
        ShareSet::from_layers(self.active_set(step))
    }

    /// First step at which the whole target region is shared.
    pub fn terminal_step(&self) -> usize {
        self.interval * (self.target.len() / self.growth.max(1))
    }

    /// Growth events at steps in `(0, total_steps]`.
    pub fn growth_events(&self, total_steps: usize) -> Vec<GrowthEvent> {
        let groups = self.target.len() / self.growth.max(1);
        (1..=groups)
            .map(|g| (g * self.interval, g))
            .take_while(|&(step, _)| step <= total_steps)
            .map(|(step, g)| {
                let hi = self.target.len() - (g - 1) * self.growth;
                GrowthEvent { step, layers: self.target[hi - self.growth..hi].to_vec() }
            })
            .collect()
    }
}
