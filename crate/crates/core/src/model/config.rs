use std::fmt::Write;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Which activations a sharing-mode layer reuses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShareKind {
    /// Queries and keys are reused, values are computed per layer.
    Qk,
    /// Keys and values reused. Reserved; rejected by validation.
    Kv,
}

impl ShareKind {
    pub fn name(self) -> &'static str {
        match self {
            ShareKind::Qk => "qk",
            ShareKind::Kv => "kv",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "qk" => Some(ShareKind::Qk),
            "kv" => Some(ShareKind::Kv),
            _ => None,
        }
    }
}

/// Architecture hyperparameters of a LLaMA-style decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    /// Equal to `n_heads` for multi-head attention, fewer for GQA.
    pub n_kv_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub rope_theta: f64,
    pub norm_eps: f64,
    pub share_kind: ShareKind,
    /// Whether the last layer may enter sharing mode.
    pub include_last_layer: bool,
}

/// Names accepted by [`ModelConfig::preset`]. Entries marked `*` in the
/// docs of each constructor use reconstructed shapes.
pub const PRESETS: &[&str] = &["toy", "tinyllama-1.1b", "llama-7b", "llama-125m", "llama-3b"];

impl ModelConfig {
    /// Small GQA model for tests and gradient checks.
    pub fn toy() -> Self {
        Self {
            n_layers: 4,
            d_model: 32,
            n_heads: 4,
            n_kv_heads: 2,
            d_ff: 64,
            vocab_size: 257,
            max_seq: 64,
            rope_theta: 10000.0,
            norm_eps: 1e-5,
            share_kind: ShareKind::Qk,
            include_last_layer: true,
        }
    }

    pub fn tinyllama_1_1b() -> Self {
        Self {
            n_layers: 22,
            d_model: 2048,
            n_heads: 32,
            n_kv_heads: 4,
            d_ff: 5632,
            vocab_size: 32000,
            max_seq: 2048,
            ..Self::toy()
        }
    }

    pub fn llama_7b() -> Self {
        Self {
            n_layers: 32,
            d_model: 4096,
            n_heads: 32,
            n_kv_heads: 32,
            d_ff: 11008,
            vocab_size: 32000,
            max_seq: 2048,
            ..Self::toy()
        }
    }

    /// Reconstructed shape (*).
    pub fn llama_125m() -> Self {
        Self {
            n_layers: 12,
            d_model: 768,
            n_heads: 12,
            n_kv_heads: 12,
            d_ff: 2048,
            vocab_size: 32000,
            max_seq: 2048,
            ..Self::toy()
        }
    }

    /// Reconstructed shape (*), OpenLLaMA-3B dimensions.
    pub fn llama_3b() -> Self {
        Self {
            n_layers: 26,
            d_model: 3200,
            n_heads: 32,
            n_kv_heads: 32,
            d_ff: 8640,
            vocab_size: 32000,
            max_seq: 2048,
            ..Self::toy()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "toy" => Some(Self::toy()),
            "tinyllama-1.1b" => Some(Self::tinyllama_1_1b()),
            "llama-7b" => Some(Self::llama_7b()),
            "llama-125m" => Some(Self::llama_125m()),
            "llama-3b" => Some(Self::llama_3b()),
            _ => None,
        }
    }

    /// True for presets whose shapes are not published and were reconstructed.
    pub fn preset_is_reconstructed(name: &str) -> bool {
        matches!(name, "llama-125m" | "llama-3b")
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Width of the K and V projections.
    pub fn d_kv(&self) -> usize {
        self.d_model * self.n_kv_heads / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_kv_heads", self.n_kv_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq", self.max_seq),
        ];
        for (name, v) in extents {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_heads % self.n_kv_heads != 0 {
            return Err(Error::config(format!(
                "n_heads {} is not divisible by n_kv_heads {}",
                self.n_heads, self.n_kv_heads
            )));
        }
        if self.head_dim() % 2 != 0 {
            return Err(Error::config(format!("head_dim {} must be even for rope", self.head_dim())));
        }
        if !(self.rope_theta.is_finite() && self.rope_theta > 0.0) {
            return Err(Error::config("rope_theta must be finite and positive"));
        }
        if !(self.norm_eps.is_finite() && self.norm_eps > 0.0) {
            return Err(Error::config("norm_eps must be finite and positive"));
        }
        if self.share_kind != ShareKind::Qk {
            return Err(Error::config(format!(
                "share_kind {} is not implemented; only qk sharing is supported",
                self.share_kind.name()
            )));
        }
        Ok(())
    }

    /// Stable `key=value` rendering used for hashing and checkpoint headers.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "n_layers={}", self.n_layers);
        let _ = writeln!(s, "d_model={}", self.d_model);
        let _ = writeln!(s, "n_heads={}", self.n_heads);
        let _ = writeln!(s, "n_kv_heads={}", self.n_kv_heads);
        let _ = writeln!(s, "d_ff={}", self.d_ff);
        let _ = writeln!(s, "vocab_size={}", self.vocab_size);
        let _ = writeln!(s, "max_seq={}", self.max_seq);
        let _ = writeln!(s, "rope_theta={:?}", self.rope_theta);
        let _ = writeln!(s, "norm_eps={:?}", self.norm_eps);
        let _ = writeln!(s, "share_kind={}", self.share_kind.name());
        let _ = writeln!(s, "include_last_layer={}", self.include_last_layer);
        s
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }

    /// Inverse of [`canonical`](Self::canonical).
    pub fn from_canonical(text: &str) -> Result<Self> {
        let mut c = Self::toy();
        let mut seen = 0;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("malformed model line {line:?}")))?;
            let bad = || Error::config(format!("invalid value for {k}: {v:?}"));
            let int = |v: &str| v.parse::<usize>().map_err(|_| bad());
            match k {
                "n_layers" => c.n_layers = int(v)?,
                "d_model" => c.d_model = int(v)?,
                "n_heads" => c.n_heads = int(v)?,
                "n_kv_heads" => c.n_kv_heads = int(v)?,
                "d_ff" => c.d_ff = int(v)?,
                "vocab_size" => c.vocab_size = int(v)?,
                "max_seq" => c.max_seq = int(v)?,
                "rope_theta" => c.rope_theta = v.parse().map_err(|_| bad())?,
                "norm_eps" => c.norm_eps = v.parse().map_err(|_| bad())?,
                "share_kind" => c.share_kind = ShareKind::parse(v).ok_or_else(bad)?,
                "include_last_layer" => c.include_last_layer = v.parse().map_err(|_| bad())?,
                _ => return Err(Error::config(format!("unknown model key {k}"))),
            }
            seen += 1;
        }
        if seen != 11 {
            return Err(Error::config(format!("model description has {seen} of 11 keys")));
        }
        Ok(c)
    }
}

/// Exact trainable parameter count: embeddings, every layer, the final
/// norm and an untied LM head. Independent of sharing mode.
pub fn param_count(c: &ModelConfig) -> u64 {
    let (d, l) = (c.d_model as u64, c.n_layers as u64);
    let dkv = c.d_kv() as u64;
    let per_layer = 2 * d + 2 * d * d + 2 * d * dkv + 3 * d * c.d_ff as u64;
    2 * c.vocab_size as u64 * d + d + l * per_layer
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for name in PRESETS {
            ModelConfig::preset(name).unwrap().validate().unwrap();
        }
        assert!(ModelConfig::preset("gpt-9").is_none());
    }

    #[test]
    fn validation_errors() {
        let mut c = ModelConfig::toy();
        c.n_heads = 5;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::toy();
        c.n_kv_heads = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::toy();
        c.max_seq = 0;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::toy();
        c.share_kind = ShareKind::Kv;
        assert!(c.validate().is_err());
    }

    #[test]
    fn canonical_roundtrip() {
        let c = ModelConfig::tinyllama_1_1b();
        assert_eq!(ModelConfig::from_canonical(&c.canonical()).unwrap(), c);
        assert_eq!(c.hash(), ModelConfig::tinyllama_1_1b().hash());
        assert_ne!(c.hash(), ModelConfig::llama_7b().hash());
    }

    #[test]
    fn tinyllama_count_is_1_1b() {
        let n = param_count(&ModelConfig::tinyllama_1_1b()) as f64;
        assert!((n / 1.1e9 - 1.0).abs() < 0.03, "{n}");
    }

    #[test]
    fn degenerate_count_by_hand() {
        let c = ModelConfig {
            n_layers: 1,
            d_model: 4,
            n_heads: 1,
            n_kv_heads: 1,
            d_ff: 8,
            vocab_size: 10,
            ..ModelConfig::toy()
        };
        // embed 40 + head 40 + final norm 4
        // layer: 2 norms 8 + wq,wk,wv,wo 64 + gate,up,down 96
        assert_eq!(param_count(&c), 40 + 40 + 4 + 8 + 64 + 96);
    }
}
