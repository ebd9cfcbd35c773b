//! Analytic FLOPs per sample under QK sharing.
//!
//! Cost conventions:
//! - a matrix product `[m,k]·[k,n]` costs `2·m·k·n` FLOPs;
//! - `Q·Kᵀ` and `P·V` are counted over the full `seq × seq` square by
//!   default, which is also what the explicit attention kernel executes;
//!   [`AttentionCounting::CausalHalf`] halves them instead;
//! - a sharing layer omits exactly its Q and K projections;
//! - training costs three forward passes (one forward, two backward);
//! - embeddings, norms, rotary embedding and elementwise ops are excluded;
//!   the LM head is included.

use std::fmt;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{bind_params, forward, ModelConfig, ModelParams, ShareSet};
use crate::numcore::{macs, Graph};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Forward,
    Train,
}

impl Mode {
    pub fn multiplier(self) -> f64 {
        match self {
            Mode::Forward => 1.0,
            Mode::Train => 3.0,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "forward" => Some(Mode::Forward),
            "train" => Some(Mode::Train),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Forward => "forward",
            Mode::Train => "train",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionCounting {
    /// Full `seq × seq` score and mix products.
    #[default]
    Full,
    /// Half of the square, the causal triangle only.
    CausalHalf,
}

impl AttentionCounting {
    fn factor(self) -> f64 {
        match self {
            AttentionCounting::Full => 1.0,
            AttentionCounting::CausalHalf => 0.5,
        }
    }
}

/// Per-component FLOPs of one sample, already multiplied by the mode.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlopsReport {
    pub mode: Mode,
    pub seq_len: usize,
    pub share_count: usize,
    pub attention_counting: AttentionCounting,
    pub norms_excluded: bool,
    pub qkv_proj: f64,
    pub o_proj: f64,
    pub attn_matmuls: f64,
    pub ffn: f64,
    pub lm_head: f64,
    /// FLOPs removed by the sharing layers.
    pub qk_saved: f64,
    pub total_baseline: f64,
    pub total_sharing: f64,
    pub reduction_pct: f64,
}

impl FlopsReport {
    pub fn baseline_tf(&self) -> f64 {
        self.total_baseline / 1e12
    }

    pub fn sharing_tf(&self) -> f64 {
        self.total_sharing / 1e12
    }

    /// Machine-readable `key=value` lines.
    pub fn key_values(&self) -> String {
        let rows: [(&str, String); 14] = [
            ("mode", self.mode.name().to_string()),
            ("seq_len", self.seq_len.to_string()),
            ("share_count", self.share_count.to_string()),
            (
                "attention_counting",
                match self.attention_counting {
                    AttentionCounting::Full => "full".into(),
                    AttentionCounting::CausalHalf => "causal-half".into(),
                },
            ),
            ("qkv_proj_flops", format!("{:.0}", self.qkv_proj)),
            ("o_proj_flops", format!("{:.0}", self.o_proj)),
            ("attn_matmul_flops", format!("{:.0}", self.attn_matmuls)),
            ("ffn_flops", format!("{:.0}", self.ffn)),
            ("lm_head_flops", format!("{:.0}", self.lm_head)),
            ("qk_saved_flops", format!("{:.0}", self.qk_saved)),
            ("total_baseline_tf", format!("{:.4}", self.baseline_tf())),
            ("total_sharing_tf", format!("{:.4}", self.sharing_tf())),
            ("reduction_pct", format!("{:.4}", self.reduction_pct)),
            ("norms_excluded", self.norms_excluded.to_string()),
        ];
        rows.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

impl fmt::Display for FlopsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "# FLOPs/sample, {} mode, seq {}, {} sharing layers (matmul = 2mkn, attention {:?}, \
             train = 3x forward, embeddings and norms excluded)",
            self.mode.name(),
            self.seq_len,
            self.share_count,
            self.attention_counting
        )?;
        for (name, v) in [
            ("qkv_proj", self.qkv_proj),
            ("o_proj", self.o_proj),
            ("attn_matmuls", self.attn_matmuls),
            ("ffn", self.ffn),
            ("lm_head", self.lm_head),
            ("qk_saved", -self.qk_saved),
        ] {
            writeln!(f, "  {name:<14}{:>12.4} TF", v / 1e12)?;
        }
        writeln!(f, "  {:<14}{:>12.4} TF", "baseline", self.baseline_tf())?;
        writeln!(f, "  {:<14}{:>12.4} TF", "sharing", self.sharing_tf())?;
        writeln!(f, "  {:<14}{:>11.2} %", "reduction", self.reduction_pct)
    }
}

/// Q+K projection FLOPs of one layer over `seq_len` tokens (forward).
pub fn qk_projection_flops(config: &ModelConfig, seq_len: usize) -> f64 {
    let (s, d, dkv) = (seq_len as f64, config.d_model as f64, config.d_kv() as f64);
    2.0 * s * d * (d + dkv)
}

pub fn flops_per_sample(
    config: &ModelConfig,
    seq_len: usize,
    share_count: usize,
    mode: Mode,
) -> Result<FlopsReport> {
    flops_with_counting(config, seq_len, share_count, mode, AttentionCounting::Full)
}

pub fn flops_with_counting(
    config: &ModelConfig,
    seq_len: usize,
    share_count: usize,
    mode: Mode,
    counting: AttentionCounting,
) -> Result<FlopsReport> {
    if share_count > config.n_layers {
        return Err(Error::config(format!(
            "{share_count} sharing layers exceed the {} layers of the model",
            config.n_layers
        )));
    }
    let m = mode.multiplier();
    let (s, l) = (seq_len as f64, config.n_layers as f64);
    let (d, dkv, ff, v) =
        (config.d_model as f64, config.d_kv() as f64, config.d_ff as f64, config.vocab_size as f64);
    let qkv_proj = m * l * 2.0 * s * d * (d + 2.0 * dkv);
    let o_proj = m * l * 2.0 * s * d * d;
    let attn_matmuls = m * l * 2.0 * (2.0 * s * s * d) * counting.factor();
    let ffn = m * l * 2.0 * s * 3.0 * d * ff;
    let lm_head = m * 2.0 * s * d * v;
    let total_baseline = qkv_proj + o_proj + attn_matmuls + ffn + lm_head;
    let qk_saved = m * share_count as f64 * qk_projection_flops(config, seq_len);
    let total_sharing = total_baseline - qk_saved;
    let reduction_pct = 100.0 * (1.0 - total_sharing / total_baseline);
    Ok(FlopsReport {
        mode,
        seq_len,
        share_count,
        attention_counting: counting,
        norms_excluded: true,
        qkv_proj,
        o_proj,
        attn_matmuls,
        ffn,
        lm_head,
        qk_saved,
        total_baseline,
        total_sharing,
        reduction_pct,
    })
}

/// Reduction percentage straight from the per-layer Q+K cost.
pub fn reduction_closed_form(config: &ModelConfig, seq_len: usize, share_count: usize) -> Result<f64> {
    let r = flops_per_sample(config, seq_len, share_count, Mode::Forward)?;
    Ok(100.0 * share_count as f64 * qk_projection_flops(config, seq_len) / r.total_baseline)
}

/// Instrumented multiply-accumulate count of one real forward pass over a
/// single sequence of `seq_len` tokens with the deepest `share_count`
/// layers in sharing mode.
pub fn measured_macs(config: &ModelConfig, seq_len: usize, share_count: usize) -> Result<u64> {
    if seq_len == 0 {
        return Err(Error::shape("measured_macs needs at least one token"));
    }
    if share_count >= config.n_layers {
        return Err(Error::config("layer 0 cannot share; at most n_layers - 1 sharing layers"));
    }
    let params = ModelParams::<f32>::init(config, 0);
    let share = ShareSet::from_layers(config.n_layers - share_count..config.n_layers);
    let tokens: Vec<usize> = (0..seq_len).map(|i| i % config.vocab_size).collect();
    let mut g = Graph::new();
    let vars = bind_params(&mut g, &params);
    let (pass, n) = macs::measure(|| forward(&mut g, &vars, config, &share, &tokens, 1));
    pass?;
    Ok(n)
}
