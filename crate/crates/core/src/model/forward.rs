//! Recorded forward pass of the switchable decoder stack.

use super::{ModelConfig, ModelParams, ShareSet};
use crate::error::{Error, Result};
use crate::numcore::{kernels, AttnDims, Float, Graph, Tensor, Var};

#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub attn_norm: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub ffn_norm: Var,
    pub w_gate: Var,
    pub w_up: Var,
    pub w_down: Var,
}

/// Graph handles of every model parameter.
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub embed: Var,
    pub layers: Vec<LayerVars>,
    pub final_norm: Var,
    pub lm_head: Var,
}

impl ParamVars {
    /// Handles in the order of [`ModelParams::named`].
    pub fn ordered(&self) -> Vec<Var> {
        let mut out = vec![self.embed];
        for l in &self.layers {
            out.extend([l.attn_norm, l.wq, l.wk, l.wv, l.wo, l.ffn_norm, l.w_gate, l.w_up, l.w_down]);
        }
        out.push(self.final_norm);
        out.push(self.lm_head);
        out
    }

    /// Inverse of [`ordered`](Self::ordered).
    pub fn from_ordered(vars: &[Var], n_layers: usize) -> Result<Self> {
        if vars.len() != 3 + 9 * n_layers {
            return Err(Error::shape(format!("{} handles for a {n_layers}-layer model", vars.len())));
        }
        let layers = vars[1..1 + 9 * n_layers]
            .chunks(9)
            .map(|f| LayerVars {
                attn_norm: f[0],
                wq: f[1],
                wk: f[2],
                wv: f[3],
                wo: f[4],
                ffn_norm: f[5],
                w_gate: f[6],
                w_up: f[7],
                w_down: f[8],
            })
            .collect();
        Ok(Self { embed: vars[0], layers, final_norm: vars[vars.len() - 2], lm_head: vars[vars.len() - 1] })
    }
}

/// Records every parameter of `params` as a trainable leaf.
pub fn bind_params<T: Float>(g: &mut Graph<T>, params: &ModelParams<T>) -> ParamVars {
    let vars: Vec<Var> = params.named().into_iter().map(|(_, t)| g.param(t.clone())).collect();
    ParamVars::from_ordered(&vars, params.layers.len()).expect("consistent parameter layout")
}

/// Post-rope Q and K of a compute-mode layer, held for the sharing layers
/// that follow it. Cleared at the start of every forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ShareCache {
    pub source_layer: usize,
    pub q: Var,
    pub k: Var,
}

/// Q/K actually used by one layer's attention.
#[derive(Debug, Clone, Copy)]
pub struct LayerTrace {
    pub q: Var,
    pub k: Var,
    pub v: Var,
    /// Layer that computed `q` and `k`.
    pub qk_source: usize,
}

#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub logits: Var,
    pub layers: Vec<LayerTrace>,
    pub dims: AttnDims,
}

/// Checks a token batch against the model limits; returns the sequence length.
pub fn check_tokens(config: &ModelConfig, tokens: &[usize], n_seq: usize) -> Result<usize> {
    if tokens.is_empty() || n_seq == 0 {
        return Err(Error::shape("forward needs at least one token"));
    }
    if tokens.len() % n_seq != 0 {
        return Err(Error::shape(format!("{} tokens do not split into {n_seq} sequences", tokens.len())));
    }
    let seq = tokens.len() / n_seq;
    if seq > config.max_seq {
        return Err(Error::config(format!("sequence of {seq} exceeds max_seq {}", config.max_seq)));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= config.vocab_size) {
        return Err(Error::Index(format!("token {bad} outside vocabulary of {}", config.vocab_size)));
    }
    Ok(seq)
}

/// Runs the decoder over `n_seq` equal-length sequences packed in `tokens`.
///
/// A layer in `share` computes only its V projection and attends with the
/// Q/K cached by the nearest shallower compute-mode layer. Everything else
/// (norms, residuals, output projection, FFN) is the same in both modes.
pub fn forward<T: Float>(
    g: &mut Graph<T>,
    vars: &ParamVars,
    config: &ModelConfig,
    share: &ShareSet,
    tokens: &[usize],
    n_seq: usize,
) -> Result<ForwardPass> {
    share.validate(config.n_layers)?;
    let seq = check_tokens(config, tokens, n_seq)?;
    let positions: Vec<usize> = (0..tokens.len()).map(|r| r % seq).collect();
    let dims = AttnDims {
        n_seq,
        seq,
        n_heads: config.n_heads,
        n_kv_heads: config.n_kv_heads,
        head_dim: config.head_dim(),
    };

    let mut x = g.embedding(vars.embed, tokens)?;
    let mut cache: Option<ShareCache> = None;
    let mut traces = Vec::with_capacity(config.n_layers);
    for (i, lv) in vars.layers.iter().enumerate() {
        let h = g.rmsnorm(x, lv.attn_norm, config.norm_eps)?;
        let (q, k, source) = if share.contains(i) {
            let c = cache.ok_or_else(|| Error::config(format!("layer {i} shares but no cache is populated")))?;
            (c.q, c.k, c.source_layer)
        } else {
            let q = g.matmul(h, lv.wq)?;
            let q = g.rope(q, &positions, config.n_heads, dims.head_dim, config.rope_theta)?;
            let k = g.matmul(h, lv.wk)?;
            let k = g.rope(k, &positions, config.n_kv_heads, dims.head_dim, config.rope_theta)?;
            (q, k, i)
        };
        let v = g.matmul(h, lv.wv)?;
        let att = g.attention(q, k, v, dims)?;
        let o = g.matmul(att, lv.wo)?;
        x = g.add(x, o)?;

        let h = g.rmsnorm(x, lv.ffn_norm, config.norm_eps)?;
        let gate = g.matmul(h, lv.w_gate)?;
        let gate = g.silu(gate);
        let up = g.matmul(h, lv.w_up)?;
        let act = g.mul(gate, up)?;
        let down = g.matmul(act, lv.w_down)?;
        x = g.add(x, down)?;

        traces.push(LayerTrace { q, k, v, qk_source: source });
        // A compute layer feeding a sharing successor populates the cache; a
        // sharing layer passes the boundary's values through unchanged.
        if share.contains(i + 1) && !share.contains(i) {
            cache = Some(ShareCache { source_layer: i, q, k });
        }
    }
    let h = g.rmsnorm(x, vars.final_norm, config.norm_eps)?;
    let logits = g.matmul(h, vars.lm_head)?;
    Ok(ForwardPass { logits, layers: traces, dims })
}

impl ForwardPass {
    /// Scaled, causally masked pre-softmax scores of `layer`,
    /// `[n_seq, n_heads, seq, seq]`.
    pub fn scores<T: Float>(&self, g: &Graph<T>, layer: usize) -> Vec<T> {
        let t = &self.layers[layer];
        let mut s = vec![T::zero(); self.dims.probs_len()];
        kernels::attention_scores_into(g.value(t.q).data(), g.value(t.k).data(), self.dims, &mut s);
        s
    }
}

/// Next-token loss for a batch of `[n_seq, seq+1]` windows packed row-major.
pub fn window_loss<T: Float>(
    g: &mut Graph<T>,
    vars: &ParamVars,
    config: &ModelConfig,
    share: &ShareSet,
    windows: &[usize],
    n_seq: usize,
) -> Result<Var> {
    if n_seq == 0 || windows.len() % n_seq != 0 || windows.len() / n_seq < 2 {
        return Err(Error::shape("windows must hold at least two tokens each"));
    }
    let w = windows.len() / n_seq;
    let mut inputs = Vec::with_capacity(n_seq * (w - 1));
    let mut targets = Vec::with_capacity(n_seq * (w - 1));
    for row in windows.chunks(w) {
        inputs.extend_from_slice(&row[..w - 1]);
        targets.extend_from_slice(&row[1..]);
    }
    let pass = forward(g, vars, config, share, &inputs, n_seq)?;
    g.cross_entropy(pass.logits, &targets)
}

/// Logits of a single forward pass without keeping the graph.
pub fn logits<T: Float>(
    params: &ModelParams<T>,
    config: &ModelConfig,
    share: &ShareSet,
    tokens: &[usize],
    n_seq: usize,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let vars = bind_params(&mut g, params);
    let pass = forward(&mut g, &vars, config, share, tokens, n_seq)?;
    Ok(g.value(pass.logits).clone())
}
