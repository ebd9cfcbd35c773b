//! Test-only references that share no code path with the model's forward
//! assembly or sharing logic; they only reuse the numeric kernels.
#![allow(dead_code)]

use epas::model::{ModelConfig, ModelParams};
use epas::numcore::kernels::{self, AttnDims};
use epas::numcore::{Float, Graph, Tensor, Var};

/// Plain decoder forward (every layer computes its own Q, K, V).
pub fn plain_decoder_logits<T: Float>(
    p: &ModelParams<T>,
    c: &ModelConfig,
    tokens: &[usize],
    n_seq: usize,
) -> Tensor<T> {
    let n = tokens.len();
    let seq = n / n_seq;
    let d = c.d_model;
    let hd = c.head_dim();
    let dkv = c.d_kv();
    let positions: Vec<usize> = (0..n).map(|i| i % seq).collect();
    let freqs = kernels::rope_frequencies(hd, c.rope_theta);
    let eps = T::lit(c.norm_eps);
    let dims = AttnDims { n_seq, seq, n_heads: c.n_heads, n_kv_heads: c.n_kv_heads, head_dim: hd };
    let proj = |x: &[T], w: &Tensor<T>, k: usize, m: usize| {
        let mut o = vec![T::zero(); n * m];
        kernels::gemm(n, k, m, x, false, w.data(), false, &mut o, false);
        o
    };
    let norm = |x: &[T], g: &Tensor<T>| {
        let mut y = vec![T::zero(); x.len()];
        let mut inv = vec![T::zero(); x.len() / g.len()];
        kernels::rmsnorm_rows(x, g.data(), eps, &mut y, &mut inv);
        y
    };
    let mut x: Vec<T> = tokens.iter().flat_map(|&t| p.embed.data()[t * d..(t + 1) * d].to_vec()).collect();
    for l in &p.layers {
        let h = norm(&x, &l.attn_norm);
        let mut q = proj(&h, &l.wq, d, d);
        kernels::rope_rows(&mut q, &positions, c.n_heads, hd, &freqs, false);
        let mut k = proj(&h, &l.wk, d, dkv);
        kernels::rope_rows(&mut k, &positions, c.n_kv_heads, hd, &freqs, false);
        let v = proj(&h, &l.wv, d, dkv);
        let mut att = vec![T::zero(); n * d];
        let mut probs = vec![T::zero(); dims.probs_len()];
        kernels::causal_attention(&q, &k, &v, dims, &mut att, &mut probs);
        let o = proj(&att, &l.wo, d, d);
        x.iter_mut().zip(&o).for_each(|(a, &b)| *a = *a + b);
        let h = norm(&x, &l.ffn_norm);
        let gate = proj(&h, &l.w_gate, d, c.d_ff);
        let up = proj(&h, &l.w_up, d, c.d_ff);
        let act: Vec<T> = gate.iter().zip(&up).map(|(&g, &u)| kernels::silu(g) * u).collect();
        let down = proj(&act, &l.w_down, c.d_ff, d);
        x.iter_mut().zip(&down).for_each(|(a, &b)| *a = *a + b);
    }
    let h = norm(&x, &p.final_norm);
    Tensor::new(vec![n, c.vocab_size], proj(&h, &p.lm_head, d, c.vocab_size)).unwrap()
}

/// Literal transcription of the progressive-sharing forward loop's cache
/// rule: a layer whose successor shares writes its own Q/K into the cache;
/// a sharing layer reads Q/K from the cache. Returns, per layer, the index of
/// the layer whose Q/K it attends with.
pub fn cache_rule_sources(n_layers: usize, share: &[usize]) -> Vec<usize> {
    let sharing = |i: usize| share.contains(&i);
    let mut cache: Option<usize> = None;
    let mut out = Vec::new();
    for i in 0..n_layers {
        let qk = if sharing(i) { cache.expect("cache populated") } else { i };
        out.push(qk);
        if i + 1 < n_layers && sharing(i + 1) {
            cache = Some(qk);
        }
    }
    out
}

/// Plain decoder built on the graph with no sharing branch at all.
pub fn plain_decoder_graph(
    g: &mut Graph<f64>,
    vars: &epas::model::ParamVars,
    c: &ModelConfig,
    tokens: &[usize],
) -> Var {
    let n = tokens.len();
    let positions: Vec<usize> = (0..n).collect();
    let hd = c.head_dim();
    let dims = AttnDims { n_seq: 1, seq: n, n_heads: c.n_heads, n_kv_heads: c.n_kv_heads, head_dim: hd };
    let mut x = g.embedding(vars.embed, tokens).unwrap();
    for lv in &vars.layers {
        let h = g.rmsnorm(x, lv.attn_norm, c.norm_eps).unwrap();
        let q = g.matmul(h, lv.wq).unwrap();
        let q = g.rope(q, &positions, c.n_heads, hd, c.rope_theta).unwrap();
        let k = g.matmul(h, lv.wk).unwrap();
        let k = g.rope(k, &positions, c.n_kv_heads, hd, c.rope_theta).unwrap();
        let v = g.matmul(h, lv.wv).unwrap();
        let a = g.attention(q, k, v, dims).unwrap();
        let o = g.matmul(a, lv.wo).unwrap();
        x = g.add(x, o).unwrap();
        let h = g.rmsnorm(x, lv.ffn_norm, c.norm_eps).unwrap();
        let gate = g.matmul(h, lv.w_gate).unwrap();
        let gate = g.silu(gate);
        let up = g.matmul(h, lv.w_up).unwrap();
        let act = g.mul(gate, up).unwrap();
        let down = g.matmul(act, lv.w_down).unwrap();
        x = g.add(x, down).unwrap();
    }
    let h = g.rmsnorm(x, vars.final_norm, c.norm_eps).unwrap();
    g.matmul(h, vars.lm_head).unwrap()
}

pub fn random_tokens(rng: &mut impl rand::Rng, n: usize, vocab: usize) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(0..vocab)).collect()
}

/// Step-by-step transcription of the growth loop: train with the current set
/// S at 1-based step t, then if `t mod I == 0` move the last B entries of the
/// remaining region to the front of S. Returns the set used at each step.
pub fn simulate(interval: usize, growth: usize, target: &[usize], total: usize) -> Vec<Vec<usize>> {
    let mut remaining = target.to_vec();
    let mut shared: Vec<usize> = Vec::new();
    let mut used = Vec::with_capacity(total);
    for t in 1..=total {
        used.push(shared.clone());
        if t % interval == 0 && !remaining.is_empty() {
            let popped = remaining.split_off(remaining.len() - growth);
            shared.splice(0..0, popped);
        }
    }
    used
}
