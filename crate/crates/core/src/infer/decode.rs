use std::time::Instant;

use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::cache::{DecodeCache, LayerCache};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams, ShareSet};
use crate::numcore::kernels::{self, gemm};
use crate::numcore::{macs, Float};

#[derive(Debug, Clone, PartialEq)]
pub enum Sampling {
    Greedy,
    Temperature { temperature: f64, seed: u64 },
}

#[derive(Debug, Clone)]
pub struct GenRequest {
    pub prompt: Vec<usize>,
    pub max_new_tokens: usize,
    /// Deepest layers of the trained region to run in sharing mode.
    pub share_layers: usize,
    pub sampling: Sampling,
}

#[derive(Debug, Clone)]
pub struct GenOutput {
    pub tokens: Vec<usize>,
    pub prompt_ms: f64,
    pub gen_ms: f64,
    /// MACs of the decoder steps that produced `tokens`.
    pub gen_macs: u64,
}

impl GenOutput {
    pub fn tokens_per_sec(&self) -> f64 {
        self.tokens.len() as f64 / (self.gen_ms / 1e3).max(1e-9)
    }
}

/// Single-sequence decoder that processes one position per call.
pub struct Decoder<'a, T> {
    params: &'a ModelParams<T>,
    config: &'a ModelConfig,
    share: ShareSet,
    pub cache: DecodeCache<T>,
    freqs: Vec<f64>,
    /// Current-step rotated queries of compute layers.
    q_rows: Vec<Vec<T>>,
}

impl<'a, T: Float> Decoder<'a, T> {
    pub fn new(params: &'a ModelParams<T>, config: &'a ModelConfig, share: ShareSet) -> Result<Self> {
        share.validate(config.n_layers)?;
        Ok(Self {
            params,
            config,
            cache: DecodeCache::new(config, &share),
            share,
            freqs: kernels::rope_frequencies(config.head_dim(), config.rope_theta),
            q_rows: vec![Vec::new(); config.n_layers],
        })
    }

    pub fn share(&self) -> &ShareSet {
        &self.share
    }

    pub fn position(&self) -> usize {
        self.cache.len
    }

    /// Feeds `token` at the next position and returns its logits.
    pub fn step(&mut self, token: usize) -> Result<Vec<T>> {
        let c = self.config;
        let pos = self.cache.len;
        if pos >= c.max_seq {
            return Err(Error::Request(format!("position {pos} exceeds max_seq {}", c.max_seq)));
        }
        if token >= c.vocab_size {
            return Err(Error::Index(format!("token {token} outside vocabulary of {}", c.vocab_size)));
        }
        let (d, dkv, hd) = (c.d_model, c.d_kv(), c.head_dim());
        let eps = T::lit(c.norm_eps);
        let project = |x: &[T], w: &[T], n: usize| {
            let mut o = vec![T::zero(); n];
            gemm(1, x.len(), n, x, false, w, false, &mut o, false);
            o
        };
        let norm = |x: &[T], g: &[T]| {
            let mut y = vec![T::zero(); x.len()];
            let mut inv = [T::zero()];
            kernels::rmsnorm_rows(x, g, eps, &mut y, &mut inv);
            y
        };
        let mut x = self.params.embed.data()[token * d..(token + 1) * d].to_vec();
        for (i, lp) in self.params.layers.iter().enumerate() {
            let h = norm(&x, lp.attn_norm.data());
            let v = project(&h, lp.wv.data(), dkv);
            let source = match &mut self.cache.layers[i] {
                LayerCache::Compute { k: kc, v: vc } => {
                    let mut q = project(&h, lp.wq.data(), d);
                    kernels::rope_rows(&mut q, &[pos], c.n_heads, hd, &self.freqs, false);
                    let mut k = project(&h, lp.wk.data(), dkv);
                    kernels::rope_rows(&mut k, &[pos], c.n_kv_heads, hd, &self.freqs, false);
                    kc.extend_from_slice(&k);
                    vc.extend_from_slice(&v);
                    self.q_rows[i] = q;
                    i
                }
                LayerCache::Sharing { source, v: vc } => {
                    vc.extend_from_slice(&v);
                    *source
                }
            };
            let att = self.attend(i, source, pos + 1);
            let o = project(&att, lp.wo.data(), d);
            x.iter_mut().zip(&o).for_each(|(a, &b)| *a = *a + b);
            let h = norm(&x, lp.ffn_norm.data());
            let gate = project(&h, lp.w_gate.data(), c.d_ff);
            let up = project(&h, lp.w_up.data(), c.d_ff);
            let act: Vec<T> = gate.iter().zip(&up).map(|(&g, &u)| kernels::silu(g) * u).collect();
            let down = project(&act, lp.w_down.data(), d);
            x.iter_mut().zip(&down).for_each(|(a, &b)| *a = *a + b);
        }
        self.cache.len += 1;
        let h = norm(&x, self.params.final_norm.data());
        Ok(project(&h, self.params.lm_head.data(), c.vocab_size))
    }

    /// Attention of layer `i` using the current query of `source` over
    /// `n` cached positions.
    fn attend(&self, i: usize, source: usize, n: usize) -> Vec<T> {
        let c = self.config;
        let (hd, dkv) = (c.head_dim(), c.d_kv());
        let group = c.n_heads / c.n_kv_heads;
        let scale = T::lit(1.0 / (hd as f64).sqrt());
        let q = &self.q_rows[source];
        let keys = self.cache.keys(i);
        let vals = self.cache.layers[i].v();
        let mut out = vec![T::zero(); c.d_model];
        let mut scores = vec![T::zero(); n];
        for h in 0..c.n_heads {
            let kvh = h / group;
            let qh = &q[h * hd..(h + 1) * hd];
            for (j, s) in scores.iter_mut().enumerate() {
                let kj = &keys[j * dkv + kvh * hd..j * dkv + (kvh + 1) * hd];
                *s = qh.iter().zip(kj).fold(T::zero(), |acc, (&a, &b)| acc + a * b) * scale;
            }
            kernels::softmax_row(&mut scores);
            let oh = &mut out[h * hd..(h + 1) * hd];
            for (j, &p) in scores.iter().enumerate() {
                let vj = &vals[j * dkv + kvh * hd..j * dkv + (kvh + 1) * hd];
                oh.iter_mut().zip(vj).for_each(|(o, &v)| *o = *o + p * v);
            }
        }
        macs::add((2 * c.n_heads * n * hd) as u64);
        out
    }
}

fn pick<T: Float>(logits: &[T], sampling: &Sampling, rng: &mut ChaCha8Rng) -> Result<usize> {
    match sampling {
        Sampling::Greedy => Ok(argmax(logits)),
        Sampling::Temperature { temperature, .. } => {
            if !(temperature.is_finite() && *temperature > 0.0) {
                return Err(Error::Request(format!("temperature must be positive, got {temperature}")));
            }
            let max = logits.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = logits.iter().map(|v| ((v.as_f64() - max) / temperature).exp()).collect();
            let dist = WeightedIndex::new(&w).map_err(|e| Error::NonFinite(format!("sampling weights: {e}")))?;
            Ok(dist.sample(rng))
        }
    }
}

/// Index of the largest logit; ties resolve to the lowest index.
pub(crate) fn argmax<T: Float>(logits: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Decodes `request.max_new_tokens` tokens after the prompt. `region` is the
/// checkpoint's trained target region; `share_layers` may not exceed it.
pub fn generate<T: Float>(
    params: &ModelParams<T>,
    config: &ModelConfig,
    region: &[usize],
    request: &GenRequest,
) -> Result<GenOutput> {
    if request.share_layers > region.len() {
        return Err(Error::Request(format!(
            "{} sharing layers requested but the checkpoint was trained with a region of {}",
            request.share_layers,
            region.len()
        )));
    }
    if request.prompt.is_empty() {
        return Err(Error::Request("prompt must hold at least one token".into()));
    }
    let total = request.prompt.len() + request.max_new_tokens;
    if total > config.max_seq {
        return Err(Error::Request(format!("{total} positions requested, max_seq is {}", config.max_seq)));
    }
    let share = ShareSet::deepest(region, request.share_layers)?;
    let mut dec = Decoder::new(params, config, share)?;
    let seed = match request.sampling {
        Sampling::Temperature { seed, .. } => seed,
        Sampling::Greedy => 0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let (last, head) = request.prompt.split_last().expect("non-empty prompt");
    let t0 = Instant::now();
    for &t in head {
        dec.step(t)?;
    }
    let prompt_ms = t0.elapsed().as_secs_f64() * 1e3;

    // one decoder step per generated token, starting from the last prompt token
    let t1 = Instant::now();
    let mut tokens = Vec::with_capacity(request.max_new_tokens);
    let (res, gen_macs) = macs::measure(|| -> Result<()> {
        let mut cur = *last;
        for _ in 0..request.max_new_tokens {
            let logits = dec.step(cur)?;
            cur = pick(&logits, &request.sampling, &mut rng)?;
            tokens.push(cur);
        }
        Ok(())
    });
    res?;
    let gen_ms = t1.elapsed().as_secs_f64() * 1e3;
    Ok(GenOutput { tokens, prompt_ms, gen_ms, gen_macs })
}
