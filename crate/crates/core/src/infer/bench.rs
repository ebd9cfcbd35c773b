use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::decode::{generate, GenRequest, Sampling};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::numcore::Float;

pub const CSV_HEADER: &str = "k,tokens_per_sec_median,tokens_per_sec_min,tokens_per_sec_max,macs_per_token";

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub ks: Vec<usize>,
    pub prompt_len: usize,
    pub gen_len: usize,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { ks: vec![0], prompt_len: 64, gen_len: 256, repeats: 5, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub k: usize,
    pub median: f64,
    pub min: f64,
    pub max: f64,
    pub macs_per_token: f64,
}

impl BenchRow {
    pub fn csv(&self) -> String {
        format!("{},{:.3},{:.3},{:.3},{}", self.k, self.median, self.min, self.max, self.macs_per_token)
    }
}

pub fn to_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv());
        s.push('\n');
    }
    s
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Greedy generation throughput per sharing count. Rounds visit every `k`
/// in turn so slow drift of the machine spreads evenly; the first round is
/// warmup and discarded.
pub fn bench_throughput<T: Float>(
    params: &ModelParams<T>,
    config: &ModelConfig,
    region: &[usize],
    bench: &BenchConfig,
) -> Result<Vec<BenchRow>> {
    if bench.repeats < 3 {
        return Err(Error::Request(format!("bench needs at least 3 repeats, got {}", bench.repeats)));
    }
    if bench.gen_len == 0 || bench.prompt_len == 0 {
        return Err(Error::Request("bench needs a non-empty prompt and generation".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(bench.seed);
    let prompt: Vec<usize> = (0..bench.prompt_len).map(|_| rng.gen_range(0..config.vocab_size.min(256))).collect();
    let mut rates = vec![Vec::with_capacity(bench.repeats); bench.ks.len()];
    let mut macs = vec![0u64; bench.ks.len()];
    for round in 0..=bench.repeats {
        for (i, &k) in bench.ks.iter().enumerate() {
            let req = GenRequest {
                prompt: prompt.clone(),
                max_new_tokens: bench.gen_len,
                share_layers: k,
                sampling: Sampling::Greedy,
            };
            let out = generate(params, config, region, &req)?;
            if round > 0 {
                rates[i].push(out.tokens_per_sec());
                macs[i] = out.gen_macs;
            }
        }
    }
    Ok(bench
        .ks
        .iter()
        .zip(rates.iter_mut())
        .zip(&macs)
        .map(|((&k, r), &m)| BenchRow {
            k,
            median: median(r),
            min: r.iter().copied().fold(f64::INFINITY, f64::min),
            max: r.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            macs_per_token: m as f64 / bench.gen_len as f64,
        })
        .collect())
}
