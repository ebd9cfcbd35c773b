use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{window_loss, ModelConfig, ModelParams, ParamVars, ShareSet};
use crate::error::Result;
use crate::numcore::{grad_check, GradCheckOptions, GradCheckReport};

/// Finite-difference check of the full decoder loss in 64-bit precision on
/// random weights and `n_seq` random windows of `seq` input tokens.
///
/// Weights use a wider init than training so every path carries a
/// measurable gradient.
pub fn check_model_gradients(
    config: &ModelConfig,
    share: &ShareSet,
    seq: usize,
    n_seq: usize,
    seed: u64,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    config.validate()?;
    share.validate(config.n_layers)?;
    let params = ModelParams::<f64>::init_with_std(config, seed, 0.3);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let windows: Vec<usize> =
        (0..n_seq * (seq + 1)).map(|_| rng.gen_range(0..config.vocab_size)).collect();
    let mut named: Vec<(String, _)> =
        params.named().into_iter().map(|(n, t)| (n, t.clone())).collect();
    let n_layers = config.n_layers;
    grad_check(
        &mut named,
        |g, vars| {
            let pv = ParamVars::from_ordered(vars, n_layers)?;
            window_loss(g, &pv, config, share, &windows, n_seq)
        },
        opts,
    )
}
