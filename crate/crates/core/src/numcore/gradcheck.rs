//! Central finite-difference check of recorded gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Finite-difference step; must lie in `[1e-6, 1e-4]`.
    pub h: f64,
    pub tol: f64,
    /// Upper bound on checked coordinates per parameter tensor.
    pub max_coords: usize,
    pub seed: u64,
    /// Gradient magnitude below which errors are measured absolutely. Keep
    /// it well above the `~1e-15 / h` rounding noise of the quotient.
    pub abs_floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { h: 1e-5, tol: 1e-4, max_coords: 512, seed: 0, abs_floor: 1e-5 }
    }
}

#[derive(Debug, Clone)]
pub struct ParamError {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub analytic_norm: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst: Option<(String, usize)>,
    pub params: Vec<ParamError>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }

    pub fn param(&self, name: &str) -> Option<&ParamError> {
        self.params.iter().find(|p| p.name == name)
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the recorded gradient of the scalar built by `f` against central
/// differences on a seeded sample of coordinates of every parameter.
///
/// `f` receives a fresh graph and one trainable [`Var`] per entry of
/// `params`, in order, and must return the scalar loss node.
pub fn grad_check<F>(
    params: &mut [(String, Tensor<f64>)],
    f: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if !(1e-6..=1e-4).contains(&opts.h) {
        return Err(Error::config(format!("finite-difference step {} outside [1e-6, 1e-4]", opts.h)));
    }
    let eval = |params: &[(String, Tensor<f64>)]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().map(|(_, t)| g.param(t.clone())).collect();
        let loss = f(&mut g, &vars)?;
        let v = g.value(loss).data()[0];
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("grad check loss evaluated to {v}")));
        }
        Ok(v)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|(_, t)| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let l0 = g.value(loss).data()[0];
    if !l0.is_finite() {
        return Err(Error::NonFinite(format!("grad check loss evaluated to {l0}")));
    }
    let grads = g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params.iter())
        .map(|(&v, (_, t))| grads.get(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();
    drop(g);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport { max_rel_err: 0.0, worst: None, params: Vec::new(), tol: opts.tol };
    for p in 0..params.len() {
        let len = params[p].1.len();
        let coords: Vec<usize> = if len <= opts.max_coords {
            (0..len).collect()
        } else {
            let mut c = sample(&mut rng, len, opts.max_coords).into_vec();
            c.sort_unstable();
            c
        };
        let mut worst = 0.0f64;
        for &i in &coords {
            let orig = params[p].1.data()[i];
            params[p].1.data_mut()[i] = orig + opts.h;
            let plus = eval(params);
            params[p].1.data_mut()[i] = orig - opts.h;
            let minus = eval(params);
            params[p].1.data_mut()[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * opts.h);
            let err = relative_error(analytic[p][i], numeric, opts.abs_floor);
            if err > worst {
                worst = err;
            }
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((params[p].0.clone(), i));
            }
        }
        let analytic_norm = analytic[p].iter().map(|v| v * v).sum::<f64>().sqrt();
        report.params.push(ParamError {
            name: params[p].0.clone(),
            checked: coords.len(),
            max_rel_err: worst,
            analytic_norm,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::kernels;

    #[test]
    fn quadratic_is_exact() {
        let mut params =
            vec![("theta".to_string(), Tensor::new(vec![4], vec![0.5, -1.5, 2.0, 0.1]).unwrap())];
        let report = grad_check(
            &mut params,
            |g, v| {
                let sq = g.mul(v[0], v[0])?;
                Ok(g.sum(sq))
            },
            &GradCheckOptions { tol: 1e-9, ..Default::default() },
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn rejects_bad_step_and_nonfinite_loss() {
        let mut params = vec![("x".to_string(), Tensor::new(vec![1], vec![1.0]).unwrap())];
        let bad = GradCheckOptions { h: 1e-2, ..Default::default() };
        assert!(grad_check(&mut params, |g, v| Ok(g.sum(v[0])), &bad).is_err());
        let nan = grad_check(
            &mut params,
            |g, _| Ok(g.constant(Tensor::scalar(f64::NAN))),
            &GradCheckOptions::default(),
        );
        assert!(matches!(nan, Err(Error::NonFinite(_))));
    }

    /// Every primitive against central differences on small random tensors.
    #[test]
    fn primitives_match_finite_differences() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let opts = GradCheckOptions { tol: 1e-6, h: 1e-5, abs_floor: 1e-4, ..Default::default() };
        let dims = kernels::AttnDims { n_seq: 2, seq: 3, n_heads: 2, n_kv_heads: 1, head_dim: 4 };
        let mut params = vec![
            ("a".to_string(), Tensor::randn(&[6, 8], 0.7, &mut rng)),
            ("w".to_string(), Tensor::randn(&[8, 8], 0.5, &mut rng)),
            ("gain".to_string(), Tensor::randn(&[8], 1.0, &mut rng)),
            ("wk".to_string(), Tensor::randn(&[8, 4], 0.5, &mut rng)),
            ("wv".to_string(), Tensor::randn(&[8, 4], 0.5, &mut rng)),
            ("table".to_string(), Tensor::randn(&[5, 8], 1.0, &mut rng)),
            ("head".to_string(), Tensor::randn(&[8, 5], 0.5, &mut rng)),
        ];
        let positions = [0usize, 1, 2, 0, 1, 2];
        let report = grad_check(
            &mut params,
            |g, v| {
                let e = g.embedding(v[5], &[1, 3, 3, 0, 4, 2])?;
                let x = g.add(v[0], e)?;
                let n = g.rmsnorm(x, v[2], 1e-6)?;
                let q = g.matmul(n, v[1])?;
                let q = g.rope(q, &positions, 2, 4, 100.0)?;
                let k = g.matmul(n, v[3])?;
                let k = g.rope(k, &positions, 1, 4, 100.0)?;
                let val = g.matmul(n, v[4])?;
                let att = g.attention(q, k, val, dims)?;
                let s = g.silu(att);
                let h = g.mul(s, x)?;
                let logits = g.matmul(h, v[6])?;
                g.cross_entropy(logits, &[0, 1, 2, 3, 4, 0])
            },
            &opts,
        )
        .unwrap();
        assert!(report.passed(), "{report:#?}");
    }
}
