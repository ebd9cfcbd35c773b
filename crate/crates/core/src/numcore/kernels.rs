//! Raw numeric kernels shared by the recorded graph, the incremental decoder
//! and the test references. All of them are deterministic for a given build.

use super::{macs, Float, Tensor};
use crate::error::{Error, Result};

/// Mask value written into causal-masked score entries before softmax.
pub const MASK_VALUE: f64 = -1e9;

/// `c (+)= op(a)·op(b)` where `op` optionally transposes a row-major operand.
///
/// `a` is `[m,k]` (or `[k,m]` when `trans_a`), `b` is `[k,n]` (or `[n,k]`
/// when `trans_b`) and `c` is `[m,n]`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Float>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: output length");
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    macs::add((m * k * n) as u64);
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = T::zero());
        }
        return;
    }
    // SAFETY: lengths were checked against the strides above.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Plain matrix product of two 2-D tensors.
pub fn matmul<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = as_matrix(a)?;
    let (k2, n) = as_matrix(b)?;
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul inner extents differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![T::zero(); m * n];
    gemm(m, k, n, a.data(), false, b.data(), false, &mut out, false);
    Tensor::new(vec![m, n], out)
}

pub(crate) fn as_matrix<T: Float>(t: &Tensor<T>) -> Result<(usize, usize)> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        s => Err(Error::shape(format!("expected a matrix, got shape {s:?}"))),
    }
}

/// Numerically stable in-place softmax of one row.
pub fn softmax_row<T: Float>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    let inv = T::one() / sum;
    row.iter_mut().for_each(|v| *v = *v * inv);
}

pub fn softmax_rows<T: Float>(x: &Tensor<T>) -> Result<Tensor<T>> {
    x.ensure_finite("softmax input")?;
    let mut out = x.clone();
    let n = x.cols();
    out.data_mut().chunks_mut(n).for_each(softmax_row);
    Ok(out)
}

/// Row-wise RMS normalisation. Writes `y` and the per-row `1/rms` factors.
pub fn rmsnorm_rows<T: Float>(x: &[T], gain: &[T], eps: T, y: &mut [T], inv_rms: &mut [T]) {
    let d = gain.len();
    let dn = T::lit(d as f64);
    for ((xr, yr), inv) in x.chunks(d).zip(y.chunks_mut(d)).zip(inv_rms.iter_mut()) {
        let ms = xr.iter().fold(T::zero(), |acc, &v| acc + v * v) / dn;
        let r = T::one() / (ms + eps).sqrt();
        *inv = r;
        for ((o, &xv), &g) in yr.iter_mut().zip(xr).zip(gain) {
            *o = xv * r * g;
        }
    }
}

pub fn rmsnorm<T: Float>(x: &Tensor<T>, gain: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    if eps <= 0.0 {
        return Err(Error::config("rmsnorm eps must be positive"));
    }
    if x.cols() != gain.len() {
        return Err(Error::shape(format!(
            "rmsnorm gain has {} entries for rows of width {}",
            gain.len(),
            x.cols()
        )));
    }
    let mut y = vec![T::zero(); x.len()];
    let mut inv = vec![T::zero(); x.rows()];
    rmsnorm_rows(x.data(), gain.data(), T::lit(eps), &mut y, &mut inv);
    Tensor::new(x.shape().to_vec(), y)
}

/// Rotation frequencies `theta^(-2i/head_dim)` for each pair of a head.
pub fn rope_frequencies(head_dim: usize, theta: f64) -> Vec<f64> {
    (0..head_dim / 2)
        .map(|i| theta.powf(-(2.0 * i as f64) / head_dim as f64))
        .collect()
}

/// In-place rotary embedding over rows laid out as `[heads, head_dim]`.
///
/// Each row `r` is rotated for position `positions[r]`; adjacent (even, odd)
/// entries of a head form one rotation pair. `inverse` applies the transpose
/// rotation, which is the backward map.
pub fn rope_rows<T: Float>(
    x: &mut [T],
    positions: &[usize],
    n_heads: usize,
    head_dim: usize,
    freqs: &[f64],
    inverse: bool,
) {
    let width = n_heads * head_dim;
    let sign = if inverse { -1.0 } else { 1.0 };
    for (row, &pos) in x.chunks_mut(width).zip(positions) {
        if pos == 0 {
            continue;
        }
        for (i, &w) in freqs.iter().enumerate() {
            let angle = sign * pos as f64 * w;
            let (s, c) = angle.sin_cos();
            let (s, c) = (T::lit(s), T::lit(c));
            for h in 0..n_heads {
                let base = h * head_dim + 2 * i;
                let a = row[base];
                let b = row[base + 1];
                row[base] = a * c - b * s;
                row[base + 1] = a * s + b * c;
            }
        }
    }
}

/// Rotary embedding of a `[seq, heads, head_dim]` tensor.
pub fn rope<T: Float>(x: &Tensor<T>, positions: &[usize], theta: f64) -> Result<Tensor<T>> {
    let [seq, heads, head_dim] = *x.shape() else {
        return Err(Error::shape(format!("rope expects [seq, heads, head_dim], got {:?}", x.shape())));
    };
    if head_dim % 2 != 0 {
        return Err(Error::config(format!("rope needs an even head_dim, got {head_dim}")));
    }
    if positions.len() != seq {
        return Err(Error::shape(format!("{} positions for {seq} rows", positions.len())));
    }
    let mut out = x.clone();
    let freqs = rope_frequencies(head_dim, theta);
    rope_rows(out.data_mut(), positions, heads, head_dim, &freqs, false);
    Ok(out)
}

pub fn sigmoid<T: Float>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub fn silu<T: Float>(x: T) -> T {
    x * sigmoid(x)
}

/// Layout of a batched multi-head attention call.
///
/// Queries are `[n_seq·seq, n_heads·head_dim]`, keys and values are
/// `[n_seq·seq, n_kv_heads·head_dim]`; query head `h` reads kv head
/// `h / (n_heads / n_kv_heads)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnDims {
    pub n_seq: usize,
    pub seq: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
}

impl AttnDims {
    pub fn q_width(&self) -> usize {
        self.n_heads * self.head_dim
    }

    pub fn kv_width(&self) -> usize {
        self.n_kv_heads * self.head_dim
    }

    pub fn group(&self) -> usize {
        self.n_heads / self.n_kv_heads
    }

    pub fn probs_len(&self) -> usize {
        self.n_seq * self.n_heads * self.seq * self.seq
    }

    pub fn scale(&self) -> f64 {
        1.0 / (self.head_dim as f64).sqrt()
    }
}

/// Strided view product used by attention: `c = alpha·a·b + beta·c`.
#[allow(clippy::too_many_arguments)]
fn gemm_view<T: Float>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    (rsa, csa): (usize, usize),
    b: &[T],
    (rsb, csb): (usize, usize),
    beta: T,
    c: &mut [T],
    (rsc, csc): (usize, usize),
) {
    let last = |r: usize, cs: usize, rows: usize, cols: usize| (rows - 1) * r + (cols - 1) * cs;
    assert!(last(rsa, csa, m, k) < a.len());
    assert!(last(rsb, csb, k, n) < b.len());
    assert!(last(rsc, csc, m, n) < c.len());
    macs::add((m * k * n) as u64);
    // SAFETY: the furthest addressed element of every view is in bounds.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Scaled `Q·Kᵀ` scores with the causal mask applied, one `[seq, seq]`
/// block per (sequence, head) written into `scores`.
pub fn attention_scores_into<T: Float>(q: &[T], k: &[T], dims: AttnDims, scores: &mut [T]) {
    let AttnDims { n_seq, seq, n_heads, head_dim, .. } = dims;
    let (qw, kw) = (dims.q_width(), dims.kv_width());
    let scale = T::lit(dims.scale());
    let mask = T::lit(MASK_VALUE);
    assert_eq!(scores.len(), dims.probs_len());
    for b in 0..n_seq {
        for h in 0..n_heads {
            let kvh = h / dims.group();
            let qs = &q[b * seq * qw + h * head_dim..];
            let ks = &k[b * seq * kw + kvh * head_dim..];
            let block = &mut scores[(b * n_heads + h) * seq * seq..][..seq * seq];
            gemm_view(
                seq,
                head_dim,
                seq,
                scale,
                qs,
                (qw, 1),
                ks,
                (1, kw),
                T::zero(),
                block,
                (seq, 1),
            );
            for i in 0..seq {
                for v in &mut block[i * seq + i + 1..(i + 1) * seq] {
                    *v = mask;
                }
            }
        }
    }
}

/// Causal multi-head attention. Writes `[n_seq·seq, n_heads·head_dim]`
/// outputs and the softmax probabilities (needed for the backward pass).
pub fn causal_attention<T: Float>(
    q: &[T],
    k: &[T],
    v: &[T],
    dims: AttnDims,
    out: &mut [T],
    probs: &mut [T],
) {
    let AttnDims { n_seq, seq, n_heads, head_dim, .. } = dims;
    let (qw, kw) = (dims.q_width(), dims.kv_width());
    attention_scores_into(q, k, dims, probs);
    probs.chunks_mut(seq).for_each(softmax_row);
    for b in 0..n_seq {
        for h in 0..n_heads {
            let kvh = h / dims.group();
            let p = &probs[(b * n_heads + h) * seq * seq..][..seq * seq];
            let vs = &v[b * seq * kw + kvh * head_dim..];
            let os = &mut out[b * seq * qw + h * head_dim..];
            gemm_view(
                seq,
                seq,
                head_dim,
                T::one(),
                p,
                (seq, 1),
                vs,
                (kw, 1),
                T::zero(),
                os,
                (qw, 1),
            );
        }
    }
}

/// Backward of [`causal_attention`]; accumulates into `dq`, `dk`, `dv`.
#[allow(clippy::too_many_arguments)]
pub fn causal_attention_backward<T: Float>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    dout: &[T],
    dims: AttnDims,
    dq: &mut [T],
    dk: &mut [T],
    dv: &mut [T],
) {
    let AttnDims { n_seq, seq, n_heads, head_dim, .. } = dims;
    let (qw, kw) = (dims.q_width(), dims.kv_width());
    let scale = T::lit(dims.scale());
    let mut ds = vec![T::zero(); seq * seq];
    for b in 0..n_seq {
        for h in 0..n_heads {
            let kvh = h / dims.group();
            let p = &probs[(b * n_heads + h) * seq * seq..][..seq * seq];
            let qoff = b * seq * qw + h * head_dim;
            let kvoff = b * seq * kw + kvh * head_dim;
            // dP = dO · Vᵀ
            gemm_view(
                seq,
                head_dim,
                seq,
                T::one(),
                &dout[qoff..],
                (qw, 1),
                &v[kvoff..],
                (1, kw),
                T::zero(),
                &mut ds,
                (seq, 1),
            );
            // dV += Pᵀ · dO
            gemm_view(
                seq,
                seq,
                head_dim,
                T::one(),
                p,
                (1, seq),
                &dout[qoff..],
                (qw, 1),
                T::one(),
                &mut dv[kvoff..],
                (kw, 1),
            );
            // dS = P ⊙ (dP − rowsum(dP ⊙ P))
            for i in 0..seq {
                let pr = &p[i * seq..(i + 1) * seq];
                let dr = &mut ds[i * seq..(i + 1) * seq];
                let dot = pr.iter().zip(dr.iter()).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
                for (d, &pv) in dr.iter_mut().zip(pr) {
                    *d = pv * (*d - dot);
                }
            }
            // dQ += scale · dS · K
            gemm_view(
                seq,
                seq,
                head_dim,
                scale,
                &ds,
                (seq, 1),
                &k[kvoff..],
                (kw, 1),
                T::one(),
                &mut dq[qoff..],
                (qw, 1),
            );
            // dK += scale · dSᵀ · Q
            gemm_view(
                seq,
                seq,
                head_dim,
                scale,
                &ds,
                (1, seq),
                &q[qoff..],
                (qw, 1),
                T::one(),
                &mut dk[kvoff..],
                (kw, 1),
            );
        }
    }
}

/// Mean next-token cross-entropy. Returns the loss and the row softmax.
pub fn cross_entropy_rows<T: Float>(logits: &[T], vocab: usize, targets: &[usize]) -> (T, Vec<T>) {
    let mut probs = logits.to_vec();
    let mut total = T::zero();
    for (row, &t) in probs.chunks_mut(vocab).zip(targets) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum = row.iter().fold(T::zero(), |acc, &v| acc + (v - max).exp());
        let lse = max + sum.ln();
        total = total + (lse - row[t]);
        let inv = T::one() / sum;
        row.iter_mut().for_each(|v| *v = (*v - max).exp() * inv);
    }
    (total / T::lit(targets.len() as f64), probs)
}

pub fn cross_entropy<T: Float>(logits: &Tensor<T>, targets: &[usize]) -> Result<T> {
    let (tokens, vocab) = as_matrix(logits)?;
    if targets.len() != tokens {
        return Err(Error::shape(format!("{} targets for {tokens} logit rows", targets.len())));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
        return Err(Error::Index(format!("target {bad} outside vocabulary of {vocab}")));
    }
    logits.ensure_finite("cross-entropy logits")?;
    Ok(cross_entropy_rows(logits.data(), vocab, targets).0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
    }

    #[test]
    fn matmul_identity_and_dot() {
        let i = Tensor::<f64>::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::new(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(matmul(&i, &b).unwrap().data(), &[3.0, 4.0, 5.0, 6.0]);
        let r = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let c = Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap();
        assert_eq!(matmul(&r, &c).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::<f64>::randn(&[4, 5], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[5, 3], 1.0, &mut rng);
        let c = matmul(&a, &b).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                let mut s = 0.0;
                for p in 0..5 {
                    s += a.data()[i * 5 + p] * b.data()[p * 3 + j];
                }
                assert!(rel(c.data()[i * 3 + j], s) < 1e-12);
            }
        }
    }

    #[test]
    fn gemm_transposes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[3, 2], 1.0, &mut rng);
        // aᵀ·b : [4,2]
        let mut c = vec![0.0; 8];
        gemm(4, 3, 2, a.data(), true, b.data(), false, &mut c, false);
        for i in 0..4 {
            for j in 0..2 {
                let s: f64 = (0..3).map(|p| a.data()[p * 4 + i] * b.data()[p * 2 + j]).sum();
                assert!(rel(c[i * 2 + j], s) < 1e-12);
            }
        }
        // a·aᵀ : [3,3]
        let mut d = vec![0.0; 9];
        gemm(3, 4, 3, a.data(), false, a.data(), true, &mut d, false);
        for i in 0..3 {
            for j in 0..3 {
                let s: f64 = (0..4).map(|p| a.data()[i * 4 + p] * a.data()[j * 4 + p]).sum();
                assert!(rel(d[i * 3 + j], s) < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_cases() {
        let x = Tensor::<f64>::new(vec![1, 3], vec![0.0; 3]).unwrap();
        let y = softmax_rows(&x).unwrap();
        for v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = Tensor::<f64>::new(vec![1, 3], vec![1000.0, 0.0, 0.0]).unwrap();
        let y = softmax_rows(&x).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-12 && y.data()[1] < 1e-300);
        assert!(y.is_finite());
        let bad = Tensor::<f64>::new(vec![1, 2], vec![f64::NAN, 0.0]).unwrap();
        assert!(matches!(softmax_rows(&bad), Err(Error::NonFinite(_))));
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::<f64>::randn(&[3, 7], 2.0, &mut rng);
        let y = softmax_rows(&x).unwrap();
        for (xr, yr) in x.data().chunks(7).zip(y.data().chunks(7)) {
            let z: f64 = xr.iter().map(|v| v.exp()).sum();
            for (a, b) in xr.iter().zip(yr) {
                assert!(rel(a.exp() / z, *b) < 1e-12);
            }
            assert!((yr.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rmsnorm_cases() {
        let g = Tensor::<f64>::full(&[4], 1.0);
        let z = Tensor::<f64>::zeros(&[2, 4]);
        assert!(rmsnorm(&z, &g, 1e-6).unwrap().data().iter().all(|&v| v == 0.0));
        let x = Tensor::<f64>::new(vec![1, 4], vec![1.0, -1.0, 1.0, -1.0]).unwrap();
        let y = rmsnorm(&x, &g, 1e-14).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-12);
        assert!(rmsnorm(&x, &g, 0.0).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::<f64>::randn(&[3, 6], 1.5, &mut rng);
        let g = Tensor::<f64>::randn(&[6], 1.0, &mut rng);
        let y = rmsnorm(&x, &g, 1e-5).unwrap();
        for (xr, yr) in x.data().chunks(6).zip(y.data().chunks(6)) {
            let mut ms = 0.0;
            for v in xr {
                ms += v * v;
            }
            let r = (ms / 6.0 + 1e-5).sqrt();
            for i in 0..6 {
                assert!(rel(xr[i] / r * g.data()[i], yr[i]) < 1e-12);
            }
        }
    }

    #[test]
    fn rope_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::<f64>::randn(&[3, 2, 4], 1.0, &mut rng);
        let y = rope(&x, &[0, 1, 5], 10000.0).unwrap();
        assert_eq!(&y.data()[..8], &x.data()[..8]);
        for (xp, yp) in x.data().chunks(2).zip(y.data().chunks(2)) {
            let nx = xp[0].hypot(xp[1]);
            let ny = yp[0].hypot(yp[1]);
            assert!((nx - ny).abs() < 1e-12);
        }
        // unit vector in the first pair of a head rotates by angle p·ω₀ = p
        let mut e = Tensor::<f64>::zeros(&[1, 1, 2]);
        e.data_mut()[0] = 1.0;
        let r = rope(&e, &[3], 10000.0).unwrap();
        assert!((r.data()[0] - 3f64.cos()).abs() < 1e-15);
        assert!((r.data()[1] - 3f64.sin()).abs() < 1e-15);
        // second pair uses ω₁ = θ^(-2/4)
        let mut e = Tensor::<f64>::zeros(&[1, 1, 4]);
        e.data_mut()[2] = 1.0;
        let r = rope(&e, &[2], 100.0).unwrap();
        assert!((r.data()[2] - (2.0f64 * 0.1).cos()).abs() < 1e-15);
        assert!((r.data()[3] - (2.0f64 * 0.1).sin()).abs() < 1e-15);

        let odd = Tensor::<f64>::zeros(&[1, 1, 3]);
        assert!(matches!(rope(&odd, &[0], 1e4), Err(Error::Config(_))));
    }

    #[test]
    fn rope_inverse_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = Tensor::<f64>::randn(&[4, 3, 6], 1.0, &mut rng);
        let freqs = rope_frequencies(6, 500.0);
        let mut y = x.data().to_vec();
        rope_rows(&mut y, &[0, 2, 7, 9], 3, 6, &freqs, false);
        rope_rows(&mut y, &[0, 2, 7, 9], 3, 6, &freqs, true);
        for (a, b) in x.data().iter().zip(&y) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn cross_entropy_cases() {
        let u = Tensor::<f64>::zeros(&[2, 4]);
        assert!((cross_entropy(&u, &[0, 3]).unwrap() - 4f64.ln()).abs() < 1e-12);
        let mut d = Tensor::<f64>::zeros(&[1, 4]);
        d.data_mut()[2] = 1e4;
        assert!(cross_entropy(&d, &[2]).unwrap().abs() < 1e-12);
        assert!(matches!(cross_entropy(&u, &[0, 4]), Err(Error::Index(_))));

        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x = Tensor::<f64>::randn(&[5, 6], 1.0, &mut rng);
        let t = [0, 5, 2, 2, 1];
        let mut want = 0.0;
        for (row, &ti) in x.data().chunks(6).zip(&t) {
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            want -= (row[ti].exp() / z).ln();
        }
        want /= 5.0;
        assert!(rel(cross_entropy(&x, &t).unwrap(), want) < 1e-10);
    }

    #[test]
    fn attention_counts_full_square() {
        let dims = AttnDims { n_seq: 2, seq: 3, n_heads: 2, n_kv_heads: 1, head_dim: 4 };
        let q = vec![0.1f64; 6 * 8];
        let k = vec![0.2f64; 6 * 4];
        let v = vec![0.3f64; 6 * 4];
        let mut out = vec![0.0; 6 * 8];
        let mut p = vec![0.0; dims.probs_len()];
        let (_, n) = macs::measure(|| causal_attention(&q, &k, &v, dims, &mut out, &mut p));
        assert_eq!(n, 2 * 2 * 2 * 3 * 3 * 4);
        // constant V → every output equals the value
        assert!(out.iter().all(|&o| (o - 0.3).abs() < 1e-15));
        // causal: first row attends only to itself
        assert_eq!(p[0], 1.0);
        assert_eq!(p[1], 0.0);
    }
}
