//! Recorded computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order. `backward` walks it once in reverse and accumulates
//! gradients into every input, which is what makes a tensor consumed by
//! several ops (for example the shared Q/K of a boundary layer) receive the
//! sum of all its consumers' contributions.

use super::kernels::{self, AttnDims};
use super::{Float, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Silu(Var),
    Sum(Var),
    Dot { x: Var, weights: Vec<T> },
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<T> },
    Rope { x: Var, positions: Vec<usize>, n_heads: usize, head_dim: usize, freqs: Vec<f64> },
    Embedding { table: Var, ids: Vec<usize> },
    Attention { q: Var, k: Var, v: Var, dims: AttnDims, probs: Vec<T> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Float> Gradients<T> {
    /// `None` when no gradient reached the node (it was not consumed on any
    /// path to the loss, or it is a constant).
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf; never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul(self.value(a), self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p + q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::from_fn(t.shape(), |i| kernels::silu(t.data()[i]));
        let ng = self.needs(x);
        self.push(out, Op::Silu(x), ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let ng = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    /// `Σ x ⊙ weights` for a constant weight tensor.
    pub fn dot_const(&mut self, x: Var, weights: &Tensor<T>) -> Result<Var> {
        if self.value(x).shape() != weights.shape() {
            return Err(Error::shape("dot_const: weight shape differs from input"));
        }
        let s = self
            .value(x)
            .data()
            .iter()
            .zip(weights.data())
            .fold(T::zero(), |acc, (&a, &b)| acc + a * b);
        let ng = self.needs(x);
        Ok(self.push(Tensor::scalar(s), Op::Dot { x, weights: weights.data().to_vec() }, ng))
    }

    pub fn rmsnorm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let (xt, gt) = (self.value(x), self.value(gain));
        if xt.cols() != gt.len() {
            return Err(Error::shape(format!(
                "rmsnorm gain of {} for rows of width {}",
                gt.len(),
                xt.cols()
            )));
        }
        let mut y = vec![T::zero(); xt.len()];
        let mut inv = vec![T::zero(); xt.rows()];
        kernels::rmsnorm_rows(xt.data(), gt.data(), T::lit(eps), &mut y, &mut inv);
        let out = Tensor::new(xt.shape().to_vec(), y)?;
        let ng = self.needs(x) || self.needs(gain);
        Ok(self.push(out, Op::RmsNorm { x, gain, inv_rms: inv }, ng))
    }

    /// Rotary embedding over rows laid out as `[n_heads, head_dim]`.
    pub fn rope(
        &mut self,
        x: Var,
        positions: &[usize],
        n_heads: usize,
        head_dim: usize,
        theta: f64,
    ) -> Result<Var> {
        if head_dim % 2 != 0 {
            return Err(Error::config(format!("rope needs an even head_dim, got {head_dim}")));
        }
        let xt = self.value(x);
        if xt.cols() != n_heads * head_dim || xt.rows() != positions.len() {
            return Err(Error::shape(format!(
                "rope over {:?} with {} positions and {n_heads}x{head_dim} heads",
                xt.shape(),
                positions.len()
            )));
        }
        let freqs = kernels::rope_frequencies(head_dim, theta);
        let mut out = xt.clone();
        kernels::rope_rows(out.data_mut(), positions, n_heads, head_dim, &freqs, false);
        let ng = self.needs(x);
        let op = Op::Rope { x, positions: positions.to_vec(), n_heads, head_dim, freqs };
        Ok(self.push(out, op, ng))
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (vocab, d) = kernels::as_matrix(t)?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Index(format!("token id {bad} outside vocabulary of {vocab}")));
        }
        if ids.is_empty() {
            return Err(Error::shape("embedding of an empty token list"));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&t.data()[i * d..(i + 1) * d]);
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        let ng = self.needs(table);
        Ok(self.push(out, Op::Embedding { table, ids: ids.to_vec() }, ng))
    }

    pub fn attention(&mut self, q: Var, k: Var, v: Var, dims: AttnDims) -> Result<Var> {
        let rows = dims.n_seq * dims.seq;
        let (qt, kt, vt) = (self.value(q), self.value(k), self.value(v));
        let ok = qt.shape() == [rows, dims.q_width()]
            && kt.shape() == [rows, dims.kv_width()]
            && vt.shape() == [rows, dims.kv_width()];
        if !ok || dims.n_heads % dims.n_kv_heads != 0 {
            return Err(Error::shape(format!(
                "attention q{:?} k{:?} v{:?} do not fit {dims:?}",
                qt.shape(),
                kt.shape(),
                vt.shape()
            )));
        }
        let mut out = vec![T::zero(); rows * dims.q_width()];
        let mut probs = vec![T::zero(); dims.probs_len()];
        kernels::causal_attention(qt.data(), kt.data(), vt.data(), dims, &mut out, &mut probs);
        let out = Tensor::new(vec![rows, dims.q_width()], out)?;
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(out, Op::Attention { q, k, v, dims, probs }, ng))
    }

    /// Mean cross-entropy of `logits` rows against `targets`; a scalar node.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lt = self.value(logits);
        let (rows, vocab) = kernels::as_matrix(lt)?;
        if rows != targets.len() {
            return Err(Error::shape(format!("{} targets for {rows} rows", targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(Error::Index(format!("target {bad} outside vocabulary of {vocab}")));
        }
        let (loss, probs) = kernels::cross_entropy_rows(lt.data(), vocab, targets);
        if !loss.is_finite() {
            return Err(Error::NonFinite("cross-entropy loss".into()));
        }
        let ng = self.needs(logits);
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), probs };
        Ok(self.push(Tensor::scalar(loss), op, ng))
    }

    /// Reverse pass from a scalar node. Each node is visited once.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward needs a scalar loss"));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let slot = |grads: &mut [Option<Vec<T>>], v: Var| -> Option<usize> {
            if !self.needs(v) {
                return None;
            }
            if grads[v.0].is_none() {
                grads[v.0] = Some(vec![T::zero(); self.value(v).len()]);
            }
            Some(v.0)
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (at, bt) = (self.value(*a), self.value(*b));
                let (m, k) = (at.rows(), at.cols());
                let n = bt.cols();
                if let Some(i) = slot(grads, *a) {
                    let da = grads[i].as_mut().unwrap();
                    kernels::gemm(m, n, k, g, false, bt.data(), true, da, true);
                }
                if let Some(i) = slot(grads, *b) {
                    let db = grads[i].as_mut().unwrap();
                    kernels::gemm(k, m, n, at.data(), true, g, false, db, true);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(i) = slot(grads, v) {
                        let d = grads[i].as_mut().unwrap();
                        d.iter_mut().zip(g).for_each(|(d, &gv)| *d = *d + gv);
                    }
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if let Some(i) = slot(grads, v) {
                        let o = self.value(other).data();
                        let d = grads[i].as_mut().unwrap();
                        for ((d, &gv), &ov) in d.iter_mut().zip(g).zip(o) {
                            *d = *d + gv * ov;
                        }
                    }
                }
            }
            Op::Silu(x) => {
                if let Some(i) = slot(grads, *x) {
                    let xv = self.value(*x).data();
                    let d = grads[i].as_mut().unwrap();
                    for ((d, &gv), &x) in d.iter_mut().zip(g).zip(xv) {
                        let s = kernels::sigmoid(x);
                        *d = *d + gv * s * (T::one() + x * (T::one() - s));
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(i) = slot(grads, *x) {
                    let d = grads[i].as_mut().unwrap();
                    d.iter_mut().for_each(|d| *d = *d + g[0]);
                }
            }
            Op::Dot { x, weights } => {
                if let Some(i) = slot(grads, *x) {
                    let d = grads[i].as_mut().unwrap();
                    d.iter_mut().zip(weights).for_each(|(d, &w)| *d = *d + g[0] * w);
                }
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (xt, gt) = (self.value(*x), self.value(*gain));
                let dim = gt.len();
                let dn = T::lit(dim as f64);
                if let Some(i) = slot(grads, *gain) {
                    let dg = grads[i].as_mut().unwrap();
                    for ((xr, gr), &r) in xt.data().chunks(dim).zip(g.chunks(dim)).zip(inv_rms) {
                        for ((d, &xv), &gv) in dg.iter_mut().zip(xr).zip(gr) {
                            *d = *d + gv * xv * r;
                        }
                    }
                }
                if let Some(i) = slot(grads, *x) {
                    let dx = grads[i].as_mut().unwrap();
                    for (((dr, xr), gr), &r) in dx
                        .chunks_mut(dim)
                        .zip(xt.data().chunks(dim))
                        .zip(g.chunks(dim))
                        .zip(inv_rms)
                    {
                        let mut s = T::zero();
                        for ((&gv, &w), &xv) in gr.iter().zip(gt.data()).zip(xr) {
                            s = s + gv * w * xv;
                        }
                        let coef = r * r * r * s / dn;
                        for (((d, &gv), &w), &xv) in dr.iter_mut().zip(gr).zip(gt.data()).zip(xr) {
                            *d = *d + r * gv * w - coef * xv;
                        }
                    }
                }
            }
            Op::Rope { x, positions, n_heads, head_dim, freqs } => {
                if let Some(i) = slot(grads, *x) {
                    let mut back = g.to_vec();
                    kernels::rope_rows(&mut back, positions, *n_heads, *head_dim, freqs, true);
                    let d = grads[i].as_mut().unwrap();
                    d.iter_mut().zip(&back).for_each(|(d, &b)| *d = *d + b);
                }
            }
            Op::Embedding { table, ids } => {
                if let Some(i) = slot(grads, *table) {
                    let dim = self.value(*table).cols();
                    let d = grads[i].as_mut().unwrap();
                    for (row, &id) in g.chunks(dim).zip(ids) {
                        let dst = &mut d[id * dim..(id + 1) * dim];
                        dst.iter_mut().zip(row).for_each(|(d, &r)| *d = *d + r);
                    }
                }
            }
            Op::Attention { q, k, v, dims, probs } => {
                let (qt, kt, vt) = (self.value(*q), self.value(*k), self.value(*v));
                // Gradients are accumulated in place; inputs that need none
                // get a scratch buffer.
                let mut take = |var: Var, len: usize| match slot(grads, var) {
                    Some(i) => grads[i].take().unwrap(),
                    None => vec![T::zero(); len],
                };
                let mut dq = take(*q, qt.len());
                let mut dk = take(*k, kt.len());
                let mut dv = take(*v, vt.len());
                kernels::causal_attention_backward(
                    qt.data(),
                    kt.data(),
                    vt.data(),
                    probs,
                    g,
                    *dims,
                    &mut dq,
                    &mut dk,
                    &mut dv,
                );
                for (var, buf) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if self.needs(var) {
                        grads[var.0] = Some(buf);
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                if let Some(i) = slot(grads, *logits) {
                    let vocab = self.value(*logits).cols();
                    let scale = g[0] / T::lit(targets.len() as f64);
                    let d = grads[i].as_mut().unwrap();
                    for ((dr, pr), &t) in d.chunks_mut(vocab).zip(probs.chunks(vocab)).zip(targets) {
                        for (j, (dv, &p)) in dr.iter_mut().zip(pr).enumerate() {
                            let y = if j == t { T::one() } else { T::zero() };
                            *dv = *dv + (p - y) * scale;
                        }
                    }
                }
            }
        }
    }
}
