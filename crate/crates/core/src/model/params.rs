use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::numcore::{Float, Tensor};

/// Weights of one decoder layer. Projections are stored `[in, out]`, so a
/// projection of activations `x` is `x·W`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub attn_norm: Tensor<T>,
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub ffn_norm: Tensor<T>,
    pub w_gate: Tensor<T>,
    pub w_up: Tensor<T>,
    pub w_down: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub embed: Tensor<T>,
    pub layers: Vec<LayerParams<T>>,
    pub final_norm: Tensor<T>,
    pub lm_head: Tensor<T>,
}

const LAYER_FIELDS: [&str; 9] =
    ["attn_norm", "wq", "wk", "wv", "wo", "ffn_norm", "w_gate", "w_up", "w_down"];

impl<T: Float> LayerParams<T> {
    fn fields(&self) -> [&Tensor<T>; 9] {
        [
            &self.attn_norm,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.ffn_norm,
            &self.w_gate,
            &self.w_up,
            &self.w_down,
        ]
    }

    fn fields_mut(&mut self) -> [&mut Tensor<T>; 9] {
        [
            &mut self.attn_norm,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ffn_norm,
            &mut self.w_gate,
            &mut self.w_up,
            &mut self.w_down,
        ]
    }
}

/// Expected `(name, shape)` of every parameter tensor, in storage order.
pub fn param_shapes(c: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (d, dkv, ff) = (c.d_model, c.d_kv(), c.d_ff);
    let mut out = vec![("embed".to_string(), vec![c.vocab_size, d])];
    for i in 0..c.n_layers {
        let shapes = [
            vec![d],
            vec![d, d],
            vec![d, dkv],
            vec![d, dkv],
            vec![d, d],
            vec![d],
            vec![d, ff],
            vec![d, ff],
            vec![ff, d],
        ];
        for (f, s) in LAYER_FIELDS.iter().zip(shapes) {
            out.push((format!("layers.{i}.{f}"), s));
        }
    }
    out.push(("final_norm".to_string(), vec![d]));
    out.push(("lm_head".to_string(), vec![d, c.vocab_size]));
    out
}

impl<T: Float> ModelParams<T> {
    /// Normal(0, 0.02) projections, residual-output projections scaled by
    /// `1/sqrt(2L)`, unit norm gains.
    pub fn init(c: &ModelConfig, seed: u64) -> Self {
        Self::init_with_std(c, seed, 0.02)
    }

    pub fn init_with_std(c: &ModelConfig, seed: u64, std: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, dkv, ff) = (c.d_model, c.d_kv(), c.d_ff);
        let out_std = std / (2.0 * c.n_layers as f64).sqrt();
        let embed = Tensor::randn(&[c.vocab_size, d], std, &mut rng);
        let layers = (0..c.n_layers)
            .map(|_| LayerParams {
                attn_norm: Tensor::full(&[d], T::one()),
                wq: Tensor::randn(&[d, d], std, &mut rng),
                wk: Tensor::randn(&[d, dkv], std, &mut rng),
                wv: Tensor::randn(&[d, dkv], std, &mut rng),
                wo: Tensor::randn(&[d, d], out_std, &mut rng),
                ffn_norm: Tensor::full(&[d], T::one()),
                w_gate: Tensor::randn(&[d, ff], std, &mut rng),
                w_up: Tensor::randn(&[d, ff], std, &mut rng),
                w_down: Tensor::randn(&[ff, d], out_std, &mut rng),
            })
            .collect();
        let final_norm = Tensor::full(&[d], T::one());
        let lm_head = Tensor::randn(&[d, c.vocab_size], std, &mut rng);
        Self { embed, layers, final_norm, lm_head }
    }

    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![("embed".to_string(), &self.embed)];
        for (i, l) in self.layers.iter().enumerate() {
            for (f, t) in LAYER_FIELDS.iter().zip(l.fields()) {
                out.push((format!("layers.{i}.{f}"), t));
            }
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out.push(("lm_head".to_string(), &self.lm_head));
        out
    }

    /// Parameter tensors in the same order as [`named`](Self::named).
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.embed];
        for l in &mut self.layers {
            out.extend(l.fields_mut());
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.lm_head);
        out
    }

    /// Rebuilds parameters from tensors in [`param_shapes`] order.
    pub fn from_tensors(c: &ModelConfig, tensors: Vec<Tensor<T>>) -> Result<Self> {
        let shapes = param_shapes(c);
        if tensors.len() != shapes.len() {
            return Err(Error::shape(format!(
                "{} tensors given, the model has {}",
                tensors.len(),
                shapes.len()
            )));
        }
        for ((name, s), t) in shapes.iter().zip(&tensors) {
            if t.shape() != s.as_slice() {
                return Err(Error::shape(format!("{name}: expected {s:?}, got {:?}", t.shape())));
            }
        }
        let mut it = tensors.into_iter();
        let embed = it.next().unwrap();
        let mut layers = Vec::with_capacity(c.n_layers);
        for _ in 0..c.n_layers {
            let mut f: Vec<Tensor<T>> = it.by_ref().take(9).collect();
            let w_down = f.pop().unwrap();
            let w_up = f.pop().unwrap();
            let w_gate = f.pop().unwrap();
            let ffn_norm = f.pop().unwrap();
            let wo = f.pop().unwrap();
            let wv = f.pop().unwrap();
            let wk = f.pop().unwrap();
            let wq = f.pop().unwrap();
            let attn_norm = f.pop().unwrap();
            layers.push(LayerParams { attn_norm, wq, wk, wv, wo, ffn_norm, w_gate, w_up, w_down });
        }
        let final_norm = it.next().unwrap();
        let lm_head = it.next().unwrap();
        Ok(Self { embed, layers, final_norm, lm_head })
    }

    pub fn cast<U: Float>(&self) -> ModelParams<U> {
        let c = |t: &Tensor<T>| t.cast::<U>();
        ModelParams {
            embed: c(&self.embed),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    attn_norm: c(&l.attn_norm),
                    wq: c(&l.wq),
                    wk: c(&l.wk),
                    wv: c(&l.wv),
                    wo: c(&l.wo),
                    ffn_norm: c(&l.ffn_norm),
                    w_gate: c(&l.w_gate),
                    w_up: c(&l.w_up),
                    w_down: c(&l.w_down),
                })
                .collect(),
            final_norm: c(&self.final_norm),
            lm_head: c(&self.lm_head),
        }
    }

    pub fn count(&self) -> u64 {
        self.named().iter().map(|(_, t)| t.len() as u64).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::param_count;

    #[test]
    fn enumerated_shapes_match_closed_form() {
        for c in [ModelConfig::toy(), ModelConfig::llama_7b(), ModelConfig::tinyllama_1_1b()] {
            let n: u64 = param_shapes(&c).iter().map(|(_, s)| s.iter().product::<usize>() as u64).sum();
            assert_eq!(n, param_count(&c));
        }
        let n7 = param_count(&ModelConfig::llama_7b()) as f64;
        assert!((n7 / 6.74e9 - 1.0).abs() < 0.01, "{n7}");
    }

    #[test]
    fn init_count_and_roundtrip() {
        let c = ModelConfig::toy();
        let p = ModelParams::<f64>::init(&c, 1);
        assert_eq!(p.count(), param_count(&c));
        let names: Vec<String> = p.named().into_iter().map(|(n, _)| n).collect();
        let shapes: Vec<String> = param_shapes(&c).into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, shapes);
        let tensors: Vec<_> = p.named().into_iter().map(|(_, t)| t.clone()).collect();
        assert_eq!(ModelParams::from_tensors(&c, tensors).unwrap(), p);
        assert_eq!(ModelParams::<f64>::init(&c, 1), p);
        assert_ne!(ModelParams::<f64>::init(&c, 2), p);
    }
}
