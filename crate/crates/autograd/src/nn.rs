//! Parameter storage, layer building blocks, and the Adam optimizer.

use std::cell::RefCell;
use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named, ordered parameter tensors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Params {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    /// Uniform(-bound, bound) initialisation.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        bound: f64,
        rng: &mut impl Rng,
    ) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        self.add(name, Tensor::from_vec(shape, data))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}

/// Binds parameters onto a tape for one forward pass.
pub struct Ctx<'t> {
    pub tape: &'t Tape,
    params: &'t Params,
    trainable: Vec<bool>,
    bound: RefCell<Vec<Option<Var<'t>>>>,
}

impl<'t> Ctx<'t> {
    /// Every parameter is differentiable.
    pub fn new(tape: &'t Tape, params: &'t Params) -> Self {
        Self::with_trainable(tape, params, |_| true)
    }

    /// Only parameters whose name satisfies `trainable` are differentiable; the
    /// rest enter the tape as constants.
    pub fn with_trainable(tape: &'t Tape, params: &'t Params, trainable: impl Fn(&str) -> bool) -> Self {
        let trainable = params.names.iter().map(|n| trainable(n)).collect();
        Self { tape, params, trainable, bound: RefCell::new(vec![None; params.len()]) }
    }

    pub fn p(&self, id: ParamId) -> Var<'t> {
        if let Some(v) = self.bound.borrow()[id.0] {
            return v;
        }
        let value = self.params.get(id).clone();
        let v = if self.trainable[id.0] { self.tape.var(value) } else { self.tape.constant(value) };
        self.bound.borrow_mut()[id.0] = Some(v);
        v
    }

    pub fn params(&self) -> &'t Params {
        self.params
    }

    /// Trainable parameters touched by the forward pass so far.
    pub fn bound_trainable(&self) -> Vec<(ParamId, Var<'t>)> {
        self.bound
            .borrow()
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.filter(|_| self.trainable[i]).map(|v| (ParamId(i), v)))
            .collect()
    }

    /// First-order gradients of `loss` for every bound trainable parameter.
    pub fn gradients(&self, loss: Var<'t>) -> Vec<(ParamId, Tensor)> {
        let bound = self.bound_trainable();
        let vars: Vec<Var<'t>> = bound.iter().map(|(_, v)| *v).collect();
        let grads = self.tape.grad(loss, &vars, false);
        bound.into_iter().zip(grads).map(|((id, _), g)| (id, (*g.value()).clone())).collect()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(params: &mut Params, name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = params.add_uniform(format!("{name}.weight"), &[in_dim, out_dim], bound, rng);
        let bias = params.add_uniform(format!("{name}.bias"), &[out_dim], bound, rng);
        Self { weight, bias, in_dim, out_dim }
    }

    /// Applies `x W + b` over the last axis.
    pub fn forward<'t>(&self, cx: &Ctx<'t>, x: Var<'t>) -> Var<'t> {
        x.matmul(cx.p(self.weight)).add(cx.p(self.bias))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(params: &mut Params, name: &str, dim: usize) -> Self {
        let gain = params.add(format!("{name}.gain"), Tensor::full(&[dim], 1.0));
        let shift = params.add(format!("{name}.shift"), Tensor::zeros(&[dim]));
        Self { gain, shift, eps: 1e-5 }
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t>, x: Var<'t>) -> Var<'t> {
        let last = x.shape().len() - 1;
        let centered = x.sub(x.mean_axis(last));
        let var = centered.square().mean_axis(last);
        let normed = centered.div(var.offset(self.eps).sqrt());
        normed.mul(cx.p(self.gain)).add(cx.p(self.shift))
    }
}

/// Multi-head self-attention over `[batch, len, dim]`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SelfAttention {
    pub qkv: Linear,
    pub out: Linear,
    pub heads: usize,
    pub causal: bool,
}

impl SelfAttention {
    pub fn new(params: &mut Params, name: &str, dim: usize, heads: usize, causal: bool, rng: &mut impl Rng) -> Self {
        assert!(heads > 0 && dim % heads == 0, "dim {dim} not divisible by {heads} heads");
        Self {
            qkv: Linear::new(params, &format!("{name}.qkv"), dim, 3 * dim, rng),
            out: Linear::new(params, &format!("{name}.out"), dim, dim, rng),
            heads,
            causal,
        }
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t>, x: Var<'t>) -> Var<'t> {
        let s = x.shape();
        let (b, l, d) = (s[0], s[1], s[2]);
        let h = self.heads;
        let dh = d / h;
        let qkv = self.qkv.forward(cx, x);
        let split = |i: usize| {
            qkv.narrow(2, i * d, d)
                .reshape(&[b, l, h, dh])
                .permute(&[0, 2, 1, 3])
                .reshape(&[b * h, l, dh])
        };
        let (q, k, v) = (split(0), split(1), split(2));
        let mut scores = q.matmul_t(k, false, true).scale(1.0 / (dh as f64).sqrt());
        if self.causal {
            let mut mask = Tensor::zeros(&[l, l]);
            for i in 0..l {
                for j in i + 1..l {
                    mask.data_mut()[i * l + j] = -1e9;
                }
            }
            scores = scores.add(cx.tape.constant(mask));
        }
        let attn = scores.softmax();
        let ctx = attn.matmul(v).reshape(&[b, h, l, dh]).permute(&[0, 2, 1, 3]).reshape(&[b, l, d]);
        self.out.forward(cx, ctx)
    }
}

/// Pre-norm transformer block.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TransformerLayer {
    pub norm1: LayerNorm,
    pub attn: SelfAttention,
    pub norm2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
}

impl TransformerLayer {
    pub fn new(
        params: &mut Params,
        name: &str,
        dim: usize,
        heads: usize,
        ff_dim: usize,
        causal: bool,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            norm1: LayerNorm::new(params, &format!("{name}.norm1"), dim),
            attn: SelfAttention::new(params, &format!("{name}.attn"), dim, heads, causal, rng),
            norm2: LayerNorm::new(params, &format!("{name}.norm2"), dim),
            ff1: Linear::new(params, &format!("{name}.ff1"), dim, ff_dim, rng),
            ff2: Linear::new(params, &format!("{name}.ff2"), ff_dim, dim, rng),
        }
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t>, x: Var<'t>) -> Var<'t> {
        let x = x.add(self.attn.forward(cx, self.norm1.forward(cx, x)));
        let hidden = self.ff1.forward(cx, self.norm2.forward(cx, x)).relu();
        x.add(self.ff2.forward(cx, hidden))
    }
}

/// Adam with bias correction and per-parameter step counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    first: HashMap<usize, Tensor>,
    second: HashMap<usize, Tensor>,
    steps: HashMap<usize, u64>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            first: HashMap::new(),
            second: HashMap::new(),
            steps: HashMap::new(),
        }
    }

    /// First moment, second moment and step count of one parameter.
    pub fn state(&self, id: ParamId) -> Option<(&Tensor, &Tensor, u64)> {
        Some((self.first.get(&id.0)?, self.second.get(&id.0)?, *self.steps.get(&id.0)?))
    }

    pub fn set_state(&mut self, id: ParamId, first: Tensor, second: Tensor, steps: u64) {
        self.first.insert(id.0, first);
        self.second.insert(id.0, second);
        self.steps.insert(id.0, steps);
    }

    pub fn step(&mut self, params: &mut Params, grads: &[(ParamId, Tensor)]) {
        for (id, g) in grads {
            let p = params.get_mut(*id);
            let m = self.first.entry(id.0).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.second.entry(id.0).or_insert_with(|| Tensor::zeros(g.shape()));
            let t = self.steps.entry(id.0).or_insert(0);
            *t += 1;
            let c1 = 1.0 - self.beta1.powi(*t as i32);
            let c2 = 1.0 - self.beta2.powi(*t as i32);
            let (b1, b2) = (self.beta1, self.beta2);
            for (((pi, &gi), mi), vi) in
                p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut())
            {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *pi -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_zero_weight_outputs_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = Params::new();
        let lin = Linear::new(&mut params, "l", 3, 2, &mut rng);
        *params.get_mut(lin.weight) = Tensor::zeros(&[3, 2]);
        *params.get_mut(lin.bias) = Tensor::from_vec(&[2], vec![0.5, -1.0]);
        let tape = Tape::new();
        let cx = Ctx::new(&tape, &params);
        let x = tape.constant(Tensor::full(&[4, 3], 7.0));
        let y = lin.forward(&cx, x).value();
        assert_eq!(y.shape(), &[4, 2]);
        assert!(y.data().chunks(2).all(|r| r == [0.5, -1.0]));
    }

    #[test]
    fn causal_attention_ignores_future() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut params = Params::new();
        let attn = SelfAttention::new(&mut params, "a", 4, 2, true, &mut rng);
        let base: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut changed = base.clone();
        for v in &mut changed[8..] {
            *v += 1.0;
        }
        let run = |d: Vec<f64>| {
            let tape = Tape::new();
            let cx = Ctx::new(&tape, &params);
            let x = tape.constant(Tensor::from_vec(&[1, 3, 4], d));
            let y = attn.forward(&cx, x).value();
            y.data().to_vec()
        };
        let (a, b) = (run(base), run(changed));
        assert_eq!(&a[..8], &b[..8]);
        assert_ne!(&a[8..], &b[8..]);
    }

    #[test]
    fn adam_minimises_quadratic() {
        let mut params = Params::new();
        let id = params.add("x", Tensor::from_vec(&[2], vec![3.0, -2.0]));
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            let tape = Tape::new();
            let cx = Ctx::new(&tape, &params);
            let loss = cx.p(id).square().sum();
            let grads = cx.gradients(loss);
            opt.step(&mut params, &grads);
        }
        assert!(params.get(id).data().iter().all(|v| v.abs() < 1e-2));
    }
}
