//! Vector-quantisation codebook: nearest-code lookup, EMA re-estimation,
//! utilisation statistics and dead-code recycling. Codes are never touched by
//! gradient descent.

use humocon_autograd::{Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    /// N × d.
    pub codes: Tensor,
    pub ema_cluster_size: Vec<f64>,
    /// N × d.
    pub ema_embed_sum: Tensor,
    pub decay: f64,
    pub laplace_eps: f64,
    pub steps_since_used: Vec<u64>,
}

impl Codebook {
    /// EMA statistics start at one virtual member per code, located at the code.
    pub fn from_codes(codes: Tensor, decay: f64, laplace_eps: f64) -> Result<Self> {
        if codes.rank() != 2 || codes.shape()[0] < 2 {
            return Err(Error::Config(format!("codebook needs shape [N >= 2, d], got {:?}", codes.shape())));
        }
        if !(decay > 0.0 && decay < 1.0) || !(laplace_eps > 0.0) {
            return Err(Error::Config(format!("invalid EMA decay {decay} / eps {laplace_eps}")));
        }
        if !codes.all_finite() {
            return Err(Error::Config("codebook contains non-finite values".into()));
        }
        let n = codes.shape()[0];
        Ok(Self {
            ema_embed_sum: codes.clone(),
            codes,
            ema_cluster_size: vec![1.0; n],
            decay,
            laplace_eps,
            steps_since_used: vec![0; n],
        })
    }

    pub fn random(n: usize, dim: usize, scale: f64, decay: f64, laplace_eps: f64, rng: &mut impl Rng) -> Result<Self> {
        let data = (0..n * dim).map(|_| rng.gen_range(-scale..=scale)).collect();
        Self::from_codes(Tensor::from_vec(&[n, dim], data), decay, laplace_eps)
    }

    pub fn size(&self) -> usize {
        self.codes.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.codes.shape()[1]
    }

    pub fn code(&self, k: usize) -> &[f64] {
        let d = self.dim();
        &self.codes.data()[k * d..(k + 1) * d]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizedFeatures {
    pub indices: Vec<usize>,
    /// M × d rows copied from the codebook.
    pub vectors: Tensor,
    /// M × d pre-quantisation features.
    pub input_features: Tensor,
}

impl QuantizedFeatures {
    /// Quantised values in the forward pass with gradients routed unchanged to
    /// `features` (straight-through). `features` must hold `input_features`.
    pub fn straight_through<'t>(&self, features: Var<'t>) -> Var<'t> {
        // F − sg(F) is exactly zero, so the forward value is bit-identical to D
        let q = self.vectors.reshape(&features.shape()).expect("same element count");
        features.sub(features.detach()).add(features.tape().constant(q))
    }
}

/// Nearest code by squared Euclidean distance; ties go to the lowest index.
pub fn quantize(features: &Tensor, codebook: &Codebook) -> Result<QuantizedFeatures> {
    let d = codebook.dim();
    if features.rank() != 2 || features.shape()[1] != d {
        return Err(Error::Shape(humocon_autograd::ShapeError::new(format!(
            "features {:?} do not match codebook dim {d}",
            features.shape()
        ))));
    }
    let n = codebook.size();
    let codes = codebook.codes.data();
    let mut indices = Vec::with_capacity(features.shape()[0]);
    let mut vectors = Vec::with_capacity(features.numel());
    for f in features.data().chunks(d) {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for k in 0..n {
            let c = &codes[k * d..(k + 1) * d];
            let mut dist = 0.0;
            for i in 0..d {
                let diff = f[i] - c[i];
                dist += diff * diff;
            }
            if dist < best_d {
                best_d = dist;
                best = k;
            }
        }
        indices.push(best);
        vectors.extend_from_slice(&codes[best * d..(best + 1) * d]);
    }
    Ok(QuantizedFeatures {
        indices,
        vectors: Tensor::from_vec(features.shape(), vectors),
        input_features: features.clone(),
    })
}

/// One EMA step:
/// `size ← γ·size + (1−γ)·count`, `sum ← γ·sum + (1−γ)·Σ assigned`,
/// `code ← sum / smoothed(size)` with
/// `smoothed(size_k) = (size_k + ε) / (n + N·ε) · n`, `n = Σ size`.
pub fn ema_update(codebook: &mut Codebook, features: &Tensor, indices: &[usize]) {
    let (n, d) = (codebook.size(), codebook.dim());
    let g = codebook.decay;
    let mut counts = vec![0.0; n];
    let mut sums = vec![0.0; n * d];
    for (f, &k) in features.data().chunks(d).zip(indices) {
        counts[k] += 1.0;
        for i in 0..d {
            sums[k * d + i] += f[i];
        }
    }
    for k in 0..n {
        codebook.ema_cluster_size[k] = g * codebook.ema_cluster_size[k] + (1.0 - g) * counts[k];
        if counts[k] > 0.0 {
            codebook.steps_since_used[k] = 0;
        } else {
            codebook.steps_since_used[k] += 1;
        }
    }
    for (s, &x) in codebook.ema_embed_sum.data_mut().iter_mut().zip(&sums) {
        *s = g * *s + (1.0 - g) * x;
    }
    let total: f64 = codebook.ema_cluster_size.iter().sum();
    let eps = codebook.laplace_eps;
    let sums = codebook.ema_embed_sum.data().to_vec();
    let codes = codebook.codes.data_mut();
    for k in 0..n {
        let smoothed = (codebook.ema_cluster_size[k] + eps) / (total + n as f64 * eps) * total;
        for i in 0..d {
            codes[k * d + i] = sums[k * d + i] / smoothed;
        }
    }
}

/// exp(entropy) of the empirical code distribution, in [1, N].
pub fn perplexity(indices: &[usize], n: usize) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::Domain("perplexity of an empty index set".into()));
    }
    let mut counts = vec![0usize; n];
    for &i in indices {
        if i >= n {
            return Err(Error::Index(format!("code index {i} outside codebook of size {n}")));
        }
        counts[i] += 1;
    }
    let total = indices.len() as f64;
    let entropy: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.ln()
        })
        .sum();
    Ok(entropy.exp())
}

/// Replaces every code unused for at least `dead_threshold` consecutive EMA
/// steps with a uniformly drawn row of `features`. Returns the recycled codes.
pub fn reinit_dead_codes(
    codebook: &mut Codebook,
    features: &Tensor,
    dead_threshold: u64,
    rng: &mut impl Rng,
) -> Vec<usize> {
    let d = codebook.dim();
    let rows = features.numel() / d;
    if rows == 0 {
        return vec![];
    }
    let mut recycled = Vec::new();
    for k in 0..codebook.size() {
        if codebook.steps_since_used[k] < dead_threshold {
            continue;
        }
        let r = rng.gen_range(0..rows);
        let row = &features.data()[r * d..(r + 1) * d];
        codebook.codes.data_mut()[k * d..(k + 1) * d].copy_from_slice(row);
        codebook.ema_embed_sum.data_mut()[k * d..(k + 1) * d].copy_from_slice(row);
        codebook.ema_cluster_size[k] = 1.0;
        codebook.steps_since_used[k] = 0;
        recycled.push(k);
    }
    recycled
}
