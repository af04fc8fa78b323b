//! Projection of quantised features into a shared space and the contrastive
//! video→motion alignment loss.

use humocon_autograd::{Ctx, Linear, Params, ShapeError, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const NORM_EPS2: f64 = 1e-12;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProjectionLayer {
    pub linear: Linear,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl ProjectionLayer {
    pub fn new(params: &mut Params, name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        Self { linear: Linear::new(params, name, in_dim, out_dim, rng), in_dim, out_dim }
    }

    /// `[.., in_dim]` → unit-norm `[.., out_dim]`.
    pub fn forward<'t>(&self, cx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        if x.shape().last() != Some(&self.in_dim) {
            return Err(ShapeError::new(format!("projection expects width {}, got {:?}", self.in_dim, x.shape())).into());
        }
        Ok(normalize(self.linear.forward(cx, x)))
    }

    /// Inference-mode projection of `[frames, in_dim]` rows.
    pub fn project(&self, params: &Params, frames: &Tensor) -> Result<AlignedFeature> {
        let tape = Tape::new();
        let cx = Ctx::with_trainable(&tape, params, |_| false);
        let out = self.forward(&cx, tape.constant(frames.clone()))?;
        Ok(AlignedFeature { vectors: (*out.value()).clone() })
    }
}

/// Unit-norm per-frame vectors, `[frames, H_align]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignedFeature {
    pub vectors: Tensor,
}

/// `x / sqrt(‖x‖² + 1e-12)` along the last axis; a zero row stays zero.
pub fn normalize<'t>(x: Var<'t>) -> Var<'t> {
    let last = x.shape().len() - 1;
    x.div(x.square().sum_axis(last).offset(NORM_EPS2).sqrt())
}

/// Mean of `patches` consecutive tokens: `[B, T·patches, d]` → `[B, T, d]`.
pub fn pool_frames<'t>(tokens: Var<'t>, patches: usize) -> Var<'t> {
    let s = tokens.shape();
    let frames = s[1] / patches;
    tokens.reshape(&[s[0] * frames, patches, s[2]]).mean_axis(1).reshape(&[s[0], frames, s[2]])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlignOptions {
    pub temperature: f64,
    /// Adds the motion→video direction and averages both.
    pub symmetric: bool,
    /// Negatives also include motion frames of the other pairs in the batch.
    pub cross_batch: bool,
    /// The printed ratio of raw dot products without exp/log; debugging only.
    pub literal: bool,
}

impl Default for AlignOptions {
    fn default() -> Self {
        Self { temperature: 0.07, symmetric: false, cross_batch: false, literal: false }
    }
}

fn check_map(align_map: &[usize], t: usize, k: usize) -> Result<()> {
    if align_map.len() != t {
        return Err(ShapeError::new(format!("align map has {} entries for {t} video frames", align_map.len())).into());
    }
    if let Some(&bad) = align_map.iter().find(|&&a| a >= k) {
        return Err(Error::Index(format!("align target {bad} outside {k} motion frames")));
    }
    Ok(())
}

/// Batched alignment loss over `[B, T, H]` video and `[B, K, H]` motion
/// vectors. `align_maps[b][i]` is the motion frame paired with video frame i.
pub fn align_loss_batch<'t>(video: Var<'t>, motion: Var<'t>, align_maps: &[Vec<usize>], opts: &AlignOptions) -> Result<Var<'t>> {
    let (vs, ms) = (video.shape(), motion.shape());
    if vs.len() != 3 || ms.len() != 3 || vs[0] != ms[0] || vs[2] != ms[2] || align_maps.len() != vs[0] {
        return Err(ShapeError::new(format!("alignment inputs {vs:?} vs {ms:?}")).into());
    }
    if !(opts.temperature > 0.0) {
        return Err(Error::Config(format!("alignment temperature must be positive, got {}", opts.temperature)));
    }
    let (b, t, k, h) = (vs[0], vs[1], ms[1], vs[2]);
    for m in align_maps {
        check_map(m, t, k)?;
    }
    let tape = video.tape();
    if opts.cross_batch {
        // every video frame against every motion frame of the batch
        let v = video.reshape(&[b * t, h]);
        let m = motion.reshape(&[b * k, h]);
        let sim = v.matmul_t(m, false, true);
        let mut target = Tensor::zeros(&[b * t, b * k]);
        for (bi, map) in align_maps.iter().enumerate() {
            for (i, &a) in map.iter().enumerate() {
                target.data_mut()[(bi * t + i) * b * k + bi * k + a] = 1.0;
            }
        }
        let target = tape.constant(target);
        let fwd = nce(sim, target, opts);
        return Ok(if opts.symmetric { fwd.add(nce(sim.transpose(), target.transpose(), opts)).scale(0.5) } else { fwd });
    }
    let sim = video.matmul_t(motion, false, true);
    let mut target = Tensor::zeros(&[b, t, k]);
    for (bi, map) in align_maps.iter().enumerate() {
        for (i, &a) in map.iter().enumerate() {
            target.data_mut()[(bi * t + i) * k + a] = 1.0;
        }
    }
    let target = tape.constant(target);
    let fwd = nce(sim, target, opts);
    if !opts.symmetric {
        return Ok(fwd);
    }
    // motion→video: only motion frames that are some video frame's partner
    let bwd = nce(sim.transpose(), target.transpose(), opts);
    Ok(fwd.add(bwd).scale(0.5))
}

/// Mean over rows that contain a positive of −log softmax share of the
/// positive. Rows without a positive (possible in the transposed direction)
/// contribute nothing.
fn nce<'t>(sim: Var<'t>, target: Var<'t>, opts: &AlignOptions) -> Var<'t> {
    let last = sim.shape().len() - 1;
    let rows_with_pos = target.value().data().chunks(sim.shape()[last]).filter(|r| r.iter().any(|&x| x > 0.0)).count().max(1);
    // a motion frame may be the partner of several video frames; split the
    // positive mass so each row is one cross-entropy
    let per_row = target.sum_axis(last).offset(1e-300);
    let weights = target.div(per_row);
    if opts.literal {
        let share = sim.mul(weights).sum_axis(last).div(sim.sum_axis(last));
        return share.mul(target.sum_axis(last)).sum().scale(-1.0 / rows_with_pos as f64);
    }
    let lsm = sim.scale(1.0 / opts.temperature).log_softmax();
    lsm.mul(weights).sum().scale(-1.0 / rows_with_pos as f64)
}

/// Single-pair loss over `[T, H]` video and `[K, H]` motion vectors.
pub fn align_loss(video: &Tensor, motion: &Tensor, align_map: &[usize], temperature: f64) -> Result<f64> {
    if video.rank() != 2 || motion.rank() != 2 {
        return Err(ShapeError::new(format!("expected [T, H] and [K, H], got {:?} and {:?}", video.shape(), motion.shape())).into());
    }
    let tape = Tape::new();
    let v = tape.constant(video.reshape(&[1, video.shape()[0], video.shape()[1]])?);
    let m = tape.constant(motion.reshape(&[1, motion.shape()[0], motion.shape()[1]])?);
    let opts = AlignOptions { temperature, ..Default::default() };
    Ok(align_loss_batch(v, m, &[align_map.to_vec()], &opts)?.item())
}
