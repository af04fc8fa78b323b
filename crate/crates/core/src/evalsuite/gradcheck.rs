//! Central-difference checks of analytic gradients on small randomly
//! initialised instances of each differentiable path.

use std::collections::HashMap;

use humocon_autograd::{Ctx, Linear, ParamId, Params, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::oracles::relative_error;
use crate::backbones::{apply_mask, rec_loss, Decoder, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::infolosses::{act_loss, dis_loss, DisMode, HyperConfig, HyperDiscriminator, VelocityDecoder};
use crate::quantizer::{quantize, Codebook};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FdSelector {
    Linear,
    /// Discriminative loss through the hypernetwork scores.
    DiscriminatorScore,
    /// Actionable loss, whose gradient passes through the gradient feature.
    SecondOrderAct,
    /// Encoder, masking and decoder, without quantisation.
    RecLoss,
    /// Gradient at the features equals the gradient at the quantised values.
    StraightThrough,
}

impl FdSelector {
    pub const ALL: [FdSelector; 5] =
        [Self::Linear, Self::DiscriminatorScore, Self::SecondOrderAct, Self::RecLoss, Self::StraightThrough];

    pub fn name(self) -> &'static str {
        match self {
            Self::Linear => "linear",
            Self::DiscriminatorScore => "discriminator-score",
            Self::SecondOrderAct => "second-order-act",
            Self::RecLoss => "rec-loss",
            Self::StraightThrough => "straight-through",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|x| x.name() == s)
    }

    pub fn default_tolerance(self) -> f64 {
        match self {
            Self::Linear => 1e-8,
            Self::DiscriminatorScore => 1e-4,
            Self::SecondOrderAct => 1e-3,
            Self::RecLoss => 1e-6,
            Self::StraightThrough => 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FdReport {
    pub selector: FdSelector,
    /// Norm-wise relative error between analytic and numerical gradients over
    /// the sampled coordinates.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub tolerance: f64,
    pub coordinates: usize,
    pub passed: bool,
}

const STEP: f64 = 1e-5;
const COORDS_PER_TENSOR: usize = 6;

type LossFn<'a> = dyn for<'t> Fn(&Ctx<'t>) -> Result<Var<'t>> + 'a;

/// Compares analytic gradients of `loss` against central differences at a
/// few random coordinates of every tensor in `ids`.
fn compare(params: &Params, ids: &[ParamId], loss: &LossFn<'_>, rng: &mut ChaCha8Rng) -> Result<(f64, f64, usize)> {
    let tape = Tape::new();
    let cx = Ctx::new(&tape, params);
    let l = loss(&cx)?;
    let grads: HashMap<ParamId, Tensor> = cx.gradients(l).into_iter().collect();
    let value = |p: &Params| -> Result<f64> {
        let tape = Tape::new();
        let cx = Ctx::with_trainable(&tape, p, |_| false);
        Ok(loss(&cx)?.item())
    };
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    let mut probe = params.clone();
    for &id in ids {
        let n = params.get(id).numel();
        for _ in 0..COORDS_PER_TENSOR.min(n) {
            let i = rng.gen_range(0..n);
            let x = params.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = x + STEP;
            let up = value(&probe)?;
            probe.get_mut(id).data_mut()[i] = x - STEP;
            let down = value(&probe)?;
            probe.get_mut(id).data_mut()[i] = x;
            numeric.push((up - down) / (2.0 * STEP));
            analytic.push(grads.get(&id).map_or(0.0, |g| g.data()[i]));
        }
    }
    let abs = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Ok((relative_error(&analytic, &numeric), abs, analytic.len()))
}

fn tiny_motion_config() -> EncoderConfig {
    EncoderConfig {
        seq_len: 3,
        stem_dim: 8,
        hidden_dim: 8,
        code_dim: 8,
        num_layers: 1,
        num_heads: 2,
        ff_dim: 16,
        decoder_hidden_dim: 8,
        decoder_layers: 1,
        decoder_heads: 2,
        ..EncoderConfig::desk_motion(3, 3)
    }
}

fn random_tensor(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect())
}

/// Runs the check for one path. `tolerance` defaults to the selector's own.
pub fn finite_diff_check(selector: FdSelector, tolerance: Option<f64>, seed: u64) -> Result<FdReport> {
    let tol = tolerance.unwrap_or(selector.default_tolerance());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Params::new();
    let (rel, abs, coords) = match selector {
        FdSelector::Linear => {
            let lin = Linear::new(&mut params, "lin", 4, 3, &mut rng);
            let x = random_tensor(&[5, 4], 1.0, &mut rng);
            let r = random_tensor(&[5, 3], 1.0, &mut rng);
            let ids: Vec<ParamId> = params.ids().collect();
            compare(&params, &ids, &|cx| Ok(lin.forward(cx, cx.tape.constant(x.clone())).mul(cx.tape.constant(r.clone())).sum()), &mut rng)?
        }
        FdSelector::DiscriminatorScore => {
            let d = 8;
            let hyper = HyperDiscriminator::new(&mut params, "hyper", d, &HyperConfig::default(), &mut rng)?;
            let states = params.add("states", random_tensor(&[6, d], 1.0, &mut rng));
            let codes = random_tensor(&[5, d], 1.0, &mut rng);
            let assigned = vec![0, 3, 1, 4, 2, 3];
            let ids: Vec<ParamId> = params.ids().collect();
            compare(
                &params,
                &ids,
                &|cx| {
                    let cos = hyper.cosine(cx, cx.tape.constant(codes.clone()), cx.p(states))?;
                    dis_loss(cos, &assigned, DisMode::Multiclass, 0.5)
                },
                &mut rng,
            )?
        }
        FdSelector::SecondOrderAct => {
            let cfg = tiny_motion_config();
            let (b, l, d) = (2, cfg.seq_len, cfg.code_dim);
            let hyper = HyperDiscriminator::new(&mut params, "hyper", d, &HyperConfig::default(), &mut rng)?;
            let velocity = VelocityDecoder::new(&mut params, "velocity", &cfg, &mut rng)?;
            let states = params.add("states", random_tensor(&[b * l, d], 1.0, &mut rng));
            let codes = random_tensor(&[4, d], 1.0, &mut rng);
            let tokens = random_tensor(&[b, l, cfg.input_dim], 1.0, &mut rng);
            let target = random_tensor(&[b, l, cfg.input_dim], 0.5, &mut rng);
            let assigned = vec![1, 0, 3, 2, 1, 3];
            // the hypernetwork only reaches this loss through the gradient
            // feature, so its coordinates exercise the second-order path
            let ids: Vec<ParamId> = params.ids().filter(|&id| !params.name(id).starts_with("velocity")).collect();
            compare(
                &params,
                &ids,
                &|cx| {
                    let g = hyper.grad_feature(cx, cx.tape.constant(codes.clone()), cx.p(states), &assigned, true)?;
                    let tape = cx.tape;
                    act_loss(cx, &velocity, tape.constant(tokens.clone()), g.g.reshape(&[b, l, d]), tape.constant(target.clone()))
                },
                &mut rng,
            )?
        }
        FdSelector::RecLoss => {
            let cfg = tiny_motion_config();
            let encoder = Encoder::new(&mut params, "enc", &cfg, &mut rng)?;
            let decoder = Decoder::new(&mut params, "dec", &cfg, cfg.code_dim, cfg.input_dim, &mut rng)?;
            let token = params.add("mask_token", random_tensor(&[cfg.code_dim], 0.5, &mut rng));
            let x = random_tensor(&[2, cfg.seq_len, cfg.input_dim], 1.0, &mut rng);
            let mask = vec![true, false, true, false, false, true];
            let ids: Vec<ParamId> = params.ids().collect();
            compare(
                &params,
                &ids,
                &|cx| {
                    let xv = cx.tape.constant(x.clone());
                    let f = encoder.forward(cx, xv)?;
                    rec_loss(xv, decoder.forward(cx, apply_mask(f, &mask, cx.p(token)))?)
                },
                &mut rng,
            )?
        }
        FdSelector::StraightThrough => straight_through_gap(&mut rng)?,
    };
    if !rel.is_finite() {
        return Err(Error::Domain(format!("{} check produced a non-finite error", selector.name())));
    }
    let passed = if selector == FdSelector::StraightThrough { abs <= tol } else { rel < tol };
    Ok(FdReport { selector, max_rel_error: rel, max_abs_error: abs, tolerance: tol, coordinates: coords, passed })
}

/// `∂L/∂F` against `∂L/∂D` for `D` the straight-through quantisation of `F`.
fn straight_through_gap(rng: &mut ChaCha8Rng) -> Result<(f64, f64, usize)> {
    let (m, d, n) = (12, 4, 5);
    let codebook = Codebook::from_codes(random_tensor(&[n, d], 1.0, rng), 0.99, 1e-5)?;
    let tape = Tape::new();
    let f = tape.var(random_tensor(&[m, d], 1.0, rng));
    let q = quantize(&f.value(), &codebook)?;
    let dq = q.straight_through(f);
    let r = tape.constant(random_tensor(&[m, d], 1.0, rng));
    let loss = dq.tanh().mul(r).sum();
    let g = tape.grad(loss, &[f, dq], false);
    let (gf, gd) = (g[0].value(), g[1].value());
    let abs = gf.max_abs_diff(&gd);
    Ok((relative_error(gf.data(), gd.data()), abs, gf.numel()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_path_passes_its_tolerance() {
        for s in FdSelector::ALL {
            let r = finite_diff_check(s, None, 11).unwrap();
            assert!(r.passed, "{r:?}");
        }
    }

    #[test]
    fn selector_names_round_trip() {
        for s in FdSelector::ALL {
            assert_eq!(FdSelector::parse(s.name()), Some(s));
        }
    }
}
