//! Hypernetwork discriminator over codebook entries, the discriminative and
//! actionable informativeness losses, and the gradient feature linking them.

use humocon_autograd::{Ctx, Linear, Params, ShapeError, Tape, Tensor, Var};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbones::{rec_loss, Decoder, EncoderConfig, Modality};
use crate::error::{Error, Result};

/// Squared-norm guard: the cosine denominator is `sqrt(‖x‖² + 1e-16)`, i.e. a
/// norm floor of about 1e-8.
const NORM_EPS2: f64 = 1e-16;
const LOG_EPS: f64 = 1e-8;
/// Floor inside the log-score whose gradient feeds the velocity decoder; small
/// enough not to bias the gradient measurably.
const GRAD_LOG_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperConfig {
    pub k_parts: usize,
    pub base_hidden: usize,
    pub generator_hidden: usize,
}

impl Default for HyperConfig {
    fn default() -> Self {
        Self { k_parts: 4, base_hidden: 32, generator_hidden: 32 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DisMode {
    /// Softmax over all scored codes, cross-entropy against the assigned code.
    Multiclass,
    /// Independent BCE per code, summed over codes.
    Binary,
}

/// Scores (code, state) pairs. The first `k_parts − 1` chunks of a code each
/// generate one layer of a small network applied on top of a shared base
/// network; the output is compared with the last chunk by cosine similarity.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HyperDiscriminator {
    pub code_dim: usize,
    pub k_parts: usize,
    chunk: usize,
    base: Vec<Linear>,
    generators: Vec<(Linear, Linear)>,
}

impl HyperDiscriminator {
    pub fn new(params: &mut Params, name: &str, code_dim: usize, cfg: &HyperConfig, rng: &mut impl Rng) -> Result<Self> {
        if cfg.k_parts < 2 || code_dim % cfg.k_parts != 0 {
            return Err(Error::Config(format!("code dim {code_dim} not divisible into {} chunks", cfg.k_parts)));
        }
        let c = code_dim / cfg.k_parts;
        let h = cfg.base_hidden;
        let base = vec![
            Linear::new(params, &format!("{name}.base0"), code_dim, h, rng),
            Linear::new(params, &format!("{name}.base1"), h, h, rng),
            Linear::new(params, &format!("{name}.base2"), h, c, rng),
        ];
        let generators = (0..cfg.k_parts - 1)
            .map(|j| {
                (
                    Linear::new(params, &format!("{name}.gen{j}.0"), c, cfg.generator_hidden, rng),
                    Linear::new(params, &format!("{name}.gen{j}.1"), cfg.generator_hidden, c * c + c, rng),
                )
            })
            .collect();
        Ok(Self { code_dim, k_parts: cfg.k_parts, chunk: c, base, generators })
    }

    /// Generated-network output for every code and state: `[N, M, c]`, plus the
    /// last code chunks `[N, 1, c]`.
    pub fn net_out<'t>(&self, cx: &Ctx<'t>, codes: Var<'t>, states: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        self.check(codes, states)?;
        let (n, m) = (codes.shape()[0], states.shape()[0]);
        let x = self.base_out(cx, states).reshape(&[1, m, self.chunk]).broadcast_to(&[n, m, self.chunk]);
        Ok(self.generated(cx, codes, x))
    }

    /// Row `i` of `codes` against row `i` of `states` only: `[M, 1, c]` outputs
    /// and `[M, 1, c]` last chunks.
    pub fn net_out_paired<'t>(&self, cx: &Ctx<'t>, codes: Var<'t>, states: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        self.check(codes, states)?;
        let m = states.shape()[0];
        if codes.shape()[0] != m {
            return Err(ShapeError::new(format!("paired scoring needs one code per state, got {} and {m}", codes.shape()[0])).into());
        }
        let x = self.base_out(cx, states).reshape(&[m, 1, self.chunk]);
        Ok(self.generated(cx, codes, x))
    }

    fn check(&self, codes: Var<'_>, states: Var<'_>) -> Result<()> {
        let (cs, ss) = (codes.shape(), states.shape());
        if cs.len() != 2 || ss.len() != 2 || cs[1] != self.code_dim || ss[1] != self.code_dim {
            return Err(ShapeError::new(format!("discriminator expects [N, {0}] codes and [M, {0}] states, got {cs:?} and {ss:?}", self.code_dim)).into());
        }
        Ok(())
    }

    fn base_out<'t>(&self, cx: &Ctx<'t>, states: Var<'t>) -> Var<'t> {
        let mut x = states;
        for (i, l) in self.base.iter().enumerate() {
            x = l.forward(cx, x);
            if i + 1 < self.base.len() {
                x = x.tanh();
            }
        }
        x
    }

    /// Runs `x` (`[N, ·, c]`) through the layers generated from each code's chunks.
    fn generated<'t>(&self, cx: &Ctx<'t>, codes: Var<'t>, mut x: Var<'t>) -> (Var<'t>, Var<'t>) {
        let (n, c) = (codes.shape()[0], self.chunk);
        for (j, (g0, g1)) in self.generators.iter().enumerate() {
            let chunk = codes.narrow(1, j * c, c);
            let gen = g1.forward(cx, g0.forward(cx, chunk).tanh());
            let w = gen.narrow(1, 0, c * c).reshape(&[n, c, c]);
            let b = gen.narrow(1, c * c, c).reshape(&[n, 1, c]);
            x = x.matmul(w).add(b);
            if j + 1 < self.generators.len() {
                x = x.tanh();
            }
        }
        let last = codes.narrow(1, (self.k_parts - 1) * c, c).reshape(&[n, 1, c]);
        (x, last)
    }

    /// Cosine similarity for every state against every code, `[M, N]`.
    pub fn cosine<'t>(&self, cx: &Ctx<'t>, codes: Var<'t>, states: Var<'t>) -> Result<Var<'t>> {
        let (out, last) = self.net_out(cx, codes, states)?;
        let (n, m) = (out.shape()[0], out.shape()[1]);
        Ok(cosine_last_axis(out, last).reshape(&[n, m]).transpose())
    }

    /// Probability in [0, 1] for one code against one state, in inference mode.
    pub fn score(&self, params: &Params, code: &[f64], state: &[f64]) -> Result<f64> {
        let tape = Tape::new();
        let cx = Ctx::with_trainable(&tape, params, |_| false);
        let codes = tape.constant(Tensor::from_vec(&[1, code.len()], code.to_vec()));
        let states = tape.constant(Tensor::from_vec(&[1, state.len()], state.to_vec()));
        Ok(cosine_to_prob(self.cosine(&cx, codes, states)?).item())
    }

    pub fn grad_feature<'t>(
        &self,
        cx: &Ctx<'t>,
        codes: Var<'t>,
        states: Var<'t>,
        assigned: &[usize],
        second_order: bool,
    ) -> Result<GradFeature<'t>> {
        let (n, d) = (codes.shape()[0], self.code_dim);
        if let Some(&k) = assigned.iter().find(|&&k| k >= n) {
            return Err(Error::Index(format!("assigned code {k} outside {n} scored codes")));
        }
        if assigned.len() != states.shape()[0] {
            return Err(ShapeError::new(format!("{} assigned indices for {} states", assigned.len(), states.shape()[0])).into());
        }
        let states = if states.requires_grad() { states } else { states.tape().var((*states.value()).clone()) };
        // only the assigned code's score enters the feature, so score each state
        // against that code alone
        let cv = codes.value();
        let mut picked = Vec::with_capacity(assigned.len() * d);
        for &k in assigned {
            picked.extend_from_slice(&cv.data()[k * d..(k + 1) * d]);
        }
        let picked = cx.tape.constant(Tensor::from_vec(&[assigned.len(), d], picked));
        let (out, last) = self.net_out_paired(cx, picked, states)?;
        let cos = cosine_last_axis(out, last).reshape(&[assigned.len(), 1]);
        Ok(GradFeature { g: grad_of_log_score(states, cosine_to_prob(cos), second_order) })
    }
}

/// Cosine along the last axis, with broadcasting between the operands.
pub fn cosine_last_axis<'t>(a: Var<'t>, b: Var<'t>) -> Var<'t> {
    let last = a.shape().len() - 1;
    let dot = a.mul(b).sum_axis(last);
    let na = a.square().sum_axis(last).offset(NORM_EPS2).sqrt();
    let nb = b.square().sum_axis(last).offset(NORM_EPS2).sqrt();
    dot.div(na.mul(nb))
}

/// `s = (cos + 1) / 2`.
pub fn cosine_to_prob<'t>(cos: Var<'t>) -> Var<'t> {
    cos.offset(1.0).scale(0.5)
}

fn one_hot<'t>(tape: &'t Tape, assigned: &[usize], n: usize) -> Result<Var<'t>> {
    let mut t = Tensor::zeros(&[assigned.len(), n]);
    for (i, &k) in assigned.iter().enumerate() {
        if k >= n {
            return Err(Error::Index(format!("assigned code {k} outside {n} scored codes")));
        }
        t.data_mut()[i * n + k] = 1.0;
    }
    Ok(tape.constant(t))
}

/// Discriminative loss from a `[M, N]` cosine matrix, averaged over tokens.
pub fn dis_loss<'t>(cosine: Var<'t>, assigned: &[usize], mode: DisMode, tau: f64) -> Result<Var<'t>> {
    let s = cosine.shape();
    if s.len() != 2 || s[0] != assigned.len() {
        return Err(ShapeError::new(format!("cosine {s:?} vs {} assigned indices", assigned.len())).into());
    }
    if !(tau > 0.0) {
        return Err(Error::Config(format!("tau_dis must be positive, got {tau}")));
    }
    let hot = one_hot(cosine.tape(), assigned, s[1])?;
    let m = s[0] as f64;
    Ok(match mode {
        DisMode::Multiclass => cosine.scale(1.0 / tau).log_softmax().mul(hot).sum().scale(-1.0 / m),
        DisMode::Binary => {
            let p = cosine_to_prob(cosine);
            // ln((x + ε) / (1 + ε)) stays ≤ 0, so the loss is ≥ 0
            let norm = 1.0 / (1.0 + LOG_EPS);
            let pos = p.offset(LOG_EPS).scale(norm).ln().mul(hot);
            let neg = p.neg().offset(1.0 + LOG_EPS).scale(norm).ln().mul(hot.neg().offset(1.0));
            pos.add(neg).sum().scale(-1.0 / m)
        }
    })
}

/// Codes scored when negatives are subsampled: every assigned code plus up to
/// `negatives` others drawn uniformly. Returns the sorted subset and the
/// assigned indices remapped into it.
pub fn subsample_codes(n: usize, assigned: &[usize], negatives: usize, rng: &mut impl Rng) -> (Vec<usize>, Vec<usize>) {
    let mut used = vec![false; n];
    assigned.iter().for_each(|&k| used[k] = true);
    let others: Vec<usize> = (0..n).filter(|&k| !used[k]).collect();
    for i in sample(rng, others.len(), negatives.min(others.len())) {
        used[others[i]] = true;
    }
    let subset: Vec<usize> = (0..n).filter(|&k| used[k]).collect();
    let mut pos = vec![0; n];
    subset.iter().enumerate().for_each(|(i, &k)| pos[k] = i);
    (subset, assigned.iter().map(|&k| pos[k]).collect())
}

/// Gradient of `Σ ln(s + 1e-12)` with respect to the states.
#[derive(Clone, Copy, Debug)]
pub struct GradFeature<'t> {
    pub g: Var<'t>,
}

/// `∂ Σᵢ ln sᵢ / ∂ states`. With `second_order` the result stays on the graph;
/// otherwise it is a constant.
pub fn grad_of_log_score<'t>(states: Var<'t>, scores: Var<'t>, second_order: bool) -> Var<'t> {
    let objective = scores.offset(GRAD_LOG_EPS).ln().sum();
    let g = states.tape().grad(objective, &[states], second_order)[0];
    if second_order {
        g
    } else {
        g.detach()
    }
}

/// Verifies at startup that gradients can be differentiated again, by
/// comparing d/dx (d/dx x³) against 6x.
pub fn probe_second_order() -> Result<()> {
    let tape = Tape::new();
    let x = tape.var(Tensor::from_vec(&[2], vec![0.7, -1.3]));
    let y = x.mul(x).mul(x).sum();
    let g = tape.grad(y, &[x], true)[0];
    if !g.requires_grad() {
        return Err(Error::Capability("first-order gradient is detached from the graph".into()));
    }
    let h = tape.grad(g.sum(), &[x], false)[0];
    let want = [4.2, -7.8];
    let ok = h.value().data().iter().zip(want).all(|(a, b)| (a - b).abs() < 1e-12);
    if !ok {
        return Err(Error::Capability(format!("second derivative probe returned {:?}", h.value().data())));
    }
    Ok(())
}

/// Predicts per-token velocity from the raw state token and its gradient
/// feature. For video, the state token is the pixel patch and the gradient
/// feature is appended once per patch: a patch-sized convolution over the
/// per-pixel broadcast of g reduces to exactly this linear map.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VelocityDecoder {
    pub modality: Modality,
    /// Channels of the state per position: pose width, or pixel channels.
    pub state_channels: usize,
    pub code_dim: usize,
    pub out_dim: usize,
    token_state_dim: usize,
    decoder: Decoder,
}

impl VelocityDecoder {
    pub fn new(params: &mut Params, name: &str, cfg: &EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        let (state_channels, out_dim) = match cfg.modality {
            Modality::Motion => (cfg.input_dim, cfg.input_dim),
            Modality::Video => (cfg.channels, cfg.patch_size * cfg.patch_size * 2),
        };
        let token_state_dim = cfg.token_input_dim();
        let decoder = Decoder::new(params, name, cfg, token_state_dim + cfg.code_dim, out_dim, rng)?;
        let v = Self { modality: cfg.modality, state_channels, code_dim: cfg.code_dim, out_dim, token_state_dim, decoder };
        assert_eq!(v.decoder.in_dim, v.token_state_dim + v.code_dim);
        Ok(v)
    }

    /// Per-position input channels, state plus gradient feature.
    pub fn input_channels(&self) -> usize {
        self.state_channels + self.code_dim
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t>, states: Var<'t>, g: Var<'t>) -> Result<Var<'t>> {
        let (ss, gs) = (states.shape(), g.shape());
        if ss.len() != 3 || gs.len() != 3 || ss[..2] != gs[..2] || ss[2] != self.token_state_dim || gs[2] != self.code_dim {
            return Err(ShapeError::new(format!("velocity decoder inputs {ss:?} and {gs:?}")).into());
        }
        self.decoder.forward(cx, Var::concat(&[states, g], 2))
    }
}

/// Mean squared error between decoded velocity and its target.
pub fn act_loss<'t>(
    cx: &Ctx<'t>,
    decoder: &VelocityDecoder,
    states: Var<'t>,
    g: Var<'t>,
    target: Var<'t>,
) -> Result<Var<'t>> {
    rec_loss(target, decoder.forward(cx, states, g)?)
}

/// Informativeness terms of one modality branch.
#[derive(Clone, Copy, Debug)]
pub struct BranchInfo<'t> {
    pub dis: Option<Var<'t>>,
    pub act: Option<Var<'t>>,
}

/// Sums present per-modality terms. A term absent from both branches stays
/// absent.
#[derive(Clone, Copy, Debug)]
pub struct Informativeness<'t> {
    pub dis: Option<Var<'t>>,
    pub act: Option<Var<'t>>,
}

pub fn combined_informativeness<'t>(motion: Option<BranchInfo<'t>>, video: Option<BranchInfo<'t>>) -> Informativeness<'t> {
    let sum = |a: Option<Var<'t>>, b: Option<Var<'t>>| match (a, b) {
        (Some(a), Some(b)) => Some(a.add(b)),
        (a, b) => a.or(b),
    };
    let (m, v) = (motion.unwrap_or(BranchInfo { dis: None, act: None }), video.unwrap_or(BranchInfo { dis: None, act: None }));
    Informativeness { dis: sum(m.dis, v.dis), act: sum(m.act, v.act) }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cosine_probability_extremes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::from_vec(&[3], vec![1.0, 2.0, -1.0]));
        for (b, want) in [(a.scale(3.0), 1.0), (a.scale(-0.5), 0.0)] {
            assert!((cosine_to_prob(cosine_last_axis(a, b)).item() - want).abs() < 1e-12);
        }
        let o = tape.constant(Tensor::from_vec(&[3], vec![2.0, -1.0, 0.0]));
        assert!((cosine_to_prob(cosine_last_axis(a, o)).item() - 0.5).abs() < 1e-12);
        let z = tape.constant(Tensor::zeros(&[3]));
        assert_eq!(cosine_last_axis(a, z).item(), 0.0);
    }

    #[test]
    fn dis_loss_toy_and_uniform() {
        let tape = Tape::new();
        let cos = tape.constant(Tensor::from_vec(&[1, 2], vec![0.5, -0.5]));
        let l = dis_loss(cos, &[0], DisMode::Multiclass, 1.0).unwrap().item();
        let oracle = -(0.5f64.exp() / (0.5f64.exp() + (-0.5f64).exp())).ln();
        assert!((l - oracle).abs() < 1e-12);
        assert!((l - 0.3133).abs() < 1e-4);
        let flat = tape.constant(Tensor::full(&[5, 64], 0.3));
        let l = dis_loss(flat, &[0, 5, 9, 63, 1], DisMode::Multiclass, 0.1).unwrap().item();
        assert!((l - 64f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn dis_loss_sharp_limit() {
        let tape = Tape::new();
        let cos = tape.constant(Tensor::from_vec(&[2, 3], vec![1.0, -1.0, -1.0, -1.0, -1.0, 1.0]));
        let l = dis_loss(cos, &[0, 2], DisMode::Multiclass, 1e-2).unwrap().item();
        assert!(l >= 0.0 && l < 1e-80);
        let b = dis_loss(cos, &[0, 2], DisMode::Binary, 1.0).unwrap().item();
        assert!(b >= 0.0 && b < 1e-6);
    }

    #[test]
    fn scalar_sigmoid_gradient_feature() {
        let tape = Tape::new();
        let w = [0.3, -1.2, 0.8, 0.05];
        let f = tape.var(Tensor::from_vec(&[1, 4], vec![0.4, 0.1, -0.7, 2.0]));
        let wv = tape.constant(Tensor::from_vec(&[4, 1], w.to_vec()));
        let s = f.matmul(wv).sigmoid();
        let g = grad_of_log_score(f, s, false);
        let sv = s.item();
        for (gi, wi) in g.value().data().iter().zip(w) {
            assert!((gi - (1.0 - sv) * wi).abs() < 1e-10);
        }
    }

    #[test]
    fn constant_score_has_zero_gradient_feature() {
        let tape = Tape::new();
        let f = tape.var(Tensor::from_vec(&[2, 4], vec![0.1; 8]));
        let s = tape.constant(Tensor::from_vec(&[2, 1], vec![0.3, 0.9]));
        assert!(grad_of_log_score(f, s, true).value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn probe_passes() {
        probe_second_order().unwrap();
    }

    #[test]
    fn velocity_decoder_full_scale_dims() {
        let mut params = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = EncoderConfig::full_scale_motion(4);
        m.decoder_layers = 0;
        m.stem_dim = 4;
        m.decoder_hidden_dim = 8;
        m.decoder_heads = 1;
        assert_eq!(VelocityDecoder::new(&mut params, "m", &m, &mut rng).unwrap().input_channels(), 391);
        let mut v = EncoderConfig::full_scale_video(1);
        v.decoder_layers = 0;
        v.decoder_hidden_dim = 4;
        v.decoder_heads = 1;
        v.code_dim = 768;
        assert_eq!(VelocityDecoder::new(&mut params, "v", &v, &mut rng).unwrap().input_channels(), 771);
    }

    #[test]
    fn subsample_keeps_assigned() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (subset, remap) = subsample_codes(64, &[5, 40, 5], 7, &mut rng);
        assert_eq!(subset.len(), 9);
        assert_eq!(subset[remap[0]], 5);
        assert_eq!(subset[remap[1]], 40);
    }

    #[test]
    fn combined_keeps_absent_terms_absent() {
        let tape = Tape::new();
        let one = tape.scalar(1.0);
        let r = combined_informativeness(Some(BranchInfo { dis: Some(one), act: None }), None);
        assert_eq!(r.dis.unwrap().item(), 1.0);
        assert!(r.act.is_none());
        let r = combined_informativeness(Some(BranchInfo { dis: Some(one), act: Some(one) }), Some(BranchInfo { dis: Some(one), act: Some(one) }));
        assert_eq!((r.dis.unwrap().item(), r.act.unwrap().item()), (2.0, 2.0));
    }
}
