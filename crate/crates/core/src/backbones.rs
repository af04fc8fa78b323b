//! Motion and video encoders, the masking operator, reconstruction decoders
//! and the reconstruction loss.

use humocon_autograd::{Ctx, LayerNorm, Linear, ParamId, Params, ShapeError, Tape, Tensor, TransformerLayer, Var};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantizer::QuantizedFeatures;
use crate::synthkit::{MotionSequence, VideoClip};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Motion,
    Video,
}

impl Modality {
    pub fn name(self) -> &'static str {
        match self {
            Modality::Motion => "motion",
            Modality::Video => "video",
        }
    }
}

/// Shape of one modality branch: encoder, and the decoders that read its codes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub modality: Modality,
    /// Per-frame motion feature width (motion only).
    pub input_dim: usize,
    /// Video patch side (video only).
    pub patch_size: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Motion frames K, or video key frames T.
    pub seq_len: usize,
    pub stem_dim: usize,
    pub hidden_dim: usize,
    pub code_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub decoder_hidden_dim: usize,
    pub decoder_layers: usize,
    pub decoder_heads: usize,
}

impl EncoderConfig {
    pub fn desk_motion(input_dim: usize, seq_len: usize) -> Self {
        Self {
            modality: Modality::Motion,
            input_dim,
            patch_size: 0,
            channels: 0,
            height: 0,
            width: 0,
            seq_len,
            stem_dim: 64,
            hidden_dim: 64,
            code_dim: 32,
            num_layers: 2,
            num_heads: 4,
            ff_dim: 128,
            decoder_hidden_dim: 64,
            decoder_layers: 2,
            decoder_heads: 4,
        }
    }

    pub fn desk_video(frames: usize, height: usize, width: usize) -> Self {
        Self {
            modality: Modality::Video,
            input_dim: 0,
            patch_size: 16,
            channels: 3,
            height,
            width,
            seq_len: frames,
            stem_dim: 64,
            hidden_dim: 64,
            code_dim: 32,
            num_layers: 2,
            num_heads: 4,
            ff_dim: 128,
            decoder_hidden_dim: 64,
            decoder_layers: 2,
            decoder_heads: 4,
        }
    }

    /// Linear(263, 256) → ReLU → Linear(256, 512) → 4 × Transformer(512, 8 heads)
    /// → Linear(512, 256) → ReLU → Linear(256, 128).
    pub fn full_scale_motion(seq_len: usize) -> Self {
        Self {
            modality: Modality::Motion,
            input_dim: 263,
            patch_size: 0,
            channels: 0,
            height: 0,
            width: 0,
            seq_len,
            stem_dim: 256,
            hidden_dim: 512,
            code_dim: 128,
            num_layers: 4,
            num_heads: 8,
            ff_dim: 2048,
            decoder_hidden_dim: 512,
            decoder_layers: 4,
            decoder_heads: 8,
        }
    }

    /// 16×16 patch embedding into 768 channels, 12 transformer layers, 384-wide
    /// 10-layer causal decoder.
    pub fn full_scale_video(frames: usize) -> Self {
        Self {
            modality: Modality::Video,
            input_dim: 0,
            patch_size: 16,
            channels: 3,
            height: 256,
            width: 320,
            seq_len: frames,
            stem_dim: 768,
            hidden_dim: 768,
            code_dim: 768,
            num_layers: 12,
            num_heads: 12,
            ff_dim: 3072,
            decoder_hidden_dim: 384,
            decoder_layers: 10,
            decoder_heads: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.hidden_dim % self.num_heads.max(1) != 0 || self.num_heads == 0 {
            return fail(format!("hidden_dim {} not divisible by {} heads", self.hidden_dim, self.num_heads));
        }
        if self.decoder_heads == 0 || self.decoder_hidden_dim % self.decoder_heads != 0 {
            return fail("decoder_hidden_dim must be divisible by decoder_heads".into());
        }
        if self.code_dim == 0 || self.seq_len == 0 {
            return fail("code_dim and seq_len must be positive".into());
        }
        if self.modality == Modality::Video {
            let p = self.patch_size;
            if p == 0 || self.height % p != 0 || self.width % p != 0 {
                return fail(format!("patch size {p} must divide {}x{}", self.height, self.width));
            }
        } else if self.input_dim == 0 {
            return fail("motion input_dim must be positive".into());
        }
        Ok(())
    }

    pub fn patches_per_frame(&self) -> usize {
        match self.modality {
            Modality::Motion => 1,
            Modality::Video => (self.height / self.patch_size) * (self.width / self.patch_size),
        }
    }

    /// K for motion, T·(H/p)·(W/p) for video.
    pub fn tokens(&self) -> usize {
        self.seq_len * self.patches_per_frame()
    }

    /// Width of one raw input token: pose features, or p·p·C patch pixels.
    pub fn token_input_dim(&self) -> usize {
        match self.modality {
            Modality::Motion => self.input_dim,
            Modality::Video => self.patch_size * self.patch_size * self.channels,
        }
    }
}

/// Learned positions, per token (motion) or per frame plus per patch (video).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum Positional {
    Sequence(ParamId),
    FramePatch { frame: ParamId, patch: ParamId, frames: usize, patches: usize },
}

impl Positional {
    pub fn new(params: &mut Params, name: &str, cfg: &EncoderConfig, dim: usize, rng: &mut impl Rng) -> Self {
        match cfg.modality {
            Modality::Motion => Positional::Sequence(params.add_uniform(format!("{name}.pos"), &[cfg.seq_len, dim], 0.1, rng)),
            Modality::Video => Positional::FramePatch {
                frame: params.add_uniform(format!("{name}.frame_pos"), &[cfg.seq_len, 1, dim], 0.1, rng),
                patch: params.add_uniform(format!("{name}.patch_pos"), &[1, cfg.patches_per_frame(), dim], 0.1, rng),
                frames: cfg.seq_len,
                patches: cfg.patches_per_frame(),
            },
        }
    }

    /// `[tokens, dim]` table.
    pub fn table<'t>(&self, cx: &Ctx<'t>) -> Var<'t> {
        match *self {
            Positional::Sequence(p) => cx.p(p),
            Positional::FramePatch { frame, patch, frames, patches } => {
                let t = cx.p(frame).add(cx.p(patch));
                let dim = t.shape()[2];
                t.reshape(&[frames * patches, dim])
            }
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Encoder {
    pub config: EncoderConfig,
    stem: Vec<Linear>,
    pos: Positional,
    layers: Vec<TransformerLayer>,
    norm: Option<LayerNorm>,
    head: Vec<Linear>,
}

impl Encoder {
    pub fn new(params: &mut Params, name: &str, cfg: &EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let h = cfg.hidden_dim;
        let (stem, norm, head) = match cfg.modality {
            Modality::Motion => (
                vec![
                    Linear::new(params, &format!("{name}.stem0"), cfg.input_dim, cfg.stem_dim, rng),
                    Linear::new(params, &format!("{name}.stem1"), cfg.stem_dim, h, rng),
                ],
                None,
                vec![
                    Linear::new(params, &format!("{name}.head0"), h, cfg.stem_dim, rng),
                    Linear::new(params, &format!("{name}.head1"), cfg.stem_dim, cfg.code_dim, rng),
                ],
            ),
            Modality::Video => (
                vec![Linear::new(params, &format!("{name}.patch_embed"), cfg.token_input_dim(), h, rng)],
                Some(LayerNorm::new(params, &format!("{name}.norm"), h)),
                vec![Linear::new(params, &format!("{name}.head"), h, cfg.code_dim, rng)],
            ),
        };
        let pos = Positional::new(params, name, cfg, h, rng);
        let layers = (0..cfg.num_layers)
            .map(|i| TransformerLayer::new(params, &format!("{name}.layer{i}"), h, cfg.num_heads, cfg.ff_dim, false, rng))
            .collect();
        Ok(Self { config: cfg.clone(), stem, pos, layers, norm, head })
    }

    /// `[B, tokens, token_input_dim]` → `[B, tokens, code_dim]`.
    pub fn forward<'t>(&self, cx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let s = x.shape();
        if s.len() != 3 || s[1] != self.config.tokens() || s[2] != self.config.token_input_dim() {
            return Err(ShapeError::new(format!(
                "{} encoder expects [B, {}, {}], got {:?}",
                self.config.modality.name(),
                self.config.tokens(),
                self.config.token_input_dim(),
                s
            ))
            .into());
        }
        let mut h = x;
        for (i, l) in self.stem.iter().enumerate() {
            h = l.forward(cx, h);
            if i + 1 < self.stem.len() {
                h = h.relu();
            }
        }
        h = h.add(self.pos.table(cx));
        for layer in &self.layers {
            h = layer.forward(cx, h);
        }
        if let Some(norm) = &self.norm {
            h = norm.forward(cx, h);
        }
        for (i, l) in self.head.iter().enumerate() {
            h = l.forward(cx, h);
            if i + 1 < self.head.len() {
                h = h.relu();
            }
        }
        Ok(h)
    }

    /// Inference-mode encoding of one item; input as produced by [`motion_tokens`]
    /// or [`video_patches`].
    pub fn encode(&self, params: &Params, tokens: &Tensor) -> Result<ContinuousFeature> {
        let tape = Tape::new();
        let cx = Ctx::with_trainable(&tape, params, |_| false);
        let mut shape = vec![1];
        shape.extend_from_slice(tokens.shape());
        let x = tape.constant(tokens.reshape(&shape)?);
        let f = self.forward(&cx, x)?;
        let d = self.config.code_dim;
        Ok(ContinuousFeature { tokens: f.value().reshape(&[self.config.tokens(), d])? })
    }
}

/// Per-token continuous features F, `[tokens, d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ContinuousFeature {
    pub tokens: Tensor,
}

/// Causal transformer decoder from per-token inputs to per-token outputs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Decoder {
    pub in_dim: usize,
    pub out_dim: usize,
    tokens: usize,
    stem: Vec<Linear>,
    pos: Positional,
    layers: Vec<TransformerLayer>,
    head: Vec<Linear>,
}

impl Decoder {
    /// Motion-style decoders get a two-layer ReLU stem and head; video-style
    /// ones a single projection each way.
    pub fn new(
        params: &mut Params,
        name: &str,
        cfg: &EncoderConfig,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let h = cfg.decoder_hidden_dim;
        let (stem, head) = match cfg.modality {
            Modality::Motion => (
                vec![
                    Linear::new(params, &format!("{name}.stem0"), in_dim, cfg.stem_dim, rng),
                    Linear::new(params, &format!("{name}.stem1"), cfg.stem_dim, h, rng),
                ],
                vec![
                    Linear::new(params, &format!("{name}.head0"), h, cfg.stem_dim, rng),
                    Linear::new(params, &format!("{name}.head1"), cfg.stem_dim, out_dim, rng),
                ],
            ),
            Modality::Video => (
                vec![Linear::new(params, &format!("{name}.stem0"), in_dim, h, rng)],
                vec![Linear::new(params, &format!("{name}.head0"), h, out_dim, rng)],
            ),
        };
        let pos = Positional::new(params, name, cfg, h, rng);
        let layers = (0..cfg.decoder_layers)
            .map(|i| TransformerLayer::new(params, &format!("{name}.layer{i}"), h, cfg.decoder_heads, 2 * h, true, rng))
            .collect();
        Ok(Self { in_dim, out_dim, tokens: cfg.tokens(), stem, pos, layers, head })
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let s = x.shape();
        if s.len() != 3 || s[1] != self.tokens || s[2] != self.in_dim {
            return Err(ShapeError::new(format!(
                "decoder expects [B, {}, {}], got {:?}",
                self.tokens, self.in_dim, s
            ))
            .into());
        }
        let mut h = x;
        for (i, l) in self.stem.iter().enumerate() {
            h = l.forward(cx, h);
            if i + 1 < self.stem.len() {
                h = h.relu();
            }
        }
        h = h.add(self.pos.table(cx));
        for layer in &self.layers {
            h = layer.forward(cx, h);
        }
        for (i, l) in self.head.iter().enumerate() {
            h = l.forward(cx, h);
            if i + 1 < self.head.len() {
                h = h.relu();
            }
        }
        Ok(h)
    }

    /// Inference-mode decode of one `[tokens, in_dim]` item.
    pub fn decode(&self, params: &Params, tokens: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let cx = Ctx::with_trainable(&tape, params, |_| false);
        let mut shape = vec![1];
        shape.extend_from_slice(tokens.shape());
        let y = self.forward(&cx, tape.constant(tokens.reshape(&shape)?))?;
        Ok(y.value().reshape(&[self.tokens, self.out_dim])?)
    }

    /// Parameters owned by this decoder's final output layer (weight, bias).
    pub fn output_layer(&self) -> &Linear {
        self.head.last().expect("decoder has a head")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub ratio: f64,
    pub seed: u64,
}

/// Exactly `round(ratio · len)` positions, uniformly without replacement.
pub fn sample_mask(len: usize, ratio: f64, rng: &mut impl Rng) -> Vec<bool> {
    let count = ((ratio.clamp(0.0, 1.0) * len as f64).round() as usize).min(len);
    let mut mask = vec![false; len];
    for i in sample(rng, len, count) {
        mask[i] = true;
    }
    mask
}

/// Replaces masked quantised tokens by `mask_token`; returns the masked token
/// matrix and the mask.
pub fn mask_features(quantized: &QuantizedFeatures, spec: &MaskSpec, mask_token: &[f64]) -> Result<(Tensor, Vec<bool>)> {
    if !(0.0..=1.0).contains(&spec.ratio) {
        return Err(Error::Config(format!("mask ratio {} outside [0, 1]", spec.ratio)));
    }
    let d = quantized.vectors.shape()[1];
    if mask_token.len() != d {
        return Err(ShapeError::new(format!("mask token width {} != {d}", mask_token.len())).into());
    }
    let len = quantized.indices.len();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mask = sample_mask(len, spec.ratio, &mut rng);
    let mut out = quantized.vectors.clone();
    for (row, &m) in out.data_mut().chunks_mut(d).zip(&mask) {
        if m {
            row.copy_from_slice(mask_token);
        }
    }
    Ok((out, mask))
}

/// Graph form of masking over `[B, L, d]` tokens with a `[d]` learned token.
pub fn apply_mask<'t>(tokens: Var<'t>, mask: &[bool], mask_token: Var<'t>) -> Var<'t> {
    let s = tokens.shape();
    let tape = tokens.tape();
    let m: Vec<f64> = mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let keep = tape.constant(Tensor::from_vec(&[s[0], s[1], 1], m.iter().map(|v| 1.0 - v).collect()));
    let hide = tape.constant(Tensor::from_vec(&[s[0], s[1], 1], m));
    tokens.mul(keep).add(hide.mul(mask_token))
}

/// Mean squared error over all elements.
pub fn rec_loss<'t>(original: Var<'t>, reconstructed: Var<'t>) -> Result<Var<'t>> {
    if original.shape() != reconstructed.shape() {
        return Err(ShapeError::new(format!(
            "reconstruction {:?} vs original {:?}",
            reconstructed.shape(),
            original.shape()
        ))
        .into());
    }
    Ok(reconstructed.sub(original).square().mean())
}

/// `[K, F]` motion tokens.
pub fn motion_tokens(m: &MotionSequence) -> Tensor {
    Tensor::from_vec(&[m.frames, m.feature_dim], m.poses.clone())
}

/// Splits `[T, H, W, C]` frames into `[T · (H/p) · (W/p), p · p · C]` patches,
/// frame-major then patch rows then patch columns.
pub fn patchify(data: &[f32], frames: usize, height: usize, width: usize, channels: usize, p: usize) -> Tensor {
    let (ph, pw) = (height / p, width / p);
    let mut out = Vec::with_capacity(data.len());
    for t in 0..frames {
        let base = t * height * width * channels;
        for py in 0..ph {
            for px in 0..pw {
                for y in 0..p {
                    let row = py * p + y;
                    let start = base + (row * width + px * p) * channels;
                    out.extend(data[start..start + p * channels].iter().map(|&v| v as f64));
                }
            }
        }
    }
    Tensor::from_vec(&[frames * ph * pw, p * p * channels], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &Tensor, frames: usize, height: usize, width: usize, channels: usize, p: usize) -> Vec<f32> {
    let (ph, pw) = (height / p, width / p);
    let mut out = vec![0.0f32; frames * height * width * channels];
    let src = patches.data();
    let mut i = 0;
    for t in 0..frames {
        let base = t * height * width * channels;
        for py in 0..ph {
            for px in 0..pw {
                for y in 0..p {
                    let row = py * p + y;
                    let start = base + (row * width + px * p) * channels;
                    for v in &mut out[start..start + p * channels] {
                        *v = src[i] as f32;
                        i += 1;
                    }
                }
            }
        }
    }
    out
}

pub fn video_patches(v: &VideoClip, p: usize) -> Tensor {
    patchify(&v.data, v.frames, v.height, v.width, v.channels, p)
}

/// Reassembles decoder output `[K, F]` into a motion sequence.
pub fn decode_motion(tokens: &Tensor, num_joints: usize) -> Result<MotionSequence> {
    if tokens.rank() != 2 {
        return Err(ShapeError::new(format!("expected [K, F], got {:?}", tokens.shape())).into());
    }
    let (k, f) = (tokens.shape()[0], tokens.shape()[1]);
    Ok(MotionSequence { frames: k, num_joints, feature_dim: f, poses: tokens.data().to_vec() })
}

/// Reassembles decoder patch output into a clip (values are not clamped).
pub fn decode_video(patches: &Tensor, cfg: &EncoderConfig) -> Result<VideoClip> {
    let want = [cfg.tokens(), cfg.token_input_dim()];
    if patches.shape() != want {
        return Err(ShapeError::new(format!("expected {want:?}, got {:?}", patches.shape())).into());
    }
    Ok(VideoClip {
        frames: cfg.seq_len,
        height: cfg.height,
        width: cfg.width,
        channels: cfg.channels,
        data: unpatchify(patches, cfg.seq_len, cfg.height, cfg.width, cfg.channels, cfg.patch_size),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patchify_roundtrip() {
        let data: Vec<f32> = (0..2 * 32 * 32 * 3).map(|i| i as f32).collect();
        let p = patchify(&data, 2, 32, 32, 3, 16);
        assert_eq!(p.shape(), &[8, 768]);
        // first row of the second patch in frame 0 starts at column 16
        assert_eq!(p.at(&[1, 0]), (16 * 3) as f64);
        assert_eq!(unpatchify(&p, 2, 32, 32, 3, 16), data);
    }

    #[test]
    fn mask_count_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            assert_eq!(sample_mask(100, 0.75, &mut rng).iter().filter(|&&b| b).count(), 75);
        }
        assert!(sample_mask(10, 0.0, &mut rng).iter().all(|&b| !b));
        assert!(sample_mask(10, 1.0, &mut rng).iter().all(|&b| b));
    }

    #[test]
    fn rec_loss_constant_offset() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::from_vec(&[2, 3], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]));
        let b = a.offset(0.5);
        assert_eq!(rec_loss(a, a).unwrap().item(), 0.0);
        assert!((rec_loss(a, b).unwrap().item() - 0.25).abs() < 1e-15);
        let c = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(rec_loss(a, c), Err(Error::Shape(_))));
    }

    #[test]
    fn video_config_requires_dividing_patch() {
        let mut cfg = EncoderConfig::desk_video(8, 32, 32);
        cfg.patch_size = 12;
        assert!(cfg.validate().is_err());
    }
}
