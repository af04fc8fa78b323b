//! Two-branch model assembly and the per-micro-batch forward pass that produces
//! every loss term.

use humocon_autograd::{Ctx, ParamId, Params, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{align_loss_batch, pool_frames, AlignOptions, ProjectionLayer};
use crate::backbones::{apply_mask, motion_tokens, patchify, rec_loss, sample_mask, Decoder, Encoder, EncoderConfig, Modality};
use crate::error::{Error, Result};
use crate::infolosses::{
    dis_loss, subsample_codes, DisMode, HyperConfig, HyperDiscriminator, VelocityDecoder,
};
use crate::quantizer::{quantize, Codebook, QuantizedFeatures};
use crate::synthkit::{PairedSample, SceneSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub motion: EncoderConfig,
    pub video: EncoderConfig,
    pub codebook_size: usize,
    pub ema_decay: f64,
    pub laplace_eps: f64,
    pub dead_code_threshold: u64,
    pub hyper: HyperConfig,
    pub align_dim: usize,
    pub mask_ratio: f64,
}

impl ModelConfig {
    pub fn desk(scene: &SceneSpec) -> Self {
        Self {
            motion: EncoderConfig::desk_motion(scene.feature_dim(), scene.seq_len_motion),
            video: EncoderConfig::desk_video(scene.seq_len_video, scene.height, scene.width),
            codebook_size: 64,
            ema_decay: 0.99,
            laplace_eps: 1e-5,
            dead_code_threshold: 200,
            hyper: HyperConfig::default(),
            align_dim: 32,
            mask_ratio: 0.75,
        }
    }

    pub fn full_scale(scene: &SceneSpec) -> Self {
        Self {
            motion: EncoderConfig::full_scale_motion(scene.seq_len_motion),
            video: EncoderConfig::full_scale_video(scene.seq_len_video),
            codebook_size: 512,
            ema_decay: 0.99,
            laplace_eps: 1e-5,
            dead_code_threshold: 200,
            hyper: HyperConfig::default(),
            align_dim: 256,
            mask_ratio: 0.75,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.motion.validate()?;
        self.video.validate()?;
        if self.motion.modality != Modality::Motion || self.video.modality != Modality::Video {
            return Err(Error::Config("branch modalities are swapped".into()));
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return Err(Error::Config(format!("mask ratio {} outside [0, 1]", self.mask_ratio)));
        }
        if self.codebook_size < 2 || self.align_dim == 0 {
            return Err(Error::Config("codebook_size must be >= 2 and align_dim positive".into()));
        }
        Ok(())
    }

    /// Checks the dataset geometry against the model's input shapes.
    pub fn check_scene(&self, scene: &SceneSpec) -> Result<()> {
        let (m, v) = (&self.motion, &self.video);
        if m.input_dim != scene.feature_dim() || m.seq_len != scene.seq_len_motion {
            return Err(Error::Config(format!(
                "motion branch expects ({}, {}), dataset has ({}, {})",
                m.seq_len,
                m.input_dim,
                scene.seq_len_motion,
                scene.feature_dim()
            )));
        }
        if v.seq_len != scene.seq_len_video || v.height != scene.height || v.width != scene.width || v.channels != 3 {
            return Err(Error::Config("video branch geometry does not match the dataset".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Branch {
    pub modality: Modality,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub mask_token: ParamId,
    pub hyper: HyperDiscriminator,
    pub velocity: VelocityDecoder,
    pub proj: ProjectionLayer,
}

impl Branch {
    fn new(params: &mut Params, cfg: &EncoderConfig, model: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let name = cfg.modality.name();
        let encoder = Encoder::new(params, &format!("{name}.encoder"), cfg, rng)?;
        let decoder = Decoder::new(params, &format!("{name}.decoder"), cfg, cfg.code_dim, cfg.token_input_dim(), rng)?;
        let mask_token = params.add_uniform(format!("{name}.mask_token"), &[cfg.code_dim], 0.1, rng);
        let hyper = HyperDiscriminator::new(params, &format!("{name}.hyper"), cfg.code_dim, &model.hyper, rng)?;
        let velocity = VelocityDecoder::new(params, &format!("{name}.velocity"), cfg, rng)?;
        let proj = ProjectionLayer::new(params, &format!("{name}.proj"), cfg.code_dim, model.align_dim, rng);
        Ok(Self { modality: cfg.modality, encoder, decoder, mask_token, hyper, velocity, proj })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.encoder.config
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Params,
    pub motion: Branch,
    pub video: Branch,
    pub motion_codebook: Codebook,
    pub video_codebook: Codebook,
}

impl Model {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        let motion = Branch::new(&mut params, &config.motion, config, &mut rng)?;
        let video = Branch::new(&mut params, &config.video, config, &mut rng)?;
        let n = config.codebook_size;
        let motion_codebook = Codebook::random(n, config.motion.code_dim, 0.1, config.ema_decay, config.laplace_eps, &mut rng)?;
        let video_codebook = Codebook::random(n, config.video.code_dim, 0.1, config.ema_decay, config.laplace_eps, &mut rng)?;
        Ok(Self { config: config.clone(), params, motion, video, motion_codebook, video_codebook })
    }

    pub fn branch(&self, m: Modality) -> &Branch {
        match m {
            Modality::Motion => &self.motion,
            Modality::Video => &self.video,
        }
    }

    pub fn codebook(&self, m: Modality) -> &Codebook {
        match m {
            Modality::Motion => &self.motion_codebook,
            Modality::Video => &self.video_codebook,
        }
    }

    pub fn codebook_mut(&mut self, m: Modality) -> &mut Codebook {
        match m {
            Modality::Motion => &mut self.motion_codebook,
            Modality::Video => &mut self.video_codebook,
        }
    }
}

/// Stacked model inputs and targets for a set of samples.
#[derive(Clone, Debug)]
pub struct Batch {
    pub indices: Vec<usize>,
    /// `[B, K, F]`.
    pub motion: Tensor,
    /// `[B, K, F]`.
    pub motion_velocity: Tensor,
    /// `[B, T·np, p·p·3]`.
    pub video: Tensor,
    /// `[B, T·np, p·p·2]`.
    pub video_velocity: Tensor,
    pub align_maps: Vec<Vec<usize>>,
}

impl Batch {
    pub fn new(samples: &[PairedSample], indices: &[usize], cfg: &ModelConfig) -> Self {
        let p = cfg.video.patch_size;
        let b = indices.len();
        let (k, f) = (cfg.motion.seq_len, cfg.motion.input_dim);
        let (l, pd) = (cfg.video.tokens(), cfg.video.token_input_dim());
        let (mut m, mut mv, mut v, mut vv) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let mut align_maps = Vec::with_capacity(b);
        for &i in indices {
            let s = &samples[i];
            m.extend(motion_tokens(&s.motion).into_data());
            mv.extend_from_slice(&s.velocity.delta_motion);
            v.extend(patchify(&s.video.data, s.video.frames, s.video.height, s.video.width, 3, p).into_data());
            vv.extend(patchify(&s.velocity.flow, s.video.frames, s.video.height, s.video.width, 2, p).into_data());
            align_maps.push(s.align_map.clone());
        }
        Self {
            indices: indices.to_vec(),
            motion: Tensor::from_vec(&[b, k, f], m),
            motion_velocity: Tensor::from_vec(&[b, k, f], mv),
            video: Tensor::from_vec(&[b, l, pd], v),
            video_velocity: Tensor::from_vec(&[b, l, p * p * 2], vv),
            align_maps,
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Which terms a forward pass computes.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOptions {
    pub motion: bool,
    pub video: bool,
    pub rec: bool,
    pub dis: bool,
    pub act: bool,
    pub align: bool,
    pub mask: bool,
    pub mask_ratio: f64,
    pub second_order: bool,
    pub dis_mode: DisMode,
    pub tau_dis: f64,
    pub dis_negatives: Option<usize>,
    pub align_opts: AlignOptions,
}

impl ForwardOptions {
    /// Every term, masking on.
    pub fn full() -> Self {
        Self {
            motion: true,
            video: true,
            rec: true,
            dis: true,
            act: true,
            align: true,
            mask: true,
            mask_ratio: 0.75,
            second_order: true,
            dis_mode: DisMode::Multiclass,
            tau_dis: 0.1,
            dis_negatives: None,
            align_opts: AlignOptions::default(),
        }
    }
}

/// Graph outputs of one branch.
pub struct BranchOut<'t> {
    pub rec: Option<Var<'t>>,
    pub dis: Option<Var<'t>>,
    pub act: Option<Var<'t>>,
    pub commit: Var<'t>,
    /// `[B, frames, H_align]` unit vectors.
    pub aligned: Option<Var<'t>>,
    pub quantized: QuantizedFeatures,
    /// `[B, L, out]` velocity predictions when act was computed.
    pub velocity_pred: Option<Var<'t>>,
}

pub fn branch_forward<'t>(
    cx: &Ctx<'t>,
    branch: &Branch,
    codebook: &Codebook,
    input: &Tensor,
    velocity_target: &Tensor,
    opts: &ForwardOptions,
    rng: &mut impl Rng,
) -> Result<BranchOut<'t>> {
    let tape = cx.tape;
    let cfg = branch.config();
    let (b, l, d) = (input.shape()[0], cfg.tokens(), cfg.code_dim);
    let x = tape.constant(input.clone());
    let f = branch.encoder.forward(cx, x)?;
    let mut flat = f.reshape(&[b * l, d]);
    if (opts.act || opts.dis) && !flat.requires_grad() {
        flat = tape.var((*flat.value()).clone());
    }
    let quantized = quantize(&flat.value(), codebook)?;
    let q = tape.constant(quantized.vectors.clone());
    let commit = flat.sub(q).square().mean();
    let dq = quantized.straight_through(flat).reshape(&[b, l, d]);

    let rec = if opts.rec {
        let mask: Vec<bool> = if opts.mask {
            (0..b).flat_map(|_| sample_mask(l, opts.mask_ratio, rng)).collect()
        } else {
            vec![false; b * l]
        };
        let masked = apply_mask(dq, &mask, cx.p(branch.mask_token));
        Some(rec_loss(x, branch.decoder.forward(cx, masked)?)?)
    } else {
        None
    };

    let (mut dis, mut act, mut velocity_pred) = (None, None, None);
    if opts.dis || opts.act {
        let (codes, assigned) = match opts.dis_negatives {
            Some(neg) if neg + 1 < codebook.size() => {
                let (subset, remap) = subsample_codes(codebook.size(), &quantized.indices, neg, rng);
                let mut rows = Vec::with_capacity(subset.len() * d);
                subset.iter().for_each(|&k| rows.extend_from_slice(codebook.code(k)));
                (Tensor::from_vec(&[subset.len(), d], rows), remap)
            }
            _ => (codebook.codes.clone(), quantized.indices.clone()),
        };
        let codes = tape.constant(codes);
        if opts.dis {
            let cos = branch.hyper.cosine(cx, codes, flat)?;
            dis = Some(dis_loss(cos, &assigned, opts.dis_mode, opts.tau_dis)?);
        }
        if opts.act {
            let g = branch.hyper.grad_feature(cx, codes, flat, &assigned, opts.second_order)?.g.reshape(&[b, l, d]);
            let target = tape.constant(velocity_target.clone());
            let pred = branch.velocity.forward(cx, x, g)?;
            act = Some(rec_loss(target, pred)?);
            velocity_pred = Some(pred);
        }
    }

    let aligned = if opts.align {
        let frames = match branch.modality {
            Modality::Motion => dq,
            Modality::Video => pool_frames(dq, cfg.patches_per_frame()),
        };
        Some(branch.proj.forward(cx, frames)?)
    } else {
        None
    };
    Ok(BranchOut { rec, dis, act, commit, aligned, quantized, velocity_pred })
}

/// All graph outputs of one micro-batch.
pub struct ForwardOut<'t> {
    pub motion: Option<BranchOut<'t>>,
    pub video: Option<BranchOut<'t>>,
    pub align: Option<Var<'t>>,
}

pub fn model_forward<'t>(
    cx: &Ctx<'t>,
    model: &Model,
    batch: &Batch,
    opts: &ForwardOptions,
    rng: &mut impl Rng,
) -> Result<ForwardOut<'t>> {
    let motion = if opts.motion {
        Some(branch_forward(cx, &model.motion, &model.motion_codebook, &batch.motion, &batch.motion_velocity, opts, rng)?)
    } else {
        None
    };
    let video = if opts.video {
        Some(branch_forward(cx, &model.video, &model.video_codebook, &batch.video, &batch.video_velocity, opts, rng)?)
    } else {
        None
    };
    let align = match (&motion, &video) {
        (Some(m), Some(v)) if opts.align => {
            let (ma, va) = (m.aligned.expect("align requested"), v.aligned.expect("align requested"));
            Some(align_loss_batch(va, ma, &batch.align_maps, &opts.align_opts)?)
        }
        _ => None,
    };
    Ok(ForwardOut { motion, video, align })
}

/// Inference-mode tape and context with nothing trainable.
pub fn eval_ctx<'t>(tape: &'t Tape, model: &'t Model) -> Ctx<'t> {
    Ctx::with_trainable(tape, &model.params, |_| false)
}
