//! Two-stage pre-training: motion-only masked reconstruction, then the joint
//! objective over paired data.

mod checkpoint;
mod config;

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use humocon_autograd::{Adam, Ctx, ParamId, Tape, Tensor, Var};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{file_hash, load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use config::{apply_override, LossConfig, LossWeights, StageConfig, TrainConfig};

use crate::backbones::Modality;
use crate::error::{Error, Result};
use crate::model::{model_forward, Batch, ForwardOptions, ForwardOut, Model};
use crate::quantizer::{ema_update, perplexity, reinit_dead_codes};
use crate::synthkit::PairedSample;

/// Per-step loss terms; absent terms were not part of the objective.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rec_motion: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rec_video: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dis: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub act: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub align: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub commit: Option<f64>,
}

/// `rec_motion + rec_video + λ_dis·dis + λ_act·act + λ_align·align + β·commit`
/// over the present terms.
pub fn total_loss(parts: &LossParts, weights: &LossWeights, commitment: f64) -> Result<f64> {
    weights.validate()?;
    if !(commitment >= 0.0) {
        return Err(Error::Config(format!("commitment weight must be >= 0, got {commitment}")));
    }
    let terms = [
        (parts.rec_motion, 1.0),
        (parts.rec_video, 1.0),
        (parts.dis, weights.lambda_dis),
        (parts.act, weights.lambda_act),
        (parts.align, weights.lambda_align),
        (parts.commit, commitment),
    ];
    Ok(terms.iter().filter_map(|(v, w)| v.map(|v| v * w)).sum())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub stage: u8,
    pub step: u64,
    #[serde(flatten)]
    pub parts: LossParts,
    pub total: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub perplexity_motion: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub perplexity_video: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_ms: Option<f64>,
}

/// Graph form of [`total_loss`] plus the scalar parts.
fn graph_total<'t>(out: &ForwardOut<'t>, cfg: &TrainConfig) -> (Var<'t>, LossParts) {
    let w = &cfg.loss.weights;
    let add = |a: Option<Var<'t>>, b: Option<Var<'t>>| match (a, b) {
        (Some(a), Some(b)) => Some(a.add(b)),
        (a, b) => a.or(b),
    };
    let (m, v) = (out.motion.as_ref(), out.video.as_ref());
    let rec_motion = m.and_then(|b| b.rec);
    let rec_video = v.and_then(|b| b.rec);
    let dis = add(m.and_then(|b| b.dis), v.and_then(|b| b.dis));
    let act = add(m.and_then(|b| b.act), v.and_then(|b| b.act));
    let commit = add(m.map(|b| b.commit), v.map(|b| b.commit));
    let weighted = [
        rec_motion,
        rec_video,
        dis.map(|x| x.scale(w.lambda_dis)),
        act.map(|x| x.scale(w.lambda_act)),
        out.align.map(|x| x.scale(w.lambda_align)),
        commit.map(|x| x.scale(cfg.loss.commitment)),
    ];
    let total = weighted.into_iter().flatten().reduce(|a, b| a.add(b)).expect("at least the commitment term");
    let item = |x: Option<Var<'t>>| x.map(|v| v.item());
    let parts = LossParts {
        rec_motion: item(rec_motion),
        rec_video: item(rec_video),
        dis: item(dis),
        act: item(act),
        align: item(out.align),
        commit: item(commit),
    };
    (total, parts)
}

fn mean_parts(all: &[LossParts]) -> LossParts {
    let n = all.len() as f64;
    let avg = |f: fn(&LossParts) -> Option<f64>| {
        let vals: Option<Vec<f64>> = all.iter().map(f).collect();
        vals.map(|v| v.iter().sum::<f64>() / n)
    };
    LossParts {
        rec_motion: avg(|p| p.rec_motion),
        rec_video: avg(|p| p.rec_video),
        dis: avg(|p| p.dis),
        act: avg(|p| p.act),
        align: avg(|p| p.align),
        commit: avg(|p| p.commit),
    }
}

fn finite(p: &LossParts) -> bool {
    [p.rec_motion, p.rec_video, p.dis, p.act, p.align, p.commit].iter().flatten().all(|v| v.is_finite())
}

/// Parameters updated in stage 1.
pub fn stage1_trainable(name: &str) -> bool {
    ["motion.encoder.", "motion.decoder.", "motion.mask_token"].iter().any(|p| name.starts_with(p))
}

#[derive(Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub config_hash: String,
    pub model: Model,
    pub adam: Adam,
    /// Stage of the last completed or in-progress step (0 before any stage).
    pub stage: u8,
    /// Steps completed within `stage`.
    pub step: u64,
    pub rng: ChaCha8Rng,
    /// Where a non-finite loss dumps its diagnostics.
    dump_dir: Option<PathBuf>,
}

impl Trainer {
    /// Model parameters come from stream 0 of the seed's generator, every
    /// later draw from stream 1.
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(&config.model, config.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Self {
            config_hash: config.hash(),
            adam: Adam::new(config.stage1.lr),
            config,
            model,
            stage: 0,
            step: 0,
            rng,
            dump_dir: None,
        })
    }

    pub fn set_dump_dir(&mut self, dir: impl Into<PathBuf>) {
        self.dump_dir = Some(dir.into());
    }

    pub fn stage_config(&self, stage: u8) -> &StageConfig {
        if stage == 1 {
            &self.config.stage1
        } else {
            &self.config.stage2
        }
    }

    /// Moves to `stage` with a fresh optimizer. Entering stage 2 requires a
    /// finished stage 1.
    pub fn begin_stage(&mut self, stage: u8) -> Result<()> {
        match stage {
            1 => {}
            2 if self.stage == 1 && self.step >= self.config.stage1.iters => {}
            2 if self.stage == 2 => return Ok(()),
            2 => return Err(Error::Input("stage 2 needs a completed stage-1 checkpoint".into())),
            s => return Err(Error::Config(format!("unknown stage {s}"))),
        }
        if self.stage != stage {
            self.stage = stage;
            self.step = 0;
            self.adam = Adam::new(self.stage_config(stage).lr);
        }
        Ok(())
    }

    /// Runs the current stage to its configured iteration count.
    pub fn run_stage(&mut self, data: &[PairedSample], mut sink: impl FnMut(&LossReport) -> Result<()>) -> Result<()> {
        let iters = self.stage_config(self.stage).iters;
        while self.step < iters {
            let report = self.train_step(data)?;
            sink(&report)?;
        }
        Ok(())
    }

    fn forward_options(&self) -> ForwardOptions {
        if self.stage == 1 {
            self.config.stage1_forward()
        } else {
            self.config.joint_forward()
        }
    }

    /// Sets the initial codes of one codebook to distinct encoder outputs on a
    /// random batch, so that every code starts inside the feature cloud.
    fn seed_codebook(&mut self, data: &[PairedSample], modality: Modality) -> Result<()> {
        let cfg = &self.config.model;
        let branch_cfg = if modality == Modality::Motion { &cfg.motion } else { &cfg.video };
        let n = cfg.codebook_size;
        let need = n.div_ceil(branch_cfg.tokens()).max(self.stage_config(self.stage).micro_batch).min(data.len());
        let idx = sample(&mut self.rng, data.len(), need).into_vec();
        let batch = Batch::new(data, &idx, cfg);
        let tape = Tape::new();
        let cx = Ctx::with_trainable(&tape, &self.model.params, |_| false);
        let branch = self.model.branch(modality);
        let input = if modality == Modality::Motion { &batch.motion } else { &batch.video };
        let feats = branch.encoder.forward(&cx, tape.constant(input.clone()))?.value();
        let d = branch_cfg.code_dim;
        let rows = feats.numel() / d;
        let picks = sample(&mut self.rng, rows, n.min(rows)).into_vec();
        let cb = self.model.codebook_mut(modality);
        for (k, &r) in picks.iter().enumerate() {
            let row = &feats.data()[r * d..(r + 1) * d];
            cb.codes.data_mut()[k * d..(k + 1) * d].copy_from_slice(row);
            cb.ema_embed_sum.data_mut()[k * d..(k + 1) * d].copy_from_slice(row);
        }
        Ok(())
    }

    pub fn train_step(&mut self, data: &[PairedSample]) -> Result<LossReport> {
        if self.stage == 0 {
            self.begin_stage(1)?;
        }
        if data.is_empty() {
            return Err(Error::Input("training needs at least one sample".into()));
        }
        let started = Instant::now();
        let stage = self.stage;
        if self.step == 0 {
            if stage == 1 {
                self.seed_codebook(data, Modality::Motion)?;
            } else {
                self.seed_codebook(data, Modality::Video)?;
            }
        }
        let sc = self.stage_config(stage).clone();
        let opts = self.forward_options();
        let freeze_motion = stage == 2 && self.config.freeze_motion_codebook_stage2;
        let threshold = self.config.model.dead_code_threshold;
        let mut grad_sum: Vec<(ParamId, Tensor)> = Vec::new();
        let mut parts_all = Vec::with_capacity(sc.grad_accum_steps);
        let (mut idx_motion, mut idx_video) = (Vec::new(), Vec::new());
        for _ in 0..sc.grad_accum_steps {
            let idx = sample(&mut self.rng, data.len(), sc.micro_batch.min(data.len())).into_vec();
            let batch = Batch::new(data, &idx, &self.config.model);
            let tape = Tape::new();
            let cx = if stage == 1 {
                Ctx::with_trainable(&tape, &self.model.params, stage1_trainable)
            } else {
                Ctx::new(&tape, &self.model.params)
            };
            let out = model_forward(&cx, &self.model, &batch, &opts, &mut self.rng)?;
            let (total, parts) = graph_total(&out, &self.config);
            if !finite(&parts) || !total.item().is_finite() {
                self.dump_nonfinite(&batch, &parts)?;
                return Err(Error::NonFinite {
                    stage,
                    step: self.step,
                    batch: batch.indices.clone(),
                    detail: format!("{parts:?}"),
                });
            }
            let grads = cx.gradients(total);
            if grad_sum.is_empty() {
                grad_sum = grads;
            } else {
                for ((ia, acc), (ig, g)) in grad_sum.iter_mut().zip(&grads) {
                    debug_assert_eq!(ia, ig);
                    acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
                }
            }
            parts_all.push(parts);
            let updates = [(Modality::Motion, out.motion.map(|b| b.quantized)), (Modality::Video, out.video.map(|b| b.quantized))];
            for (m, q) in updates {
                let Some(q) = q else { continue };
                if m == Modality::Motion {
                    idx_motion.extend_from_slice(&q.indices);
                } else {
                    idx_video.extend_from_slice(&q.indices);
                }
                if m == Modality::Motion && freeze_motion {
                    continue;
                }
                let cb = self.model.codebook_mut(m);
                ema_update(cb, &q.input_features, &q.indices);
                reinit_dead_codes(cb, &q.input_features, threshold, &mut self.rng);
            }
        }
        if sc.grad_accum_steps > 1 {
            let s = 1.0 / sc.grad_accum_steps as f64;
            grad_sum.iter_mut().for_each(|(_, g)| g.data_mut().iter_mut().for_each(|v| *v *= s));
        }
        self.adam.step(&mut self.model.params, &grad_sum);
        self.step += 1;
        let parts = mean_parts(&parts_all);
        let total = total_loss(&parts, &self.config.loss.weights, self.config.loss.commitment)?;
        let n = self.config.model.codebook_size;
        Ok(LossReport {
            stage,
            step: self.step,
            parts,
            total,
            perplexity_motion: (!idx_motion.is_empty()).then(|| perplexity(&idx_motion, n)).transpose()?,
            perplexity_video: (!idx_video.is_empty()).then(|| perplexity(&idx_video, n)).transpose()?,
            wall_ms: (!self.config.deterministic).then(|| started.elapsed().as_secs_f64() * 1e3),
        })
    }

    fn dump_nonfinite(&self, batch: &Batch, parts: &LossParts) -> Result<()> {
        let Some(dir) = &self.dump_dir else { return Ok(()) };
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(format!("nonfinite_stage{}_step{}.json", self.stage, self.step));
        let body = serde_json::json!({
            "stage": self.stage,
            "step": self.step,
            "batch_indices": batch.indices,
            "parts": parts,
        });
        fs::write(&path, serde_json::to_string_pretty(&body)?).map_err(|e| Error::io(&path, e))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(self, path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        load_checkpoint(path)
    }
}

/// Append-only JSON-lines metrics file.
pub struct MetricsWriter {
    out: BufWriter<File>,
    path: PathBuf,
}

impl MetricsWriter {
    pub fn append(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let f = OpenOptions::new().create(true).append(true).open(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self { out: BufWriter::new(f), path })
    }

    pub fn write(&mut self, r: &LossReport) -> Result<()> {
        let line = serde_json::to_string(r)?;
        writeln!(self.out, "{line}").map_err(|e| Error::io(&self.path, e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<LossReport>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::integrity(path, e.to_string())))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageSelect {
    One,
    Two,
    All,
}

/// Checkpoint files written by [`pretrain`].
pub fn stage_checkpoint(out: &Path, stage: u8) -> PathBuf {
    out.join(format!("stage{stage}.ckpt"))
}

/// Runs the selected stages, writing `stage{n}.ckpt` and appending to
/// `metrics.jsonl` under `out`. Stage 2 alone resumes from `stage1.ckpt`, or
/// from `stage2.ckpt` when that exists and is unfinished.
pub fn pretrain(config: TrainConfig, data: &[PairedSample], select: StageSelect, out: &Path) -> Result<Trainer> {
    let metrics_path = out.join("metrics.jsonl");
    let mut metrics = MetricsWriter::append(&metrics_path)?;
    let mut trainer = match select {
        StageSelect::One | StageSelect::All => Trainer::new(config)?,
        StageSelect::Two => {
            let p2 = stage_checkpoint(out, 2);
            let p1 = stage_checkpoint(out, 1);
            let path = if p2.exists() { p2 } else { p1 };
            if !path.exists() {
                return Err(Error::Input(format!("stage 2 needs a stage-1 checkpoint at {}", path.display())));
            }
            let mut t = Trainer::load(&path)?;
            if t.config_hash != config.hash() {
                // iteration counts may legitimately differ between invocations
                let mut adopted = config.clone();
                adopted.stage1 = t.config.stage1.clone();
                if adopted.model != t.config.model || adopted.seed != t.config.seed {
                    return Err(Error::Config("checkpoint was trained with a different model or seed".into()));
                }
                t.config = adopted;
                t.config_hash = t.config.hash();
            }
            t
        }
    };
    trainer.set_dump_dir(out);
    let mut sink = |r: &LossReport| metrics.write(r);
    if matches!(select, StageSelect::One | StageSelect::All) {
        trainer.begin_stage(1)?;
        trainer.run_stage(data, &mut sink)?;
        trainer.save(stage_checkpoint(out, 1))?;
    }
    if matches!(select, StageSelect::Two | StageSelect::All) {
        trainer.begin_stage(2)?;
        trainer.run_stage(data, &mut sink)?;
        trainer.save(stage_checkpoint(out, 2))?;
    }
    metrics.flush()?;
    Ok(trainer)
}
