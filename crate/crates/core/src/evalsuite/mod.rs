//! Held-out metrics, within-pair retrieval, gradient checks, the loss-term
//! ablation grid and report rendering.

mod ablation;
mod gradcheck;
pub mod oracles;
mod report;

use humocon_autograd::Tape;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use ablation::{
    comparisons, run_ablation, AblationOptions, AblationRow, AblationRowKind, AblationTable, Comparison, RowStats, Stage1Summary,
    MIN_SEEDS,
};
pub use gradcheck::{finite_diff_check, FdReport, FdSelector};
pub use report::{report, ReportOutcome, PLOT_FILES, SUMMARY_FILE};

use crate::error::{Error, Result};
use crate::model::{eval_ctx, model_forward, Batch, ForwardOptions, Model};
use crate::quantizer::perplexity;
use crate::synthkit::PairedSample;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceRetrieval {
    pub top1: f64,
    pub top5: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub top1: f64,
    pub top5: f64,
    pub chance: f64,
    pub per_sequence: Vec<SequenceRetrieval>,
}

/// Within-pair retrieval: each video frame ranks the motion frames of its own
/// pair by cosine similarity. Frames tied with the correct one share the
/// credit, so a hit among `m` tied candidates that straddle the cut-off counts
/// as the probability that a random tie-break keeps it inside the top k.
pub fn retrieval_from_features(
    video: &[Vec<Vec<f64>>],
    motion: &[Vec<Vec<f64>>],
    align_maps: &[Vec<usize>],
) -> Result<RetrievalResult> {
    if video.is_empty() || video.len() != motion.len() || video.len() != align_maps.len() {
        return Err(Error::Input("retrieval needs a non-empty set of paired sequences".into()));
    }
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb).max(1e-12)
    };
    let mut per_sequence = Vec::with_capacity(video.len());
    let k = motion[0].len();
    for ((v, m), map) in video.iter().zip(motion).zip(align_maps) {
        if map.len() != v.len() || m.len() != k {
            return Err(Error::Input("unpaired sequence in retrieval set".into()));
        }
        let (mut h1, mut h5) = (0.0, 0.0);
        for (frame, &target) in v.iter().zip(map) {
            if target >= m.len() {
                return Err(Error::Index(format!("align target {target} outside {} motion frames", m.len())));
            }
            let sims: Vec<f64> = m.iter().map(|mf| cos(frame, mf)).collect();
            let s = sims[target];
            let better = sims.iter().filter(|&&x| x > s).count();
            let tied = sims.iter().filter(|&&x| x == s).count();
            h1 += tie_credit(better, tied, 1);
            h5 += tie_credit(better, tied, 5);
        }
        per_sequence.push(SequenceRetrieval { top1: h1 / v.len() as f64, top5: h5 / v.len() as f64 });
    }
    let n = per_sequence.len() as f64;
    Ok(RetrievalResult {
        top1: per_sequence.iter().map(|r| r.top1).sum::<f64>() / n,
        top5: per_sequence.iter().map(|r| r.top5).sum::<f64>() / n,
        chance: 1.0 / k as f64,
        per_sequence,
    })
}

/// Probability that the target lands in the top `k` when `better` candidates
/// are strictly ahead and `tied` (including the target) share its score.
fn tie_credit(better: usize, tied: usize, k: usize) -> f64 {
    if better >= k {
        0.0
    } else {
        ((k - better).min(tied)) as f64 / tied as f64
    }
}

/// Held-out metrics of one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    /// Masked reconstruction MSE, motion plus video.
    pub rec_mse: f64,
    pub rec_motion: f64,
    pub rec_video: f64,
    /// Velocity decoder MSE, motion plus video.
    pub velocity_mse: f64,
    pub velocity_motion: f64,
    pub velocity_video: f64,
    pub retrieval_top1: f64,
    pub retrieval_top5: f64,
    pub perplexity: f64,
    pub perplexity_motion: f64,
    pub perplexity_video: f64,
}

const EVAL_MASK_SEED: u64 = 0x5EED_E7A1;

/// Evaluates every metric on `data` in inference mode. Masks come from a fixed
/// seed so repeated calls agree.
pub fn evaluate(model: &Model, config: &TrainConfig, data: &[PairedSample], batch_size: usize) -> Result<EvalMetrics> {
    if data.is_empty() {
        return Err(Error::Input("evaluation set is empty".into()));
    }
    let opts = ForwardOptions {
        dis: false,
        act: true,
        align: true,
        second_order: false,
        dis_negatives: None,
        ..config.joint_forward()
    };
    let opts = ForwardOptions { rec: true, ..opts };
    let mut rng = ChaCha8Rng::seed_from_u64(EVAL_MASK_SEED);
    let (mut rm, mut rv, mut vm, mut vv) = (0.0, 0.0, 0.0, 0.0);
    let (mut idx_m, mut idx_v) = (Vec::new(), Vec::new());
    let (mut vid_feats, mut mot_feats, mut maps) = (Vec::new(), Vec::new(), Vec::new());
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(batch_size.max(1)) {
        let batch = Batch::new(data, chunk, &model.config);
        let tape = Tape::new();
        let cx = eval_ctx(&tape, model);
        let out = model_forward(&cx, model, &batch, &opts, &mut rng)?;
        let w = chunk.len() as f64;
        let (m, v) = (out.motion.expect("motion branch"), out.video.expect("video branch"));
        rm += m.rec.expect("rec requested").item() * w;
        rv += v.rec.expect("rec requested").item() * w;
        vm += m.act.expect("act requested").item() * w;
        vv += v.act.expect("act requested").item() * w;
        idx_m.extend_from_slice(&m.quantized.indices);
        idx_v.extend_from_slice(&v.quantized.indices);
        let rows = |t: &humocon_autograd::Tensor| -> Vec<Vec<Vec<f64>>> {
            let s = t.shape();
            t.data().chunks(s[1] * s[2]).map(|seq| seq.chunks(s[2]).map(<[f64]>::to_vec).collect()).collect()
        };
        vid_feats.extend(rows(&v.aligned.expect("align requested").value()));
        mot_feats.extend(rows(&m.aligned.expect("align requested").value()));
        maps.extend(batch.align_maps);
    }
    let n = data.len() as f64;
    let retrieval = retrieval_from_features(&vid_feats, &mot_feats, &maps)?;
    let size = model.config.codebook_size;
    let (pm, pv) = (perplexity(&idx_m, size)?, perplexity(&idx_v, size)?);
    Ok(EvalMetrics {
        rec_mse: (rm + rv) / n,
        rec_motion: rm / n,
        rec_video: rv / n,
        velocity_mse: (vm + vv) / n,
        velocity_motion: vm / n,
        velocity_video: vv / n,
        retrieval_top1: retrieval.top1,
        retrieval_top5: retrieval.top5,
        perplexity: pm.min(pv),
        perplexity_motion: pm,
        perplexity_video: pv,
    })
}

/// Retrieval on held-out pairs.
pub fn retrieval_eval(model: &Model, config: &TrainConfig, data: &[PairedSample]) -> Result<RetrievalResult> {
    if data.iter().any(|s| s.align_map.is_empty()) {
        return Err(Error::Input("retrieval needs paired samples".into()));
    }
    let opts = ForwardOptions { rec: false, dis: false, act: false, align: true, mask: false, ..config.joint_forward() };
    let mut rng = ChaCha8Rng::seed_from_u64(EVAL_MASK_SEED);
    let (mut vid, mut mot, mut maps) = (Vec::new(), Vec::new(), Vec::new());
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(16) {
        let batch = Batch::new(data, chunk, &model.config);
        let tape = Tape::new();
        let cx = eval_ctx(&tape, model);
        let out = model_forward(&cx, model, &batch, &opts, &mut rng)?;
        for (feats, branch) in [(&mut vid, out.video), (&mut mot, out.motion)] {
            let t = branch.expect("both branches").aligned.expect("align requested").value();
            let s = t.shape().to_vec();
            feats.extend(t.data().chunks(s[1] * s[2]).map(|seq| seq.chunks(s[2]).map(<[f64]>::to_vec).collect::<Vec<_>>()));
        }
        maps.extend(batch.align_maps);
    }
    retrieval_from_features(&vid, &mot, &maps)
}
