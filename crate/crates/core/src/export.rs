//! Feature bundles for a downstream consumer: per-sample code indices,
//! quantised vectors and aligned projections, tied by hashes to the
//! checkpoint and config that produced them.
//!
//! Layout: `manifest.json` and `features.json` in one directory. The manifest
//! records the SHA-256 of `features.json`.

use std::fs;
use std::path::{Path, PathBuf};

use humocon_autograd::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{eval_ctx, model_forward, Batch, ForwardOptions};
use crate::synthkit::{PairedSample, SceneSpec};
use crate::trainer::{file_hash, TrainConfig, Trainer};

pub const EXPORT_VERSION: &str = "humocon-feat/1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const FEATURES_FILE: &str = "features.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportManifest {
    pub format: String,
    pub checkpoint_hash: String,
    pub config_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset_hash: Option<String>,
    pub samples: usize,
    pub codebook_size: usize,
    pub motion_code_dim: usize,
    pub video_code_dim: usize,
    pub align_dim: usize,
    pub features_sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleFeatures {
    /// Position in the exported dataset.
    pub index: usize,
    /// One code per motion frame.
    pub motion_indices: Vec<usize>,
    /// One code per video patch token, frame-major.
    pub video_indices: Vec<usize>,
    pub motion_quantized: Vec<Vec<f64>>,
    pub video_quantized: Vec<Vec<f64>>,
    /// Unit vectors in the shared space, one per motion frame.
    pub motion_aligned: Vec<Vec<f64>>,
    /// Unit vectors in the shared space, one per video frame.
    pub video_aligned: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExportBundle {
    pub manifest: ExportManifest,
    pub samples: Vec<SampleFeatures>,
}

fn rows(t: &Tensor, width: usize) -> Vec<Vec<f64>> {
    t.data().chunks(width).map(<[f64]>::to_vec).collect()
}

/// Top-level config keys whose values differ.
fn config_diff(a: &TrainConfig, b: &TrainConfig) -> Vec<String> {
    let (va, vb) = (serde_json::to_value(a), serde_json::to_value(b));
    let (Ok(serde_json::Value::Object(va)), Ok(serde_json::Value::Object(vb))) = (va, vb) else {
        return Vec::new();
    };
    let mut keys: Vec<String> = va.keys().chain(vb.keys()).filter(|k| va.get(*k) != vb.get(*k)).cloned().collect();
    keys.sort();
    keys.dedup();
    keys
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Encodes `data` with the checkpoint at `checkpoint` and writes the bundle
/// under `out`. When `expected` is given, its hash must equal the one the
/// checkpoint was trained with.
pub fn export_features(
    checkpoint: &Path,
    expected: Option<&TrainConfig>,
    scene: &SceneSpec,
    data: &[PairedSample],
    dataset_hash: Option<String>,
    out: &Path,
) -> Result<ExportBundle> {
    let trainer = Trainer::load(checkpoint)?;
    if let Some(cfg) = expected {
        let want = cfg.hash();
        if want != trainer.config_hash {
            let diff = config_diff(cfg, &trainer.config);
            return Err(Error::Config(format!(
                "checkpoint {} was trained with config {} but the requested config hashes to {}; differing sections: {}",
                checkpoint.display(),
                &trainer.config_hash[..12],
                &want[..12],
                if diff.is_empty() { "none at top level".into() } else { diff.join(", ") }
            )));
        }
    }
    let model = &trainer.model;
    model.config.check_scene(scene)?;
    let opts = ForwardOptions { rec: false, dis: false, act: false, align: true, mask: false, ..trainer.config.joint_forward() };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (dm, dv, da) = (model.config.motion.code_dim, model.config.video.code_dim, model.config.align_dim);
    let mut samples = Vec::with_capacity(data.len());
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(16) {
        let batch = Batch::new(data, chunk, &model.config);
        let tape = Tape::new();
        let cx = eval_ctx(&tape, model);
        let fo = model_forward(&cx, model, &batch, &opts, &mut rng)?;
        let (m, v) = (fo.motion.expect("motion branch"), fo.video.expect("video branch"));
        let (lm, lv) = (m.quantized.indices.len() / chunk.len(), v.quantized.indices.len() / chunk.len());
        let (ma, va) = (m.aligned.expect("align requested").value(), v.aligned.expect("align requested").value());
        let (fm, fv) = (ma.shape()[1], va.shape()[1]);
        for (j, &index) in chunk.iter().enumerate() {
            samples.push(SampleFeatures {
                index,
                motion_indices: m.quantized.indices[j * lm..(j + 1) * lm].to_vec(),
                video_indices: v.quantized.indices[j * lv..(j + 1) * lv].to_vec(),
                motion_quantized: rows(&m.quantized.vectors.narrow(0, j * lm, lm)?, dm),
                video_quantized: rows(&v.quantized.vectors.narrow(0, j * lv, lv)?, dv),
                motion_aligned: rows(&ma.narrow(0, j, 1)?, da).into_iter().take(fm).collect(),
                video_aligned: rows(&va.narrow(0, j, 1)?, da).into_iter().take(fv).collect(),
            });
        }
    }
    let manifest = ExportManifest {
        format: EXPORT_VERSION.into(),
        checkpoint_hash: file_hash(checkpoint)?,
        config_hash: trainer.config_hash.clone(),
        dataset_hash,
        samples: samples.len(),
        codebook_size: model.config.codebook_size,
        motion_code_dim: dm,
        video_code_dim: dv,
        align_dim: da,
        features_sha256: String::new(),
    };
    write_bundle(out, manifest, samples)
}

/// Writes `samples` with `manifest` under `out`, filling in the sample count
/// and content hash.
pub fn write_bundle(out: &Path, mut manifest: ExportManifest, samples: Vec<SampleFeatures>) -> Result<ExportBundle> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let features = serde_json::to_vec(&samples)?;
    manifest.samples = samples.len();
    manifest.features_sha256 = hex::encode(Sha256::digest(&features));
    write_atomic(&out.join(FEATURES_FILE), &features)?;
    write_atomic(&out.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(ExportBundle { manifest, samples })
}

/// Reads and validates a bundle: format, content hash, index ranges and
/// vector widths.
pub fn load_bundle(dir: impl AsRef<Path>) -> Result<ExportBundle> {
    let dir = dir.as_ref();
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: ExportManifest = serde_json::from_str(&text).map_err(|e| Error::integrity(&mpath, e.to_string()))?;
    if manifest.format != EXPORT_VERSION {
        return Err(Error::Version { path: mpath, found: manifest.format, expected: EXPORT_VERSION.into() });
    }
    let fpath: PathBuf = dir.join(FEATURES_FILE);
    let bytes = fs::read(&fpath).map_err(|e| Error::io(&fpath, e))?;
    if hex::encode(Sha256::digest(&bytes)) != manifest.features_sha256 {
        return Err(Error::integrity(&fpath, "content hash does not match the manifest"));
    }
    let samples: Vec<SampleFeatures> = serde_json::from_slice(&bytes).map_err(|e| Error::integrity(&fpath, e.to_string()))?;
    if samples.len() != manifest.samples {
        return Err(Error::integrity(&fpath, format!("{} samples, manifest says {}", samples.len(), manifest.samples)));
    }
    let n = manifest.codebook_size;
    for s in &samples {
        if s.motion_indices.iter().chain(&s.video_indices).any(|&k| k >= n) {
            return Err(Error::integrity(&fpath, format!("sample {} has a code index outside {n}", s.index)));
        }
        let widths_ok = s.motion_quantized.iter().all(|r| r.len() == manifest.motion_code_dim)
            && s.video_quantized.iter().all(|r| r.len() == manifest.video_code_dim)
            && s.motion_aligned.iter().chain(&s.video_aligned).all(|r| r.len() == manifest.align_dim)
            && s.motion_quantized.len() == s.motion_indices.len()
            && s.video_quantized.len() == s.video_indices.len();
        if !widths_ok {
            return Err(Error::integrity(&fpath, format!("sample {} has inconsistent shapes", s.index)));
        }
    }
    Ok(ExportBundle { manifest, samples })
}

/// Confirms the bundle was produced from this checkpoint file.
pub fn verify_source(bundle: &ExportBundle, checkpoint: &Path) -> Result<()> {
    let h = file_hash(checkpoint)?;
    if h != bundle.manifest.checkpoint_hash {
        return Err(Error::integrity(
            checkpoint,
            format!("bundle was exported from checkpoint {} but this file hashes to {}", &bundle.manifest.checkpoint_hash[..12], &h[..12]),
        ));
    }
    Ok(())
}
