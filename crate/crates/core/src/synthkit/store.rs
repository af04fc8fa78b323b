//! On-disk dataset container: `manifest.json` plus one little-endian binary
//! file per sample, each guarded by a SHA-256 recorded in the manifest.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{MotionSequence, PairedSample, SceneSpec, VelocityTarget, VideoClip};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: &str = "humocon-synth/1";
const MAGIC: &[u8; 4] = b"HMCS";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub file: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub spec: SceneSpec,
    pub seed: u64,
    pub count: usize,
    pub samples: Vec<SampleEntry>,
}

fn encode_sample(s: &PairedSample) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let put_f64 = |out: &mut Vec<u8>, xs: &[f64]| {
        out.extend_from_slice(&(xs.len() as u64).to_le_bytes());
        xs.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
    };
    put_f64(&mut out, &s.motion.poses);
    put_f64(&mut out, &s.velocity.delta_motion);
    for xs in [&s.video.data, &s.velocity.flow] {
        out.extend_from_slice(&(xs.len() as u64).to_le_bytes());
        xs.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
    }
    out.extend_from_slice(&(s.align_map.len() as u64).to_le_bytes());
    s.align_map.iter().for_each(|&a| out.extend_from_slice(&(a as u64).to_le_bytes()));
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn array<const W: usize>(&mut self) -> Option<Vec<[u8; W]>> {
        let len = u64::from_le_bytes(self.take(8)?.try_into().ok()?) as usize;
        let raw = self.take(len.checked_mul(W)?)?;
        Some(raw.chunks_exact(W).map(|c| c.try_into().unwrap()).collect())
    }
}

fn decode_sample(buf: &[u8], spec: &SceneSpec) -> Option<PairedSample> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return None;
    }
    let poses: Vec<f64> = r.array::<8>()?.into_iter().map(f64::from_le_bytes).collect();
    let delta: Vec<f64> = r.array::<8>()?.into_iter().map(f64::from_le_bytes).collect();
    let frames: Vec<f32> = r.array::<4>()?.into_iter().map(f32::from_le_bytes).collect();
    let flow: Vec<f32> = r.array::<4>()?.into_iter().map(f32::from_le_bytes).collect();
    let align: Vec<usize> = r.array::<8>()?.into_iter().map(|b| u64::from_le_bytes(b) as usize).collect();
    if r.pos != buf.len() {
        return None;
    }
    let f = spec.feature_dim();
    let (k, t, h, w) = (spec.seq_len_motion, spec.seq_len_video, spec.height, spec.width);
    if poses.len() != k * f || delta.len() != k * f || frames.len() != t * h * w * 3 || flow.len() != t * h * w * 2 || align.len() != t {
        return None;
    }
    Some(PairedSample {
        video: VideoClip { frames: t, height: h, width: w, channels: 3, data: frames },
        motion: MotionSequence { frames: k, num_joints: spec.num_joints, feature_dim: f, poses },
        velocity: VelocityTarget { delta_motion: delta, flow },
        align_map: align,
    })
}

pub fn write_dataset(samples: &[PairedSample], spec: &SceneSpec, dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    spec.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let bytes = encode_sample(s);
        let file = format!("sample_{i:06}.bin");
        let path = dir.join(&file);
        fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        entries.push(SampleEntry { file, bytes: bytes.len() as u64, sha256: hex::encode(Sha256::digest(&bytes)) });
    }
    let manifest = DatasetManifest {
        format: FORMAT_VERSION.to_string(),
        spec: spec.clone(),
        seed: spec.seed,
        count: samples.len(),
        samples: entries,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = dir.as_ref().join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::integrity(&path, e.to_string()))?;
    let found = value.get("format").and_then(|v| v.as_str()).unwrap_or("<missing>");
    if found != FORMAT_VERSION {
        return Err(Error::Version { path, expected: FORMAT_VERSION.into(), found: found.into() });
    }
    let manifest: DatasetManifest =
        serde_json::from_value(value).map_err(|e| Error::integrity(&path, e.to_string()))?;
    if manifest.count != manifest.samples.len() {
        return Err(Error::integrity(&path, "sample count does not match entries"));
    }
    Ok(manifest)
}

pub fn read_dataset(dir: impl AsRef<Path>) -> Result<(DatasetManifest, Vec<PairedSample>)> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    let mut samples = Vec::with_capacity(manifest.count);
    for entry in &manifest.samples {
        let path = dir.join(&entry.file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if bytes.len() as u64 != entry.bytes {
            return Err(Error::integrity(&path, format!("expected {} bytes, found {}", entry.bytes, bytes.len())));
        }
        if hex::encode(Sha256::digest(&bytes)) != entry.sha256 {
            return Err(Error::integrity(&path, "checksum mismatch"));
        }
        let sample = decode_sample(&bytes, &manifest.spec)
            .ok_or_else(|| Error::integrity(&path, "malformed sample payload"))?;
        samples.push(sample);
    }
    Ok((manifest, samples))
}

/// SHA-256 over the manifest and every sample file, in manifest order.
pub fn dataset_hash(dir: impl AsRef<Path>) -> Result<String> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    let mut h = Sha256::new();
    let mpath = dir.join("manifest.json");
    h.update(fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?);
    for entry in &manifest.samples {
        let p = dir.join(&entry.file);
        h.update(fs::read(&p).map_err(|e| Error::io(&p, e))?);
    }
    Ok(hex::encode(h.finalize()))
}
