//! Single-file checkpoint container.
//!
//! Layout: the line `humocon-ckpt/1\n`, a little-endian u64 header length, the
//! JSON header, a little-endian f64 payload holding every tensor in header
//! order, and a 32-byte SHA-256 of everything before it.

use std::fs;
use std::path::Path;

use humocon_autograd::{Adam, ParamId, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Trainer, TrainConfig};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::quantizer::Codebook;

pub const CHECKPOINT_VERSION: &str = "humocon-ckpt/1";

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CodebookMeta {
    decay: f64,
    laplace_eps: f64,
    cluster_size: Vec<f64>,
    steps_since_used: Vec<u64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct AdamMeta {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    /// (parameter name, step count) for parameters with optimizer state.
    steps: Vec<(String, u64)>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct RngState {
    seed: String,
    stream: u64,
    word_pos: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    config: TrainConfig,
    config_hash: String,
    stage: u8,
    step: u64,
    rng: RngState,
    codebooks: [CodebookMeta; 2],
    adam: AdamMeta,
    tensors: Vec<TensorEntry>,
}

fn rng_state(r: &ChaCha8Rng) -> RngState {
    RngState { seed: hex::encode(r.get_seed()), stream: r.get_stream(), word_pos: r.get_word_pos().to_string() }
}

fn restore_rng(s: &RngState) -> Option<ChaCha8Rng> {
    use rand::SeedableRng;
    let seed: [u8; 32] = hex::decode(&s.seed).ok()?.try_into().ok()?;
    let mut r = ChaCha8Rng::from_seed(seed);
    r.set_stream(s.stream);
    r.set_word_pos(s.word_pos.parse().ok()?);
    Some(r)
}

pub fn save_checkpoint(t: &Trainer, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut tensors = Vec::new();
    let mut payload: Vec<&Tensor> = Vec::new();
    for (name, tensor) in t.model.params.iter() {
        tensors.push(TensorEntry { name: format!("param/{name}"), shape: tensor.shape().to_vec() });
        payload.push(tensor);
    }
    let mut adam_steps = Vec::new();
    for id in t.model.params.ids() {
        if let Some((m, v, steps)) = t.adam.state(id) {
            let name = t.model.params.name(id);
            adam_steps.push((name.to_string(), steps));
            tensors.push(TensorEntry { name: format!("adam_m/{name}"), shape: m.shape().to_vec() });
            payload.push(m);
            tensors.push(TensorEntry { name: format!("adam_v/{name}"), shape: v.shape().to_vec() });
            payload.push(v);
        }
    }
    let mut meta = Vec::new();
    for (label, cb) in [("motion", &t.model.motion_codebook), ("video", &t.model.video_codebook)] {
        tensors.push(TensorEntry { name: format!("codebook/{label}/codes"), shape: cb.codes.shape().to_vec() });
        payload.push(&cb.codes);
        tensors.push(TensorEntry { name: format!("codebook/{label}/embed_sum"), shape: cb.ema_embed_sum.shape().to_vec() });
        payload.push(&cb.ema_embed_sum);
        meta.push(CodebookMeta {
            decay: cb.decay,
            laplace_eps: cb.laplace_eps,
            cluster_size: cb.ema_cluster_size.clone(),
            steps_since_used: cb.steps_since_used.clone(),
        });
    }
    let header = Header {
        format: CHECKPOINT_VERSION.into(),
        config: t.config.clone(),
        config_hash: t.config_hash.clone(),
        stage: t.stage,
        step: t.step,
        rng: rng_state(&t.rng),
        codebooks: meta.try_into().expect("two codebooks"),
        adam: AdamMeta { lr: t.adam.lr, beta1: t.adam.beta1, beta2: t.adam.beta2, eps: t.adam.eps, steps: adam_steps },
        tensors,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(json.len() + 64 + payload.iter().map(|t| t.numel() * 8).sum::<usize>());
    out.extend_from_slice(CHECKPOINT_VERSION.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in payload {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &out).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Trainer> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: &str| Error::integrity(path, reason);
    let nl = bytes.iter().position(|&b| b == b'\n').filter(|&i| i <= 64).ok_or_else(|| bad("missing format line"))?;
    let found = String::from_utf8_lossy(&bytes[..nl]).to_string();
    if found != CHECKPOINT_VERSION {
        if found.starts_with("humocon-ckpt/") {
            return Err(Error::Version { path: path.into(), expected: CHECKPOINT_VERSION.into(), found });
        }
        return Err(bad("not a checkpoint file"));
    }
    if bytes.len() < nl + 1 + 8 + 32 {
        return Err(bad("truncated"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(bad("checksum mismatch"));
    }
    let mut pos = nl + 1;
    let hlen = u64::from_le_bytes(body[pos..pos + 8].try_into().unwrap()) as usize;
    pos += 8;
    let hbytes = body.get(pos..pos.saturating_add(hlen)).ok_or_else(|| bad("header overruns file"))?;
    let header: Header = serde_json::from_slice(hbytes).map_err(|e| bad(&format!("header: {e}")))?;
    pos += hlen;
    let mut floats = body[pos..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    if body[pos..].len() % 8 != 0 {
        return Err(bad("payload is not a whole number of f64 values"));
    }
    let mut lookup = std::collections::HashMap::new();
    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        let data: Vec<f64> = floats.by_ref().take(n).collect();
        if data.len() != n {
            return Err(bad("payload shorter than header declares"));
        }
        lookup.insert(entry.name.clone(), Tensor::from_vec(&entry.shape, data));
    }
    if floats.next().is_some() {
        return Err(bad("payload longer than header declares"));
    }

    let config = header.config;
    let mut model = Model::new(&config.model, config.seed)?;
    let ids: Vec<ParamId> = model.params.ids().collect();
    for id in &ids {
        let name = model.params.name(*id).to_string();
        let t = lookup.remove(&format!("param/{name}")).ok_or_else(|| bad(&format!("missing parameter {name}")))?;
        if t.shape() != model.params.get(*id).shape() {
            return Err(bad(&format!("parameter {name} has shape {:?}", t.shape())));
        }
        *model.params.get_mut(*id) = t;
    }
    for (i, label) in ["motion", "video"].into_iter().enumerate() {
        let codes = lookup.remove(&format!("codebook/{label}/codes")).ok_or_else(|| bad("missing codebook"))?;
        let sum = lookup.remove(&format!("codebook/{label}/embed_sum")).ok_or_else(|| bad("missing codebook"))?;
        let m = &header.codebooks[i];
        let cb = Codebook {
            codes,
            ema_cluster_size: m.cluster_size.clone(),
            ema_embed_sum: sum,
            decay: m.decay,
            laplace_eps: m.laplace_eps,
            steps_since_used: m.steps_since_used.clone(),
        };
        if cb.ema_cluster_size.len() != cb.size() || cb.steps_since_used.len() != cb.size() {
            return Err(bad("codebook statistics do not match code count"));
        }
        *model.codebook_mut(if i == 0 { crate::backbones::Modality::Motion } else { crate::backbones::Modality::Video }) = cb;
    }
    let a = &header.adam;
    let mut adam = Adam::new(a.lr);
    adam.beta1 = a.beta1;
    adam.beta2 = a.beta2;
    adam.eps = a.eps;
    for (name, steps) in &a.steps {
        let id = model.params.find(name).ok_or_else(|| bad(&format!("optimizer state for unknown parameter {name}")))?;
        let m = lookup.remove(&format!("adam_m/{name}")).ok_or_else(|| bad("missing optimizer moment"))?;
        let v = lookup.remove(&format!("adam_v/{name}")).ok_or_else(|| bad("missing optimizer moment"))?;
        adam.set_state(id, m, v, *steps);
    }
    let rng = restore_rng(&header.rng).ok_or_else(|| bad("malformed rng state"))?;
    if config.hash() != header.config_hash {
        return Err(bad("stored config hash does not match stored config"));
    }
    Ok(Trainer { config, config_hash: header.config_hash, model, adam, stage: header.stage, step: header.step, rng, dump_dir: None })
}

/// SHA-256 of a file's bytes.
pub fn file_hash(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
