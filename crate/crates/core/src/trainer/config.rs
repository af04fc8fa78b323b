//! Training configuration: TOML file, dotted `key=value` overrides, presets.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::alignment::AlignOptions;
use crate::error::{Error, Result};
use crate::infolosses::DisMode;
use crate::model::{ForwardOptions, ModelConfig};
use crate::synthkit::SceneSpec;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_dis: f64,
    pub lambda_act: f64,
    pub lambda_align: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_dis: 0.3, lambda_act: 0.1, lambda_align: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("lambda_dis", self.lambda_dis), ("lambda_act", self.lambda_act), ("lambda_align", self.lambda_align)] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and non-negative, got {w}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub iters: u64,
    pub lr: f64,
    pub micro_batch: usize,
    pub grad_accum_steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub rec: bool,
    pub dis: bool,
    pub act: bool,
    pub align: bool,
    pub weights: LossWeights,
    pub commitment: f64,
    pub second_order: bool,
    pub dis_mode: DisMode,
    pub tau_dis: f64,
    /// Score only this many non-assigned codes per micro-batch.
    pub dis_negatives: Option<usize>,
    pub align_temperature: f64,
    pub align_symmetric: bool,
    pub align_cross_batch: bool,
    pub align_literal: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            rec: true,
            dis: true,
            act: true,
            align: true,
            weights: LossWeights::default(),
            commitment: 0.25,
            second_order: true,
            dis_mode: DisMode::Multiclass,
            tau_dis: 0.1,
            dis_negatives: None,
            align_temperature: 0.07,
            align_symmetric: false,
            align_cross_batch: false,
            align_literal: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    /// Omits wall-clock fields from metrics so that identical runs produce
    /// identical streams.
    pub deterministic: bool,
    pub model: ModelConfig,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub loss: LossConfig,
    pub freeze_motion_codebook_stage2: bool,
}

impl TrainConfig {
    pub fn desk(scene: &SceneSpec) -> Self {
        Self {
            seed: 0,
            deterministic: true,
            model: ModelConfig::desk(scene),
            stage1: StageConfig { iters: 2000, lr: 1e-3, micro_batch: 8, grad_accum_steps: 1 },
            stage2: StageConfig { iters: 1000, lr: 3e-4, micro_batch: 8, grad_accum_steps: 1 },
            loss: LossConfig::default(),
            freeze_motion_codebook_stage2: false,
        }
    }

    /// 60K iterations at 1e-4, then 8K at 1e-5 with 16 × 8 accumulation.
    pub fn full_scale(scene: &SceneSpec) -> Self {
        Self {
            seed: 0,
            deterministic: true,
            model: ModelConfig::full_scale(scene),
            stage1: StageConfig { iters: 60_000, lr: 1e-4, micro_batch: 16, grad_accum_steps: 8 },
            stage2: StageConfig { iters: 8_000, lr: 1e-5, micro_batch: 16, grad_accum_steps: 8 },
            loss: LossConfig::default(),
            freeze_motion_codebook_stage2: false,
        }
    }

    pub fn preset(name: &str, scene: &SceneSpec) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk(scene)),
            "full-scale" => Ok(Self::full_scale(scene)),
            other => Err(Error::Config(format!("unknown preset {other:?} (expected desk or full-scale)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.weights.validate()?;
        for (name, s) in [("stage1", &self.stage1), ("stage2", &self.stage2)] {
            if !(s.lr > 0.0 && s.lr.is_finite()) {
                return Err(Error::Config(format!("{name}.lr must be positive, got {}", s.lr)));
            }
            if s.micro_batch == 0 || s.grad_accum_steps == 0 {
                return Err(Error::Config(format!("{name} micro_batch and grad_accum_steps must be positive")));
            }
        }
        let l = &self.loss;
        if !(l.commitment >= 0.0 && l.tau_dis > 0.0 && l.align_temperature > 0.0) {
            return Err(Error::Config("commitment must be >= 0 and temperatures positive".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// Options for a stage-2 (joint) forward pass.
    pub fn joint_forward(&self) -> ForwardOptions {
        let l = &self.loss;
        ForwardOptions {
            motion: true,
            video: true,
            rec: l.rec,
            dis: l.dis,
            act: l.act,
            align: l.align,
            mask: true,
            mask_ratio: self.model.mask_ratio,
            second_order: l.second_order,
            dis_mode: l.dis_mode,
            tau_dis: l.tau_dis,
            dis_negatives: l.dis_negatives,
            align_opts: AlignOptions {
                temperature: l.align_temperature,
                symmetric: l.align_symmetric,
                cross_batch: l.align_cross_batch,
                literal: l.align_literal,
            },
        }
    }

    /// Motion-only masked reconstruction.
    pub fn stage1_forward(&self) -> ForwardOptions {
        ForwardOptions { video: false, rec: true, dis: false, act: false, align: false, ..self.joint_forward() }
    }

    /// Loads a TOML file over the desk preset, then applies overrides.
    pub fn load(path: Option<&Path>, overrides: &[String], scene: &SceneSpec) -> Result<Self> {
        let mut value = toml::Value::try_from(Self::desk(scene)).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(path) = path {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let file: toml::Table = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            if let Some(toml::Value::String(name)) = file.get("preset") {
                value = toml::Value::try_from(Self::preset(name, scene)?).map_err(|e| Error::Config(e.to_string()))?;
            }
            let mut file = file;
            file.remove("preset");
            merge(&mut value, toml::Value::Table(file), "")?;
        }
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: Self = value.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }
}

fn merge(base: &mut toml::Value, over: toml::Value, path: &str) -> Result<()> {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                let sub = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &sub)?,
                    None if is_optional_key(&k) => {
                        b.insert(k, v);
                    }
                    None => return Err(Error::Config(format!("unknown config key {sub:?}"))),
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}

/// Keys whose default is absent and therefore missing from the base table.
fn is_optional_key(k: &str) -> bool {
    k == "dis_negatives"
}

/// `a.b.c=value`; `on`/`off` are booleans, anything else is parsed as a TOML
/// value and falls back to a bare string.
pub fn apply_override(value: &mut toml::Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let parsed = match raw.trim() {
        "on" => toml::Value::Boolean(true),
        "off" => toml::Value::Boolean(false),
        r => toml::from_str::<toml::Table>(&format!("v = {r}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(r.to_string())),
    };
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut cur = value;
    for (i, p) in parts.iter().enumerate() {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{key:?}: {p:?} is not inside a table")))?;
        if i + 1 == parts.len() {
            if !table.contains_key(*p) && !is_optional_key(p) {
                return Err(Error::Config(format!("unknown config key {key:?}")));
            }
            table.insert(p.to_string(), parsed);
            return Ok(());
        }
        cur = table.get_mut(*p).ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
    }
    unreachable!("split yields at least one part")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_apply_and_unknown_keys_fail() {
        let scene = SceneSpec::default();
        let cfg = TrainConfig::load(None, &["loss.align=off".into(), "stage1.iters=5".into(), "loss.dis_negatives=8".into()], &scene).unwrap();
        assert!(!cfg.loss.align);
        assert_eq!(cfg.stage1.iters, 5);
        assert_eq!(cfg.loss.dis_negatives, Some(8));
        assert!(TrainConfig::load(None, &["loss.bogus=1".into()], &scene).is_err());
        assert!(TrainConfig::load(None, &["stage1.lr=-1".into()], &scene).is_err());
    }

    #[test]
    fn desk_roundtrips_through_toml() {
        let scene = SceneSpec::default();
        let cfg = TrainConfig::desk(&scene);
        let dir = std::env::temp_dir().join(format!("humocon-cfg-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("c.toml");
        std::fs::write(&p, cfg.to_toml()).unwrap();
        assert_eq!(TrainConfig::load(Some(&p), &[], &scene).unwrap(), cfg);
        std::fs::write(&p, "preset = \"full-scale\"\n[stage2]\niters = 3\n").unwrap();
        let full = TrainConfig::load(Some(&p), &[], &scene).unwrap();
        assert_eq!((full.stage1.iters, full.stage2.iters, full.stage2.grad_accum_steps), (60_000, 3, 8));
        std::fs::write(&p, "[stage2]\nnope = 3\n").unwrap();
        assert!(TrainConfig::load(Some(&p), &[], &scene).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn negative_weight_rejected() {
        let w = LossWeights { lambda_dis: -0.1, ..Default::default() };
        assert!(w.validate().is_err());
    }
}
