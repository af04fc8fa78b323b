//! Deterministic synthetic paired motion/video data with analytically known
//! velocities.
//!
//! A motion is a planar kinematic chain whose bone angles oscillate (or random
//! walk) over time. Video key frame `i` renders the pose at motion index
//! `r·i` as one additive Gaussian blob per joint. Joints that leave the image
//! are clipped silently: their blobs are simply partly or wholly off-canvas.

mod store;

pub use store::{dataset_hash, read_dataset, read_manifest, write_dataset, DatasetManifest, FORMAT_VERSION};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Distance between consecutive joints, in scene units.
pub const BONE_LENGTH: f64 = 0.22;

/// Flow is rasterised within this many blob sigmas of a joint.
pub const FLOW_RADIUS_SIGMAS: f64 = 3.0;

const PALETTE: [[f32; 3]; 6] = [
    [1.0, 0.25, 0.25],
    [0.25, 1.0, 0.25],
    [0.25, 0.25, 1.0],
    [1.0, 1.0, 0.25],
    [1.0, 0.25, 1.0],
    [0.25, 1.0, 1.0],
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MotionFamily {
    SinusoidalChain,
    RandomWalkChain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub num_joints: usize,
    /// K, motion frames.
    pub seq_len_motion: usize,
    /// T, video key frames.
    pub seq_len_video: usize,
    /// r, with K = r·T.
    pub frame_rate_ratio: usize,
    pub height: usize,
    pub width: usize,
    pub blob_sigma: f64,
    pub motion_family: MotionFamily,
    pub seed: u64,
    /// Upper bound on per-bone angle amplitude (radians).
    pub amplitude: f64,
    /// Upper bound on root drift speed (scene units per motion frame).
    pub drift: f64,
    /// Optional zero-padded motion feature width (defaults to 2·num_joints).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_dim: Option<usize>,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            num_joints: 5,
            seq_len_motion: 32,
            seq_len_video: 8,
            frame_rate_ratio: 4,
            height: 32,
            width: 32,
            blob_sigma: 1.2,
            motion_family: MotionFamily::SinusoidalChain,
            seed: 7,
            amplitude: 0.8,
            drift: 0.005,
            feature_dim: None,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_joints < 2 {
            return fail(format!("num_joints must be >= 2, got {}", self.num_joints));
        }
        if self.seq_len_video == 0 || self.frame_rate_ratio == 0 {
            return fail("seq_len_video and frame_rate_ratio must be positive".into());
        }
        if self.seq_len_motion != self.frame_rate_ratio * self.seq_len_video {
            return fail(format!(
                "K = {} must equal r·T = {}·{}",
                self.seq_len_motion, self.frame_rate_ratio, self.seq_len_video
            ));
        }
        if self.height < 16 || self.width < 16 {
            return fail(format!("image must be at least 16x16, got {}x{}", self.height, self.width));
        }
        if !(self.blob_sigma > 0.0) || !self.amplitude.is_finite() || !self.drift.is_finite() {
            return fail("blob_sigma must be positive; amplitude and drift finite".into());
        }
        if let Some(f) = self.feature_dim {
            if f < self.pose_dim() {
                return fail(format!("feature_dim {f} smaller than pose dim {}", self.pose_dim()));
            }
        }
        Ok(())
    }

    /// P = 2·num_joints.
    pub fn pose_dim(&self) -> usize {
        2 * self.num_joints
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim.unwrap_or_else(|| self.pose_dim())
    }

    pub fn align_map(&self) -> Vec<usize> {
        (0..self.seq_len_video).map(|i| i * self.frame_rate_ratio).collect()
    }

    /// Scene coordinates in [-1, 1] to (column, row) pixel coordinates.
    pub fn to_pixel(&self, x: f64, y: f64) -> (f64, f64) {
        ((x + 1.0) * 0.5 * (self.width - 1) as f64, (y + 1.0) * 0.5 * (self.height - 1) as f64)
    }

    /// Same spec with the per-sample seed for dataset entry `index`.
    pub fn for_sample(&self, index: usize) -> SceneSpec {
        SceneSpec { seed: sample_seed(self.seed, index), ..self.clone() }
    }
}

fn sample_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed ^ (index as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Sampled parameters of one kinematic chain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainParams {
    pub root: [f64; 2],
    pub drift: [f64; 2],
    /// Rest angle per bone; bone 0's is the global heading.
    pub rest: Vec<f64>,
    pub amplitude: Vec<f64>,
    pub freq: Vec<f64>,
    pub phase: Vec<f64>,
    /// Per-frame angle offsets (random-walk family only), `[frame][bone]`.
    pub walk: Option<Vec<Vec<f64>>>,
}

impl ChainParams {
    pub fn sample(spec: &SceneSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let bones = spec.num_joints - 1;
        let root = [rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2)];
        let dir: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let speed = spec.drift * rng.gen_range(0.0..1.0);
        let drift = [speed * dir.cos(), speed * dir.sin()];
        let mut rest = Vec::with_capacity(bones);
        let mut amplitude = Vec::with_capacity(bones);
        let mut freq = Vec::with_capacity(bones);
        let mut phase = Vec::with_capacity(bones);
        for b in 0..bones {
            rest.push(if b == 0 { rng.gen_range(0.0..std::f64::consts::TAU) } else { rng.gen_range(-0.6..0.6) });
            amplitude.push(spec.amplitude * rng.gen_range(0.3..1.0));
            freq.push(rng.gen_range(0.03..0.15));
            phase.push(rng.gen_range(0.0..std::f64::consts::TAU));
        }
        let walk = match spec.motion_family {
            MotionFamily::SinusoidalChain => None,
            MotionFamily::RandomWalkChain => {
                let step = 0.15 * spec.amplitude;
                let mut angles = vec![0.0; bones];
                let mut frames = Vec::with_capacity(spec.seq_len_motion);
                for _ in 0..spec.seq_len_motion {
                    frames.push(angles.clone());
                    for a in angles.iter_mut() {
                        if step > 0.0 {
                            *a += rng.gen_range(-step..step);
                        }
                    }
                }
                Some(frames)
            }
        };
        Self { root, drift, rest, amplitude, freq, phase, walk }
    }

    /// Bone angle offsets θ_b(t).
    pub fn angles(&self, t: usize) -> Vec<f64> {
        match &self.walk {
            Some(frames) => frames[t].clone(),
            None => (0..self.rest.len())
                .map(|b| self.amplitude[b] * (self.freq[b] * t as f64 + self.phase[b]).sin())
                .collect(),
        }
    }

    /// Joint positions `[x0, y0, x1, y1, ...]` at motion frame `t`.
    pub fn pose(&self, t: usize) -> Vec<f64> {
        let theta = self.angles(t);
        let mut x = self.root[0] + self.drift[0] * t as f64;
        let mut y = self.root[1] + self.drift[1] * t as f64;
        let mut out = vec![x, y];
        let mut heading = 0.0;
        for (rest, th) in self.rest.iter().zip(&theta) {
            heading += rest + th;
            x += BONE_LENGTH * heading.cos();
            y += BONE_LENGTH * heading.sin();
            out.push(x);
            out.push(y);
        }
        out
    }
}

/// K × F joint coordinates, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionSequence {
    pub frames: usize,
    pub num_joints: usize,
    pub feature_dim: usize,
    pub poses: Vec<f64>,
}

impl MotionSequence {
    pub fn pose(&self, k: usize) -> &[f64] {
        &self.poses[k * self.feature_dim..(k + 1) * self.feature_dim]
    }

    pub fn joint(&self, k: usize, j: usize) -> (f64, f64) {
        let p = self.pose(k);
        (p[2 * j], p[2 * j + 1])
    }
}

/// T × H × W × 3 intensities in [0, 1].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoClip {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl VideoClip {
    pub fn frame(&self, i: usize) -> &[f32] {
        let n = self.height * self.width * self.channels;
        &self.data[i * n..(i + 1) * n]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VelocityTarget {
    /// K × F backward differences, first row zero.
    pub delta_motion: Vec<f64>,
    /// T × H × W × 2 pixel displacements (column, row), first frame zero.
    pub flow: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedSample {
    pub video: VideoClip,
    pub motion: MotionSequence,
    pub velocity: VelocityTarget,
    pub align_map: Vec<usize>,
}

pub fn generate_motion(spec: &SceneSpec) -> Result<MotionSequence> {
    spec.validate()?;
    let chain = ChainParams::sample(spec);
    let f = spec.feature_dim();
    let mut poses = vec![0.0; spec.seq_len_motion * f];
    for t in 0..spec.seq_len_motion {
        let p = chain.pose(t);
        poses[t * f..t * f + p.len()].copy_from_slice(&p);
    }
    Ok(MotionSequence { frames: spec.seq_len_motion, num_joints: spec.num_joints, feature_dim: f, poses })
}

fn check_motion(motion: &MotionSequence, spec: &SceneSpec) -> Result<()> {
    spec.validate()?;
    if motion.frames != spec.seq_len_motion
        || motion.num_joints != spec.num_joints
        || motion.poses.len() != motion.frames * motion.feature_dim
        || motion.feature_dim < 2 * motion.num_joints
    {
        return Err(Error::Config(format!(
            "motion ({} frames, {} joints) inconsistent with spec ({} frames, {} joints)",
            motion.frames, motion.num_joints, spec.seq_len_motion, spec.num_joints
        )));
    }
    Ok(())
}

/// Renders blobs at `(column, row)` pixel positions into an H × W × 3 image.
pub fn render_pose(joints_px: &[(f64, f64)], height: usize, width: usize, sigma: f64) -> Vec<f32> {
    let mut img = vec![0.0f32; height * width * 3];
    let inv = 1.0 / (2.0 * sigma * sigma);
    for (j, &(cx, cy)) in joints_px.iter().enumerate() {
        let color = PALETTE[j % PALETTE.len()];
        for row in 0..height {
            let dy = row as f64 - cy;
            for col in 0..width {
                let dx = col as f64 - cx;
                let v = (-(dx * dx + dy * dy) * inv).exp() as f32;
                let px = &mut img[(row * width + col) * 3..][..3];
                for c in 0..3 {
                    px[c] += v * color[c];
                }
            }
        }
    }
    for v in img.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    img
}

fn joints_px(motion: &MotionSequence, spec: &SceneSpec, k: usize) -> Vec<(f64, f64)> {
    (0..motion.num_joints)
        .map(|j| {
            let (x, y) = motion.joint(k, j);
            spec.to_pixel(x, y)
        })
        .collect()
}

pub fn render_frames(motion: &MotionSequence, spec: &SceneSpec) -> Result<VideoClip> {
    check_motion(motion, spec)?;
    let mut data = Vec::with_capacity(spec.seq_len_video * spec.height * spec.width * 3);
    for k in spec.align_map() {
        data.extend(render_pose(&joints_px(motion, spec, k), spec.height, spec.width, spec.blob_sigma));
    }
    Ok(VideoClip { frames: spec.seq_len_video, height: spec.height, width: spec.width, channels: 3, data })
}

/// Dense flow at the destination frame: pixels within `3·sigma` of a joint take
/// that joint's displacement (nearest joint wins), zero elsewhere.
pub fn rasterize_flow(
    prev_px: &[(f64, f64)],
    cur_px: &[(f64, f64)],
    height: usize,
    width: usize,
    sigma: f64,
) -> Vec<f32> {
    let radius2 = (FLOW_RADIUS_SIGMAS * sigma).powi(2);
    let mut flow = vec![0.0f32; height * width * 2];
    for row in 0..height {
        for col in 0..width {
            let mut best: Option<(f64, usize)> = None;
            for (j, &(cx, cy)) in cur_px.iter().enumerate() {
                let d2 = (col as f64 - cx).powi(2) + (row as f64 - cy).powi(2);
                if d2 <= radius2 && best.map_or(true, |(b, _)| d2 < b) {
                    best = Some((d2, j));
                }
            }
            if let Some((_, j)) = best {
                let o = (row * width + col) * 2;
                flow[o] = (cur_px[j].0 - prev_px[j].0) as f32;
                flow[o + 1] = (cur_px[j].1 - prev_px[j].1) as f32;
            }
        }
    }
    flow
}

pub fn compute_velocity(motion: &MotionSequence, spec: &SceneSpec) -> Result<VelocityTarget> {
    check_motion(motion, spec)?;
    let f = motion.feature_dim;
    let mut delta_motion = vec![0.0; motion.poses.len()];
    for k in 1..motion.frames {
        for c in 0..f {
            delta_motion[k * f + c] = motion.poses[k * f + c] - motion.poses[(k - 1) * f + c];
        }
    }
    let plane = spec.height * spec.width * 2;
    let mut flow = vec![0.0f32; spec.seq_len_video * plane];
    let align = spec.align_map();
    for i in 1..spec.seq_len_video {
        let prev = joints_px(motion, spec, align[i - 1]);
        let cur = joints_px(motion, spec, align[i]);
        let fl = rasterize_flow(&prev, &cur, spec.height, spec.width, spec.blob_sigma);
        flow[i * plane..(i + 1) * plane].copy_from_slice(&fl);
    }
    Ok(VelocityTarget { delta_motion, flow })
}

/// Backward bilinear warp: `out(p) = prev(p - flow(p))`, zero outside the image.
pub fn warp_frame(prev: &[f32], flow: &[f32], height: usize, width: usize, channels: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; height * width * channels];
    let sample = |r: isize, c: isize, ch: usize| -> f64 {
        if r < 0 || c < 0 || r >= height as isize || c >= width as isize {
            0.0
        } else {
            prev[(r as usize * width + c as usize) * channels + ch] as f64
        }
    };
    for row in 0..height {
        for col in 0..width {
            let o = (row * width + col) * 2;
            let sx = col as f64 - flow[o] as f64;
            let sy = row as f64 - flow[o + 1] as f64;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            for ch in 0..channels {
                let v = sample(y0, x0, ch) * (1.0 - fx) * (1.0 - fy)
                    + sample(y0, x0 + 1, ch) * fx * (1.0 - fy)
                    + sample(y0 + 1, x0, ch) * (1.0 - fx) * fy
                    + sample(y0 + 1, x0 + 1, ch) * fx * fy;
                out[(row * width + col) * channels + ch] = v as f32;
            }
        }
    }
    out
}

pub fn generate_sample(spec: &SceneSpec) -> Result<PairedSample> {
    let motion = generate_motion(spec)?;
    let video = render_frames(&motion, spec)?;
    let velocity = compute_velocity(&motion, spec)?;
    Ok(PairedSample { video, motion, velocity, align_map: spec.align_map() })
}

/// `count` samples; entry `i` is generated from `spec.for_sample(i)`.
pub fn generate_dataset(spec: &SceneSpec, count: usize) -> Result<Vec<PairedSample>> {
    spec.validate()?;
    (0..count).map(|i| generate_sample(&spec.for_sample(i))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_amplitude_and_drift_is_static() {
        let spec = SceneSpec { amplitude: 0.0, drift: 0.0, ..SceneSpec::default() };
        let m = generate_motion(&spec).unwrap();
        for k in 1..m.frames {
            assert_eq!(m.pose(k), m.pose(0));
        }
        let v = compute_velocity(&m, &spec).unwrap();
        assert!(v.delta_motion.iter().all(|&d| d == 0.0));
        assert!(v.flow.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SceneSpec { seed: 99, ..SceneSpec::default() };
        assert_eq!(generate_sample(&spec).unwrap(), generate_sample(&spec).unwrap());
        let walk = SceneSpec { motion_family: MotionFamily::RandomWalkChain, ..spec };
        assert_eq!(generate_motion(&walk).unwrap(), generate_motion(&walk).unwrap());
    }

    #[test]
    fn inconsistent_rates_rejected() {
        let spec = SceneSpec { seq_len_motion: 31, ..SceneSpec::default() };
        assert!(matches!(generate_motion(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn empty_chain_rejected() {
        let spec = SceneSpec { num_joints: 0, ..SceneSpec::default() };
        let motion = MotionSequence { frames: 32, num_joints: 0, feature_dim: 0, poses: vec![] };
        assert!(matches!(render_frames(&motion, &spec), Err(Error::Config(_))));
    }

    #[test]
    fn single_blob_peaks_at_center() {
        let img = render_pose(&[(16.0, 16.0)], 33, 33, 2.0);
        let at = |r: usize, c: usize| img[(r * 33 + c) * 3];
        let peak = (0..33 * 33).map(|i| img[i * 3]).fold(0.0f32, f32::max);
        assert_eq!(at(16, 16), peak);
    }

    #[test]
    fn align_map_is_strided() {
        let spec = SceneSpec::default();
        assert_eq!(spec.align_map(), vec![0, 4, 8, 12, 16, 20, 24, 28]);
    }

    #[test]
    fn feature_dim_override_pads_with_zeros() {
        let spec = SceneSpec { feature_dim: Some(263), ..SceneSpec::default() };
        let m = generate_motion(&spec).unwrap();
        assert_eq!(m.pose(3).len(), 263);
        assert!(m.pose(3)[10..].iter().all(|&v| v == 0.0));
    }
}
