//! Query/key view generation for both modalities.
//!
//! Within one view the RGB and pose streams share their temporal indices;
//! the query and key views are drawn independently with the same settings.

use ndarray::{Array3, Array4, Axis};
use rand::Rng as _;

use crate::corpus::{PoseSequence, RgbClip, Sample};
use crate::error::Result;
use crate::mpm::{self, LatentCodec, MaskRule};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct RgbAugment {
    /// Range of the crop's area fraction; `(1, 1)` disables cropping.
    pub crop_scale: (f64, f64),
    pub flip_prob: f64,
    /// Max brightness shift and contrast deviation; 0 disables jitter.
    pub jitter_strength: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoseAugment {
    /// Rotation angle is drawn from `[-range, range]` degrees.
    pub rotation_range_deg: f64,
    pub scale_range: (f64, f64),
    pub joint_mask_prob: f64,
    pub flip_prob: f64,
}

/// Which views are eligible for motion-preserving masking.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MpmViews {
    Both,
    Query,
    Key,
    Neither,
}

impl MpmViews {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "both" => Self::Both,
            "query" => Self::Query,
            "key" => Self::Key,
            "none" => Self::Neither,
            _ => return None,
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Both => "both",
            Self::Query => "query",
            Self::Key => "key",
            Self::Neither => "none",
        }
    }

    fn covers(self, query: bool) -> bool {
        match self {
            Self::Both => true,
            Self::Query => query,
            Self::Key => !query,
            Self::Neither => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    /// Lower bound of the temporal crop, as a fraction of the raw length.
    pub crop_lower: f64,
    /// Frames sampled from the temporal crop.
    pub k: usize,
    /// Frames consumed by the encoders.
    pub t_model: usize,
    pub rgb: RgbAugment,
    pub pose: PoseAugment,
    pub mpm_alpha: f64,
    pub mpm_rule: MaskRule,
    pub mpm_views: MpmViews,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_lower: 0.1,
            k: 16,
            t_model: 8,
            rgb: RgbAugment {
                crop_scale: (0.6, 1.0),
                flip_prob: 0.5,
                jitter_strength: 0.3,
            },
            pose: PoseAugment {
                rotation_range_deg: 15.0,
                scale_range: (0.8, 1.2),
                joint_mask_prob: 0.05,
                flip_prob: 0.5,
            },
            mpm_alpha: 0.2,
            mpm_rule: MaskRule::absolute(0.5),
            mpm_views: MpmViews::Both,
        }
    }
}

impl AugmentConfig {
    /// Every augmentation disabled and the crop pinned to the full sequence.
    pub fn identity(t: usize) -> Self {
        Self {
            crop_lower: 1.0,
            k: t,
            t_model: t,
            rgb: RgbAugment {
                crop_scale: (1.0, 1.0),
                flip_prob: 0.0,
                jitter_strength: 0.0,
            },
            pose: PoseAugment {
                rotation_range_deg: 0.0,
                scale_range: (1.0, 1.0),
                joint_mask_prob: 0.0,
                flip_prob: 0.0,
            },
            mpm_alpha: 0.0,
            mpm_rule: MaskRule::absolute(0.0),
            mpm_views: MpmViews::Neither,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(crate::Error::Invalid(m.to_string()));
        if !(self.crop_lower > 0.0 && self.crop_lower <= 1.0) {
            return bad("crop_lower must lie in (0, 1]");
        }
        if self.t_model == 0 || self.k < self.t_model {
            return bad("need k >= t_model >= 1");
        }
        let probs = [
            self.rgb.flip_prob,
            self.pose.flip_prob,
            self.pose.joint_mask_prob,
            self.mpm_alpha,
        ];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return bad("probabilities must lie in [0, 1]");
        }
        let (lo, hi) = self.rgb.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return bad("crop_scale must satisfy 0 < lo <= hi <= 1");
        }
        let (lo, hi) = self.pose.scale_range;
        if !(lo > 0.0 && lo <= hi) {
            return bad("pose scale_range must satisfy 0 < lo <= hi");
        }
        if self.mpm_rule.p < 0.0 {
            return bad("mpm_p must be non-negative");
        }
        Ok(())
    }
}

/// `k` non-decreasing frame indices covering a random crop whose length is
/// uniform on `[ceil(l * t_raw), t_raw]`.
pub fn temporal_crop_indices(t_raw: usize, l: f64, k: usize, rng: &mut Rng) -> Vec<usize> {
    if t_raw <= 1 {
        return vec![0; k];
    }
    let min_len = ((l * t_raw as f64).ceil() as usize).clamp(1, t_raw);
    let len = rng.gen_range(min_len..=t_raw);
    let start = rng.gen_range(0..=t_raw - len);
    (0..k).map(|i| start + i * len / k).collect()
}

/// Deterministic uniform resampling of `indices` down to `n` entries.
pub fn subsample(indices: &[usize], n: usize) -> Vec<usize> {
    (0..n).map(|i| indices[i * indices.len() / n]).collect()
}

/// Evaluation-time frame indices: `n` uniformly spaced over the whole clip.
pub fn uniform_indices(t_raw: usize, n: usize) -> Vec<usize> {
    (0..n).map(|i| i * t_raw / n).collect()
}

pub fn gather_clip(clip: &RgbClip, idx: &[usize]) -> RgbClip {
    RgbClip::from_trusted(clip.frames().select(Axis(0), idx))
}

pub fn gather_pose(pose: &PoseSequence, idx: &[usize]) -> PoseSequence {
    PoseSequence::from_trusted(pose.joints().select(Axis(0), idx))
}

fn bilinear(frame: &ndarray::ArrayView3<'_, f32>, y: f64, x: f64, c: usize) -> f32 {
    let (h, w) = (frame.shape()[0], frame.shape()[1]);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = ((y - y0 as f64) as f32, (x - x0 as f64) as f32);
    let top = frame[[y0, x0, c]] * (1.0 - fx) + frame[[y0, x1, c]] * fx;
    let bot = frame[[y1, x0, c]] * (1.0 - fx) + frame[[y1, x1, c]] * fx;
    top * (1.0 - fy) + bot * fy
}

/// Crops the same window from every frame and resizes it back.
fn resized_crop(frames: &Array4<f32>, scale: f64, oy: f64, ox: f64) -> Array4<f32> {
    let (t, h, w, _) = frames.dim();
    let side = scale.sqrt();
    let (ch, cw) = (side * h as f64, side * w as f64);
    let y0 = oy * (h as f64 - ch);
    let x0 = ox * (w as f64 - cw);
    let mut out = Array4::<f32>::zeros((t, h, w, 3));
    for ti in 0..t {
        let frame = frames.index_axis(Axis(0), ti);
        for y in 0..h {
            let sy = y0 + (y as f64 + 0.5) * ch / h as f64 - 0.5;
            for x in 0..w {
                let sx = x0 + (x as f64 + 0.5) * cw / w as f64 - 0.5;
                for c in 0..3 {
                    out[[ti, y, x, c]] = bilinear(&frame, sy, sx, c);
                }
            }
        }
    }
    out
}

/// Crop, flip, color jitter, then (with probability `mpm_alpha`, when a
/// codec is supplied) motion-preserving masking.
pub fn augment_rgb(clip: &RgbClip, cfg: &AugmentConfig, rng: &mut Rng, codec: Option<&LatentCodec>) -> Result<RgbClip> {
    let a = &cfg.rgb;
    let mut frames = clip.frames().clone();
    let (lo, hi) = a.crop_scale;
    if lo < 1.0 {
        let scale = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        let (oy, ox) = (rng.gen::<f64>(), rng.gen::<f64>());
        frames = resized_crop(&frames, scale, oy, ox);
    }
    if rng.gen_bool(a.flip_prob) {
        frames.invert_axis(Axis(2));
        frames = frames.as_standard_layout().into_owned();
    }
    if a.jitter_strength > 0.0 {
        let j = a.jitter_strength;
        let brightness = rng.gen_range(-j..=j) as f32 * 0.5;
        let contrast = 1.0 + rng.gen_range(-j..=j) as f32;
        let mean = frames.mean().unwrap_or(0.0);
        frames.mapv_inplace(|v| ((v - mean) * contrast + mean + brightness).clamp(0.0, 1.0));
    }
    let out = RgbClip::from_trusted(frames);
    match codec {
        Some(codec) if cfg.mpm_alpha > 0.0 => {
            // One draw gates both derivation and application.
            if rng.gen_bool(cfg.mpm_alpha) {
                let m = mpm::run_mpm(&out, codec, &cfg.mpm_rule)?;
                mpm::masked(&out, &m.mask)
            } else {
                Ok(out)
            }
        }
        _ => Ok(out),
    }
}

/// Rotation (degrees) and scaling of `x, y` about the confidence-weighted
/// centroid of the whole sequence. Masked joints stay at zero.
pub fn rotate_scale_pose(pose: &PoseSequence, angle_deg: f64, scale: f64) -> PoseSequence {
    let j = pose.joints();
    let (mut cx, mut cy, mut n) = (0.0f64, 0.0f64, 0.0f64);
    for p in j.rows() {
        if p[2] > 0.0 {
            cx += p[0] as f64;
            cy += p[1] as f64;
            n += 1.0;
        }
    }
    if n == 0.0 {
        return pose.clone();
    }
    let (cx, cy) = (cx / n, cy / n);
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let mut out: Array3<f32> = j.clone();
    for mut p in out.rows_mut() {
        if p[2] > 0.0 {
            let (dx, dy) = (p[0] as f64 - cx, p[1] as f64 - cy);
            p[0] = (cx + scale * (cos * dx - sin * dy)) as f32;
            p[1] = (cy + scale * (sin * dx + cos * dy)) as f32;
        }
    }
    PoseSequence::from_trusted(out)
}

/// Rotation, scaling, joint masking and horizontal mirroring.
pub fn augment_pose(pose: &PoseSequence, cfg: &AugmentConfig, rng: &mut Rng) -> PoseSequence {
    let a = &cfg.pose;
    let angle = if a.rotation_range_deg > 0.0 {
        rng.gen_range(-a.rotation_range_deg..=a.rotation_range_deg)
    } else {
        0.0
    };
    let (lo, hi) = a.scale_range;
    let scale = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    let mut out = if angle != 0.0 || scale != 1.0 {
        rotate_scale_pose(pose, angle, scale).into_inner()
    } else {
        pose.joints().clone()
    };
    if a.joint_mask_prob > 0.0 {
        for j in 0..out.shape()[1] {
            if rng.gen_bool(a.joint_mask_prob) {
                out.index_axis_mut(Axis(1), j).fill(0.0);
            }
        }
    }
    if rng.gen_bool(a.flip_prob) {
        for mut p in out.rows_mut() {
            if p[2] > 0.0 {
                p[0] = 1.0 - p[0];
            }
        }
    }
    PoseSequence::from_trusted(out)
}

/// One augmented view of both streams plus the frame indices it used.
#[derive(Clone, Debug)]
pub struct View {
    pub rgb: RgbClip,
    pub pose: PoseSequence,
    pub indices: Vec<usize>,
}

/// Query and key views of one sample.
#[derive(Clone, Debug)]
pub struct Views {
    pub query: View,
    pub key: View,
}

fn make_view(sample: &Sample, cfg: &AugmentConfig, rng: &mut Rng, codec: Option<&LatentCodec>, query: bool) -> Result<View> {
    let crop = temporal_crop_indices(sample.clip.len(), cfg.crop_lower, cfg.k, rng);
    // Spatial augmentations act frame-wise, so they run after subsampling.
    let indices = subsample(&crop, cfg.t_model);
    let codec = codec.filter(|_| cfg.mpm_views.covers(query));
    let rgb = augment_rgb(&gather_clip(&sample.clip, &indices), cfg, rng, codec)?;
    let pose = augment_pose(&gather_pose(&sample.pose, &indices), cfg, rng);
    Ok(View { rgb, pose, indices })
}

pub fn make_views(sample: &Sample, cfg: &AugmentConfig, rng: &mut Rng, codec: Option<&LatentCodec>) -> Result<Views> {
    let query = make_view(sample, cfg, rng, codec, true)?;
    let key = make_view(sample, cfg, rng, codec, false)?;
    Ok(Views { query, key })
}

/// A single augmented view without motion-preserving masking, as used for
/// supervised fine-tuning.
pub fn train_view(sample: &Sample, cfg: &AugmentConfig, rng: &mut Rng) -> Result<View> {
    make_view(sample, cfg, rng, None, true)
}

/// Deterministic evaluation view: uniform frames, no spatial augmentation.
pub fn eval_view(sample: &Sample, t_model: usize) -> View {
    let indices = uniform_indices(sample.clip.len(), t_model);
    View {
        rgb: gather_clip(&sample.clip, &indices),
        pose: gather_pose(&sample.pose, &indices),
        indices,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, CorpusSpec};
    use crate::rng::stream;

    fn sample() -> Sample {
        let spec = CorpusSpec {
            num_classes: 1,
            samples_per_class: 1,
            eval_samples_per_class: 0,
            t_raw: 16,
            height: 16,
            width: 16,
            eval_signers: 0,
            ..CorpusSpec::default()
        };
        generate_corpus(&spec).unwrap().remove(0)
    }

    #[test]
    fn crop_indices_in_range() {
        let mut r = stream(0, &[]);
        for _ in 0..500 {
            let idx = temporal_crop_indices(100, 0.1, 64, &mut r);
            assert_eq!(idx.len(), 64);
            assert!(idx.windows(2).all(|w| w[0] <= w[1]));
            assert!(idx.iter().all(|&i| i < 100));
            let span = idx[63] - idx[0] + 1;
            assert!(span <= 100);
        }
        assert_eq!(temporal_crop_indices(1, 0.3, 4, &mut r), vec![0, 0, 0, 0]);
        for _ in 0..20 {
            assert_eq!(temporal_crop_indices(10, 1.0, 10, &mut r), (0..10).collect::<Vec<_>>());
        }
    }

    #[test]
    fn crop_length_reaches_lower_bound() {
        // With l = 0.1 the shortest crop is 10 frames; 10 indices from a
        // 10-frame crop are consecutive.
        let mut r = stream(1, &[]);
        let mut seen_short = false;
        for _ in 0..2000 {
            let idx = temporal_crop_indices(100, 0.1, 10, &mut r);
            if idx[9] - idx[0] == 9 {
                seen_short = true;
            }
            assert!(idx[9] - idx[0] >= 9);
        }
        assert!(seen_short);
    }

    #[test]
    fn identity_config_is_identity() {
        let s = sample();
        let cfg = AugmentConfig::identity(16);
        let mut r = stream(2, &[]);
        let v = make_views(&s, &cfg, &mut r, None).unwrap();
        assert_eq!(v.query.rgb, s.clip);
        assert_eq!(v.key.rgb, s.clip);
        assert_eq!(v.query.pose, s.pose);
        assert_eq!(v.key.pose, s.pose);
    }

    #[test]
    fn flip_mirrors_width() {
        let s = sample();
        let mut cfg = AugmentConfig::identity(16);
        cfg.rgb.flip_prob = 1.0;
        let out = augment_rgb(&s.clip, &cfg, &mut stream(3, &[]), None).unwrap();
        let mut expect = s.clip.frames().clone();
        expect.invert_axis(Axis(2));
        assert_eq!(out.frames(), &expect);
    }

    #[test]
    fn mpm_with_all_channels_kept_is_identity() {
        let s = sample();
        let mut cfg = AugmentConfig::identity(16);
        cfg.mpm_alpha = 1.0;
        cfg.mpm_views = MpmViews::Both;
        let codec = LatentCodec::new(16, 16, 0);
        let out = augment_rgb(&s.clip, &cfg, &mut stream(4, &[]), Some(&codec)).unwrap();
        assert_eq!(out, s.clip);
        cfg.mpm_rule = MaskRule::absolute(0.05);
        let masked = augment_rgb(&s.clip, &cfg, &mut stream(4, &[]), Some(&codec)).unwrap();
        assert_ne!(masked, s.clip);
    }

    #[test]
    fn pose_augment_edge_cases() {
        let s = sample();
        let cfg = AugmentConfig::identity(16);
        assert_eq!(augment_pose(&s.pose, &cfg, &mut stream(5, &[])), s.pose);
        let full_turn = rotate_scale_pose(&s.pose, 360.0, 1.0);
        for (a, b) in full_turn.joints().iter().zip(s.pose.joints()) {
            assert!((a - b).abs() < 1e-5);
        }
        let mut all_masked = cfg.clone();
        all_masked.pose.joint_mask_prob = 1.0;
        let z = augment_pose(&s.pose, &all_masked, &mut stream(5, &[]));
        assert!(z.joints().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pose_augment_preserves_confidence_and_shape() {
        let s = sample();
        let cfg = AugmentConfig::default();
        let out = augment_pose(&s.pose, &cfg, &mut stream(6, &[]));
        assert_eq!(out.joints().shape(), s.pose.joints().shape());
        for (a, b) in out.joints().rows().into_iter().zip(s.pose.joints().rows()) {
            assert!(a[2] == b[2] || a.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn views_share_indices_and_differ_across_draws() {
        let s = sample();
        let cfg = AugmentConfig {
            k: 8,
            t_model: 4,
            ..AugmentConfig::default()
        };
        let mut differ = false;
        for i in 0..100 {
            let v = make_views(&s, &cfg, &mut stream(7, &[i]), None).unwrap();
            assert_eq!(v.query.rgb.len(), 4);
            assert_eq!(v.query.pose.frames(), 4);
            assert_eq!(v.key.rgb.len(), 4);
            differ |= v.query.indices != v.key.indices;
        }
        assert!(differ);
        let a = make_views(&s, &cfg, &mut stream(8, &[]), None).unwrap();
        let b = make_views(&s, &cfg, &mut stream(8, &[]), None).unwrap();
        assert_eq!(a.query.rgb, b.query.rgb);
        assert_eq!(a.key.pose, b.key.pose);
    }

    #[test]
    fn augmented_rgb_stays_in_range() {
        let s = sample();
        let cfg = AugmentConfig {
            mpm_alpha: 1.0,
            ..AugmentConfig::default()
        };
        let codec = LatentCodec::new(16, 16, 0);
        for i in 0..10 {
            let out = augment_rgb(&s.clip, &cfg, &mut stream(9, &[i]), Some(&codec)).unwrap();
            assert_eq!(out.frames().shape(), s.clip.frames().shape());
            assert!(out.frames().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
