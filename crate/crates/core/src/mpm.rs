//! Motion-preserving masking.
//!
//! A clip is mapped frame by frame into an exactly invertible latent space,
//! latent channels whose temporal standard deviation falls below a threshold
//! are zeroed, and the decoded motion-preserving video is gray-scaled and
//! binarized into a per-pixel mask that is finally applied to the clip.
//!
//! The latent codec is a squeeze (2x2 pixel blocks stacked into 12 channels)
//! followed by one seed-generated orthogonal mixing of those channels, the
//! same structure as an invertible 1x1 convolution in a flow model.
//! Orthogonality makes the inverse the transpose.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, Array3, Array4, ArrayView3, ArrayView4, Axis};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::corpus::RgbClip;
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Clone, Debug)]
pub struct LatentCodec {
    height: usize,
    width: usize,
    block: usize,
    /// Orthogonal `(3 b^2) x (3 b^2)` channel mixing.
    mix: Array2<f64>,
}

fn random_orthogonal(n: usize, r: &mut Rng) -> Array2<f64> {
    let g = DMatrix::<f64>::from_fn(n, n, |_, _| StandardNormal.sample(r));
    let qr = g.qr();
    let (q, rmat) = (qr.q(), qr.r());
    // Sign-fix so the distribution does not depend on the QR convention.
    Array2::from_shape_fn((n, n), |(i, j)| {
        let s = if rmat[(j, j)] < 0.0 { -1.0 } else { 1.0 };
        q[(i, j)] * s
    })
}

impl LatentCodec {
    pub fn new(height: usize, width: usize, seed: u64) -> Self {
        let block = if height % 2 == 0 && width % 2 == 0 { 2 } else { 1 };
        let mut r = rng::stream(seed, &[rng::TAG_CODEC, height as u64, width as u64]);
        let mix = random_orthogonal(3 * block * block, &mut r);
        Self {
            height,
            width,
            block,
            mix,
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.height * self.width * 3
    }

    fn check(&self, h: usize, w: usize) -> Result<()> {
        if (h, w) != (self.height, self.width) {
            return Err(Error::Dimension(format!(
                "codec expects {}x{} frames, got {h}x{w}",
                self.height, self.width
            )));
        }
        Ok(())
    }

    fn gather(&self, frame: &ArrayView3<'_, f32>, by: usize, bx: usize) -> Array1<f64> {
        let b = self.block;
        let mut v = Array1::zeros(3 * b * b);
        let mut i = 0;
        for dy in 0..b {
            for dx in 0..b {
                for c in 0..3 {
                    v[i] = frame[[by * b + dy, bx * b + dx, c]] as f64;
                    i += 1;
                }
            }
        }
        v
    }

    /// `h`: one `H x W x 3` frame to a `d_z` latent row.
    pub fn encode_frame(&self, frame: ArrayView3<'_, f32>) -> Result<Array1<f64>> {
        self.check(frame.shape()[0], frame.shape()[1])?;
        let b = self.block;
        let per = 3 * b * b;
        let mut z = Array1::zeros(self.latent_dim());
        for by in 0..self.height / b {
            for bx in 0..self.width / b {
                let v = self.gather(&frame, by, bx);
                let k = (by * (self.width / b) + bx) * per;
                z.slice_mut(ndarray::s![k..k + per]).assign(&self.mix.dot(&v));
            }
        }
        Ok(z)
    }

    /// `h^-1`: a latent row back to an `H x W x 3` frame (not clamped).
    pub fn decode_frame(&self, z: ndarray::ArrayView1<'_, f64>) -> Result<Array3<f64>> {
        if z.len() != self.latent_dim() {
            return Err(Error::Dimension(format!(
                "latent has {} channels, codec expects {}",
                z.len(),
                self.latent_dim()
            )));
        }
        let b = self.block;
        let per = 3 * b * b;
        let mut frame = Array3::zeros((self.height, self.width, 3));
        for by in 0..self.height / b {
            for bx in 0..self.width / b {
                let k = (by * (self.width / b) + bx) * per;
                let v = self.mix.t().dot(&z.slice(ndarray::s![k..k + per]));
                let mut i = 0;
                for dy in 0..b {
                    for dx in 0..b {
                        for c in 0..3 {
                            frame[[by * b + dy, bx * b + dx, c]] = v[i];
                            i += 1;
                        }
                    }
                }
            }
        }
        Ok(frame)
    }
}

/// Row `t` of the result is `h(frame t)`.
pub fn encode_latent(clip: &RgbClip, codec: &LatentCodec) -> Result<Array2<f64>> {
    let frames = clip.frames();
    codec.check(clip.height(), clip.width())?;
    let mut z = Array2::zeros((clip.len(), codec.latent_dim()));
    for (t, frame) in frames.axis_iter(Axis(0)).enumerate() {
        z.row_mut(t).assign(&codec.encode_frame(frame)?);
    }
    Ok(z)
}

pub fn decode_latent(z: &Array2<f64>, codec: &LatentCodec) -> Result<Array4<f64>> {
    let mut out = Array4::zeros((z.nrows(), codec.height, codec.width, 3));
    for (t, row) in z.axis_iter(Axis(0)).enumerate() {
        out.index_axis_mut(Axis(0), t).assign(&codec.decode_frame(row)?);
    }
    Ok(out)
}

/// Population standard deviation of every channel over the rows.
pub fn temporal_std(z: &Array2<f64>) -> Array1<f64> {
    let t = z.nrows().max(1) as f64;
    let mean = z.sum_axis(Axis(0)) / t;
    let mut var = Array1::<f64>::zeros(z.ncols());
    for row in z.rows() {
        ndarray::Zip::from(&mut var)
            .and(&row)
            .and(&mean)
            .for_each(|v, &x, &m| *v += (x - m) * (x - m));
    }
    (var / t).mapv(f64::sqrt)
}

/// How the intensity `p` selects latent channels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskRule {
    pub p: f64,
    /// Keep channels with `sigma < p` instead of `sigma >= p`.
    pub invert_indicator: bool,
    /// Read `p` as a quantile of the channel deviations rather than an
    /// absolute threshold.
    pub p_is_quantile: bool,
}

impl MaskRule {
    pub fn absolute(p: f64) -> Self {
        Self {
            p,
            invert_indicator: false,
            p_is_quantile: false,
        }
    }

    fn threshold(&self, sigma: &Array1<f64>) -> f64 {
        if !self.p_is_quantile || sigma.is_empty() {
            return self.p;
        }
        let mut s = sigma.to_vec();
        s.sort_by(f64::total_cmp);
        let q = self.p.clamp(0.0, 1.0);
        s[((s.len() - 1) as f64 * q).floor() as usize]
    }

    /// Per-channel keep flags.
    pub fn survivors(&self, sigma: &Array1<f64>) -> Vec<bool> {
        let th = self.threshold(sigma);
        sigma
            .iter()
            .map(|&s| if self.invert_indicator { s < th } else { s >= th })
            .collect()
    }
}

/// Zeroes every channel whose temporal deviation is below `p`.
pub fn mask_latent(z: &Array2<f64>, p: f64) -> Array2<f64> {
    mask_latent_with(z, &MaskRule::absolute(p)).0
}

/// Like [`mask_latent`] with an explicit rule; also returns the keep flags.
pub fn mask_latent_with(z: &Array2<f64>, rule: &MaskRule) -> (Array2<f64>, Vec<bool>) {
    let keep = rule.survivors(&temporal_std(z));
    let mut out = z.clone();
    for (mut col, &k) in out.axis_iter_mut(Axis(1)).zip(&keep) {
        if !k {
            col.fill(0.0);
        }
    }
    (out, keep)
}

/// Binary `T x H x W` mask.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSequence {
    zeta: Array3<f32>,
}

impl MaskSequence {
    pub fn new(zeta: Array3<f32>) -> Result<Self> {
        if zeta.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Invalid("mask values must be 0 or 1".into()));
        }
        Ok(Self { zeta })
    }

    pub fn ones(t: usize, h: usize, w: usize) -> Self {
        Self {
            zeta: Array3::ones((t, h, w)),
        }
    }

    pub fn values(&self) -> &Array3<f32> {
        &self.zeta
    }

    pub fn coverage(&self) -> f64 {
        self.zeta.iter().map(|&v| v as f64).sum::<f64>() / self.zeta.len().max(1) as f64
    }
}

/// Everything MPM produces for one clip.
#[derive(Clone, Debug)]
pub struct MpmOutput {
    /// Decoded motion-preserving video (unclamped).
    pub motion: Array4<f64>,
    pub mask: MaskSequence,
    pub kept_channels: usize,
}

/// Gray-scales one decoded frame and marks pixels above the frame mean.
fn binarize(frame: ndarray::ArrayView3<'_, f64>) -> Array2<f32> {
    let (h, w) = (frame.shape()[0], frame.shape()[1]);
    let gray = Array2::from_shape_fn((h, w), |(y, x)| (0..3).map(|c| LUMA[c] * frame[[y, x, c]].abs()).sum::<f64>());
    let mean = gray.mean().unwrap_or(0.0);
    gray.mapv(|g| if g > mean { 1.0 } else { 0.0 })
}

pub fn derive_mask(clip: &RgbClip, codec: &LatentCodec, p: f64) -> Result<MaskSequence> {
    Ok(run_mpm(clip, codec, &MaskRule::absolute(p))?.mask)
}

/// Full pipeline: encode, suppress static channels, decode, binarize.
///
/// When no channel is suppressed the decoded video equals the input and the
/// mask is all ones.
pub fn run_mpm(clip: &RgbClip, codec: &LatentCodec, rule: &MaskRule) -> Result<MpmOutput> {
    let z = encode_latent(clip, codec)?;
    let (z_hat, keep) = mask_latent_with(&z, rule);
    let kept = keep.iter().filter(|&&k| k).count();
    let motion = decode_latent(&z_hat, codec)?;
    let (t, h, w) = (clip.len(), clip.height(), clip.width());
    let mask = if kept == keep.len() {
        MaskSequence::ones(t, h, w)
    } else {
        let mut zeta = Array3::zeros((t, h, w));
        for (i, frame) in motion.axis_iter(Axis(0)).enumerate() {
            zeta.index_axis_mut(Axis(0), i).assign(&binarize(frame));
        }
        MaskSequence { zeta }
    };
    Ok(MpmOutput {
        motion,
        mask,
        kept_channels: kept,
    })
}

/// Multiplies the clip by the mask on every color channel.
pub fn masked(clip: &RgbClip, zeta: &MaskSequence) -> Result<RgbClip> {
    let z = &zeta.zeta;
    if z.shape() != &clip.frames().shape()[..3] {
        return Err(Error::Dimension(format!(
            "mask shape {:?} does not match clip {:?}",
            z.shape(),
            clip.frames().shape()
        )));
    }
    let mut frames = clip.frames().clone();
    for ((t, y, x, _), v) in frames.indexed_iter_mut() {
        *v *= z[[t, y, x]];
    }
    Ok(RgbClip::from_trusted(frames))
}

/// With probability `alpha` (one draw) returns `clip * zeta`, else the clip.
pub fn apply_mask(clip: &RgbClip, zeta: &MaskSequence, alpha: f64, rng: &mut Rng) -> Result<RgbClip> {
    if zeta.zeta.shape() != &clip.frames().shape()[..3] {
        return masked(clip, zeta);
    }
    if rng.gen_bool(alpha.clamp(0.0, 1.0)) {
        masked(clip, zeta)
    } else {
        Ok(clip.clone())
    }
}

/// Tiles `frames [T, H, W, 3]` row-major into a binary PPM, `cols` frames
/// per row. Values are clamped to `[0, 1]`; unused tiles stay black.
pub fn write_ppm_grid(frames: ArrayView4<'_, f64>, cols: usize, path: &Path) -> Result<()> {
    let (t, h, w, c) = frames.dim();
    if c != 3 || t == 0 || cols == 0 {
        return Err(Error::Dimension(format!("cannot tile frames of shape {:?}", frames.shape())));
    }
    let rows = t.div_ceil(cols);
    let (gw, gh) = (cols * w, rows * h);
    let mut out = format!("P6\n{gw} {gh}\n255\n").into_bytes();
    let mut pixels = vec![0u8; gw * gh * 3];
    for ((f, y, x, ch), &v) in frames.indexed_iter() {
        let (gy, gx) = ((f / cols) * h + y, (f % cols) * w + x);
        pixels[(gy * gw + gx) * 3 + ch] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    }
    out.extend_from_slice(&pixels);
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Writes `{stem}_original.ppm`, `{stem}_motion.ppm` (the decoded
/// motion-preserving video) and `{stem}_masked.ppm` into `dir`.
pub fn preview(clip: &RgbClip, codec: &LatentCodec, rule: &MaskRule, dir: &Path, stem: &str) -> Result<[PathBuf; 3]> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let out = run_mpm(clip, codec, rule)?;
    let masked_clip = masked(clip, &out.mask)?;
    let cols = clip.len().min(10);
    let paths = ["original", "motion", "masked"].map(|k| dir.join(format!("{stem}_{k}.ppm")));
    write_ppm_grid(clip.frames().mapv(f64::from).view(), cols, &paths[0])?;
    write_ppm_grid(out.motion.view(), cols, &paths[1])?;
    write_ppm_grid(masked_clip.frames().mapv(f64::from).view(), cols, &paths[2])?;
    Ok(paths)
}
