//! Synthetic paired (RGB, pose) corpus: generation, on-disk format, loading.
//!
//! Every class is a parametric family of joint trajectories. The RGB clip is
//! rendered from exactly the trajectory the pose stream observes, over a
//! signer-dependent background, clothing color, skin tone and body placement.
//! Signer appearance is drawn independently of the class.

use std::f64::consts::TAU;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array3, Array4, ArrayD};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::arrayfile;
use crate::error::{invalid, Error, Result};
use crate::rng::{self, Rng};

/// Joint count of the built-in skeleton.
pub const TOY_JOINTS: usize = 25;

pub const MANIFEST_HEADER: &str = "id\tlabel\tsigner\trgb_file\tpose_file";

/// `T x J x 3` keypoints: normalized `x`, `y` and a confidence score.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseSequence {
    joints: Array3<f32>,
}

impl PoseSequence {
    pub fn new(joints: Array3<f32>) -> Result<Self> {
        if joints.shape()[2] != 3 {
            return invalid(format!(
                "pose channel dim must be 3, got {}",
                joints.shape()[2]
            ));
        }
        if joints.iter().any(|v| !v.is_finite()) {
            return invalid("pose contains non-finite values");
        }
        if joints
            .index_axis(ndarray::Axis(2), 2)
            .iter()
            .any(|&c| !(0.0..=1.0).contains(&c))
        {
            return invalid("pose confidence outside [0, 1]");
        }
        Ok(Self { joints })
    }

    pub(crate) fn from_trusted(joints: Array3<f32>) -> Self {
        debug_assert_eq!(joints.shape()[2], 3);
        Self { joints }
    }

    pub fn joints(&self) -> &Array3<f32> {
        &self.joints
    }

    pub fn frames(&self) -> usize {
        self.joints.shape()[0]
    }

    pub fn num_joints(&self) -> usize {
        self.joints.shape()[1]
    }

    pub fn into_inner(self) -> Array3<f32> {
        self.joints
    }
}

/// `T x H x W x 3` video with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbClip {
    frames: Array4<f32>,
}

impl RgbClip {
    pub fn new(frames: Array4<f32>) -> Result<Self> {
        if frames.shape()[3] != 3 {
            return invalid(format!(
                "clip channel dim must be 3, got {}",
                frames.shape()[3]
            ));
        }
        if frames.iter().any(|v| !v.is_finite() || !(0.0..=1.0).contains(v)) {
            return invalid("clip values must be finite and within [0, 1]");
        }
        Ok(Self { frames })
    }

    pub(crate) fn from_trusted(frames: Array4<f32>) -> Self {
        debug_assert_eq!(frames.shape()[3], 3);
        Self { frames }
    }

    pub fn frames(&self) -> &Array4<f32> {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn height(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[2]
    }

    pub fn into_inner(self) -> Array4<f32> {
        self.frames
    }
}

/// One joint group: indices into the full skeleton plus its local bone list.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Group {
    pub joints: Vec<usize>,
    /// Edges between positions of `joints` (local indices).
    pub edges: Vec<(usize, usize)>,
}

impl Group {
    fn new(joints: Vec<usize>, edges: Vec<(usize, usize)>) -> Self {
        Self { joints, edges }
    }
}

/// The five anatomical joint groups consumed by the pose encoder.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoseGroups {
    pub left_hand: Group,
    pub right_hand: Group,
    pub face: Group,
    pub mouth: Group,
    pub body: Group,
}

impl PoseGroups {
    /// Layout of the 25-joint synthetic skeleton: 5 per hand (wrist, four
    /// fingertips), 5 face, 4 mouth, 6 body.
    pub fn toy() -> Self {
        let hand_edges = vec![(0, 1), (0, 2), (0, 3), (0, 4)];
        Self {
            left_hand: Group::new((0..5).collect(), hand_edges.clone()),
            right_hand: Group::new((5..10).collect(), hand_edges),
            // chin, left brow, right brow, left eye, right eye
            face: Group::new(
                (10..15).collect(),
                vec![(1, 3), (2, 4), (3, 4), (3, 0), (4, 0)],
            ),
            // left corner, top, right corner, bottom
            mouth: Group::new((15..19).collect(), vec![(0, 1), (1, 2), (2, 3), (3, 0)]),
            // neck, left shoulder, left elbow, right shoulder, right elbow, hip
            body: Group::new(
                (19..25).collect(),
                vec![(0, 1), (1, 2), (0, 3), (3, 4), (0, 5)],
            ),
        }
    }

    /// Groups in encoder order: left hand, right hand, body, face, mouth.
    pub fn ordered(&self) -> [(&'static str, &Group); 5] {
        [
            ("left_hand", &self.left_hand),
            ("right_hand", &self.right_hand),
            ("body", &self.body),
            ("face", &self.face),
            ("mouth", &self.mouth),
        ]
    }

    pub fn validate(&self, num_joints: usize) -> Result<()> {
        for (name, g) in self.ordered() {
            if g.joints.is_empty() {
                return invalid(format!("joint group {name} is empty"));
            }
            if let Some(&j) = g.joints.iter().find(|&&j| j >= num_joints) {
                return invalid(format!(
                    "joint group {name} references joint {j} but the pose has {num_joints} joints"
                ));
            }
            if let Some(&(a, b)) = g.edges.iter().find(|(a, b)| *a >= g.joints.len() || *b >= g.joints.len()) {
                return invalid(format!("joint group {name} has out-of-range edge ({a}, {b})"));
            }
        }
        if self.left_hand.joints.len() != self.right_hand.joints.len()
            || self.left_hand.edges != self.right_hand.edges
        {
            return invalid("left and right hand groups must share a layout");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: usize,
    pub clip: RgbClip,
    pub pose: PoseSequence,
    pub label: usize,
    pub signer: usize,
}

impl Sample {
    pub fn new(id: usize, clip: RgbClip, pose: PoseSequence, label: usize, signer: usize) -> Result<Self> {
        if clip.len() != pose.frames() {
            return invalid(format!(
                "sample {id}: clip has {} frames but pose has {}",
                clip.len(),
                pose.frames()
            ));
        }
        Ok(Self {
            id,
            clip,
            pose,
            label,
            signer,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSpec {
    pub num_classes: usize,
    /// Training samples per class, drawn from the training signers.
    pub samples_per_class: usize,
    /// Held-out samples per class, drawn from the held-out signers.
    pub eval_samples_per_class: usize,
    pub t_raw: usize,
    pub height: usize,
    pub width: usize,
    pub joints: usize,
    pub num_signers: usize,
    /// Signers (highest ids) reserved for the held-out samples. Zero means
    /// held-out samples cycle over every signer.
    pub eval_signers: usize,
    /// Fraction of `(frame, joint)` entries with degraded confidence.
    pub jitter_fraction: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            num_classes: 10,
            samples_per_class: 40,
            eval_samples_per_class: 10,
            t_raw: 80,
            height: 32,
            width: 32,
            joints: TOY_JOINTS,
            num_signers: 4,
            eval_signers: 2,
            jitter_fraction: 0.05,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_classes", self.num_classes),
            ("samples_per_class", self.samples_per_class),
            ("height", self.height),
            ("width", self.width),
            ("num_signers", self.num_signers),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return invalid(format!("{name} must be at least 1"));
        }
        if self.t_raw < 2 {
            return invalid("t_raw must be at least 2");
        }
        if self.joints != TOY_JOINTS {
            return invalid(format!(
                "the synthetic skeleton has {TOY_JOINTS} joints, got joints = {}",
                self.joints
            ));
        }
        if self.eval_signers >= self.num_signers && self.eval_signers > 0 {
            return invalid("eval_signers must leave at least one training signer");
        }
        if !(0.0..=1.0).contains(&self.jitter_fraction) {
            return invalid("jitter_fraction must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn train_signers(&self) -> std::ops::Range<usize> {
        0..self.num_signers - self.eval_signers
    }

    pub fn held_out_signers(&self) -> std::ops::Range<usize> {
        if self.eval_signers == 0 {
            0..self.num_signers
        } else {
            self.num_signers - self.eval_signers..self.num_signers
        }
    }

    pub fn total_samples(&self) -> usize {
        self.num_classes * (self.samples_per_class + self.eval_samples_per_class)
    }
}

/// Appearance and placement of one signer; independent of the class.
#[derive(Clone, Debug)]
struct Signer {
    background: [f32; 3],
    clothing: [f32; 3],
    skin: [f32; 3],
    scale: f64,
    offset: (f64, f64),
    /// Camera roll in radians.
    roll: f64,
}

impl Signer {
    fn draw(seed: u64, id: usize) -> Self {
        let mut r = rng::stream(seed, &[rng::TAG_SIGNER, id as u64]);
        let mut color = |lo: f32, hi: f32| -> [f32; 3] { [r.gen_range(lo..hi), r.gen_range(lo..hi), r.gen_range(lo..hi)] };
        let background = color(0.02, 0.3);
        let clothing = color(0.35, 0.6);
        let skin = color(0.75, 1.0);
        Self {
            background,
            clothing,
            skin,
            scale: r.gen_range(0.75..1.25),
            offset: (r.gen_range(-0.03..0.03), r.gen_range(-0.03..0.03)),
            roll: r.gen_range(-0.3..0.3),
        }
    }
}

/// Parameters of one hand path `c + A * sin(2 pi f s + phi)`.
#[derive(Clone, Debug)]
struct HandPath {
    center: (f64, f64),
    amp: (f64, f64),
    freq: (f64, f64),
    phase: (f64, f64),
    spin: f64,
}

impl HandPath {
    fn at(&self, s: f64, amp_scale: f64) -> (f64, f64, f64) {
        let x = self.center.0 + amp_scale * self.amp.0 * (TAU * self.freq.0 * s + self.phase.0).sin();
        let y = self.center.1 + amp_scale * self.amp.1 * (TAU * self.freq.1 * s + self.phase.1).sin();
        (x, y, TAU * self.spin * s)
    }
}

#[derive(Clone, Debug)]
enum OtherHand {
    Rest,
    Mirror,
    Own(HandPath),
}

/// The parametric family that defines one class.
#[derive(Clone, Debug)]
struct ClassMotion {
    right: HandPath,
    left: OtherHand,
    mouth_freq: f64,
    mouth_amp: f64,
    nod_freq: f64,
    nod_amp: f64,
}

const FREQS: [f64; 4] = [0.5, 1.0, 1.5, 2.0];

impl ClassMotion {
    fn draw(r: &mut Rng) -> Self {
        let path = |r: &mut Rng, cx: f64| HandPath {
            center: (cx + r.gen_range(-0.05..0.05), r.gen_range(0.5..0.68)),
            amp: (r.gen_range(0.04..0.14), r.gen_range(0.04..0.14)),
            freq: (FREQS[r.gen_range(0..4)], FREQS[r.gen_range(0..4)]),
            phase: (r.gen_range(0.0..TAU), r.gen_range(0.0..TAU)),
            spin: r.gen_range(-1.0..1.0),
        };
        let right = path(r, 0.64);
        let left = match r.gen_range(0..3) {
            0 => OtherHand::Rest,
            1 => OtherHand::Mirror,
            _ => OtherHand::Own(path(r, 0.36)),
        };
        Self {
            right,
            left,
            mouth_freq: FREQS[r.gen_range(0..4)] * 2.0,
            mouth_amp: r.gen_range(0.0..0.025),
            nod_freq: FREQS[r.gen_range(0..4)],
            nod_amp: r.gen_range(0.0..0.02),
        }
    }

    /// Right-hand trace used to keep classes apart from each other.
    fn signature(&self) -> Vec<(f64, f64)> {
        (0..32)
            .flat_map(|i| {
                let s = i as f64 / 31.0;
                let (rx, ry, _) = self.right.at(s, 1.0);
                let (lx, ly) = self.left_at(s, 1.0);
                [(rx, ry), (lx, ly)]
            })
            .collect()
    }

    fn left_at(&self, s: f64, amp_scale: f64) -> (f64, f64) {
        match &self.left {
            OtherHand::Rest => (0.36, 0.8),
            OtherHand::Mirror => {
                let (x, y, _) = self.right.at(s, amp_scale);
                (1.0 - x, y)
            }
            OtherHand::Own(p) => {
                let (x, y, _) = p.at(s, amp_scale);
                (x, y)
            }
        }
    }

    fn left_spin(&self, s: f64) -> f64 {
        match &self.left {
            OtherHand::Rest => 0.0,
            OtherHand::Mirror => -self.right.at(s, 1.0).2,
            OtherHand::Own(p) => p.at(s, 1.0).2,
        }
    }

    /// Canonical (signer-neutral) joint positions at normalized time `s`.
    fn skeleton(&self, s: f64, amp_scale: f64) -> [(f64, f64); TOY_JOINTS] {
        let mut j = [(0.0, 0.0); TOY_JOINTS];
        let nod = self.nod_amp * (TAU * self.nod_freq * s).sin();
        let (rx, ry, rspin) = self.right.at(s, amp_scale);
        let (lx, ly) = self.left_at(s, amp_scale);
        let lspin = self.left_spin(s);
        let hand = |j: &mut [(f64, f64); TOY_JOINTS], base: usize, (wx, wy): (f64, f64), spin: f64, mirror: f64| {
            j[base] = (wx, wy);
            for f in 0..4 {
                let a = spin + mirror * (-0.9 + 0.6 * f as f64) - std::f64::consts::FRAC_PI_2;
                j[base + 1 + f] = (wx + 0.045 * a.cos() * mirror, wy + 0.045 * a.sin());
            }
        };
        hand(&mut j, 0, (lx, ly), lspin, -1.0);
        hand(&mut j, 5, (rx, ry), rspin, 1.0);
        // face
        let fy = 0.25 + nod;
        j[10] = (0.5, fy + 0.1);
        j[11] = (0.44, fy - 0.06);
        j[12] = (0.56, fy - 0.06);
        j[13] = (0.45, fy - 0.02);
        j[14] = (0.55, fy - 0.02);
        // mouth
        let open = 0.01 + self.mouth_amp * (0.5 + 0.5 * (TAU * self.mouth_freq * s).sin());
        let my = fy + 0.06;
        j[15] = (0.46, my);
        j[16] = (0.5, my - open);
        j[17] = (0.54, my);
        j[18] = (0.5, my + open);
        // body; elbows hang between shoulder and wrist
        let neck = (0.5, 0.4);
        let lsh = (0.38, 0.46);
        let rsh = (0.62, 0.46);
        let elbow = |sh: (f64, f64), w: (f64, f64), side: f64| {
            ((sh.0 + w.0) / 2.0 + side * 0.05, (sh.1 + w.1) / 2.0 + 0.06)
        };
        j[19] = neck;
        j[20] = lsh;
        j[21] = elbow(lsh, (lx, ly), -1.0);
        j[22] = rsh;
        j[23] = elbow(rsh, (rx, ry), 1.0);
        j[24] = (0.5, 0.95);
        j
    }
}

fn class_motions(spec: &CorpusSpec) -> Vec<ClassMotion> {
    let mut motions: Vec<ClassMotion> = Vec::with_capacity(spec.num_classes);
    for c in 0..spec.num_classes {
        let mut r = rng::stream(spec.seed, &[rng::TAG_CLASS, c as u64]);
        // Reject families whose hand traces nearly coincide with an earlier class.
        let mut best = ClassMotion::draw(&mut r);
        let mut best_gap = 0.0;
        for _ in 0..64 {
            let cand = ClassMotion::draw(&mut r);
            let sig = cand.signature();
            let gap = motions
                .iter()
                .map(|m| {
                    m.signature()
                        .iter()
                        .zip(&sig)
                        .map(|(a, b)| (a.0 - b.0).powi(2) + (a.1 - b.1).powi(2))
                        .sum::<f64>()
                        / sig.len() as f64
                })
                .fold(f64::INFINITY, f64::min);
            if gap > best_gap {
                best_gap = gap;
                best = cand;
            }
            if gap > 0.004 {
                break;
            }
        }
        motions.push(best);
    }
    motions
}

fn place(p: (f64, f64), signer: &Signer) -> (f64, f64) {
    let c = 0.5;
    let (sin, cos) = signer.roll.sin_cos();
    let (dx, dy) = (p.0 - c, p.1 - c);
    let x = c + signer.scale * (cos * dx - sin * dy) + signer.offset.0;
    let y = c + signer.scale * (sin * dx + cos * dy) + signer.offset.1;
    (x.clamp(0.0, 1.0), y.clamp(0.0, 1.0))
}

/// Pixel-space drawing helpers over one `H x W x 3` frame.
struct Canvas<'a> {
    frame: ndarray::ArrayViewMut3<'a, f32>,
    h: usize,
    w: usize,
}

impl Canvas<'_> {
    fn px(&self, p: (f64, f64)) -> (f64, f64) {
        (p.0 * self.w as f64 - 0.5, p.1 * self.h as f64 - 0.5)
    }

    fn disk(&mut self, center: (f64, f64), radius_px: f64, color: [f32; 3]) {
        let (cx, cy) = self.px(center);
        let r2 = radius_px * radius_px;
        for y in 0..self.h {
            for x in 0..self.w {
                let dx = x as f64 - cx;
                let dy = y as f64 - cy;
                if dx * dx + dy * dy <= r2 {
                    for ch in 0..3 {
                        self.frame[[y, x, ch]] = color[ch];
                    }
                }
            }
        }
    }

    fn segment(&mut self, a: (f64, f64), b: (f64, f64), half_width_px: f64, color: [f32; 3]) {
        let (ax, ay) = self.px(a);
        let (bx, by) = self.px(b);
        let (vx, vy) = (bx - ax, by - ay);
        let len2 = (vx * vx + vy * vy).max(1e-12);
        for y in 0..self.h {
            for x in 0..self.w {
                let (px, py) = (x as f64 - ax, y as f64 - ay);
                let t = ((px * vx + py * vy) / len2).clamp(0.0, 1.0);
                let (dx, dy) = (px - t * vx, py - t * vy);
                if dx * dx + dy * dy <= half_width_px * half_width_px {
                    for ch in 0..3 {
                        self.frame[[y, x, ch]] = color[ch];
                    }
                }
            }
        }
    }
}

fn render_frame(frame: ndarray::ArrayViewMut3<'_, f32>, joints: &[(f64, f64); TOY_JOINTS], signer: &Signer) {
    let (h, w) = (frame.shape()[0], frame.shape()[1]);
    let mut canvas = Canvas { frame, h, w };
    canvas.frame.indexed_iter_mut().for_each(|((_, _, c), v)| *v = signer.background[c]);
    let unit = h.min(w) as f64 * signer.scale;
    let limb = (0.035 * unit).max(0.6);
    let body = [(19, 20), (19, 22), (19, 24), (20, 21), (22, 23)];
    for (a, b) in body {
        canvas.segment(joints[a], joints[b], limb, signer.clothing);
    }
    canvas.segment(joints[21], joints[0], limb * 0.8, signer.clothing);
    canvas.segment(joints[23], joints[5], limb * 0.8, signer.clothing);
    let face_center = ((joints[13].0 + joints[14].0) / 2.0, (joints[13].1 + joints[10].1) / 2.0);
    canvas.disk(face_center, 0.08 * unit, signer.skin.map(|v| v * 0.85));
    let mouth_center = ((joints[15].0 + joints[17].0) / 2.0, (joints[16].1 + joints[18].1) / 2.0);
    let open = (joints[18].1 - joints[16].1).abs() * h as f64;
    canvas.disk(mouth_center, (0.5 * open).max(0.5), [0.05, 0.02, 0.02]);
    for base in [0, 5] {
        canvas.disk(joints[base], 0.055 * unit, signer.skin);
        for f in 1..5 {
            canvas.disk(joints[base + f], 0.025 * unit, signer.skin);
        }
    }
}

fn generate_sample(
    spec: &CorpusSpec,
    motion: &ClassMotion,
    signer_id: usize,
    signer: &Signer,
    label: usize,
    id: usize,
) -> Sample {
    let mut r = rng::stream(spec.seed, &[rng::TAG_SAMPLE, id as u64]);
    let warp: f64 = r.gen_range(0.85..1.15);
    let start: f64 = r.gen_range(0.0..0.08);
    let amp_scale: f64 = r.gen_range(0.9..1.1);
    let shift = (r.gen_range(-0.02..0.02), r.gen_range(-0.02..0.02));
    let noise = Normal::new(0.0, 0.003).expect("valid std");
    let jitter = Normal::new(0.0, 0.02).expect("valid std");

    let (t_raw, h, w) = (spec.t_raw, spec.height, spec.width);
    let mut frames = Array4::<f32>::zeros((t_raw, h, w, 3));
    let mut pose = Array3::<f32>::zeros((t_raw, TOY_JOINTS, 3));
    for t in 0..t_raw {
        let s = start + (1.0 - start) * (t as f64 / (t_raw - 1) as f64).powf(warp);
        let canon = motion.skeleton(s, amp_scale);
        let mut placed = [(0.0, 0.0); TOY_JOINTS];
        for (j, p) in canon.iter().enumerate() {
            let q = (p.0 + shift.0 + noise.sample(&mut r), p.1 + shift.1 + noise.sample(&mut r));
            placed[j] = place(q, signer);
        }
        render_frame(frames.index_axis_mut(ndarray::Axis(0), t), &placed, signer);
        for (j, &(x, y)) in placed.iter().enumerate() {
            let (mut x, mut y, mut c) = (x, y, 1.0);
            if r.gen_bool(spec.jitter_fraction) {
                c = r.gen_range(0.2..0.9);
                x = (x + jitter.sample(&mut r)).clamp(0.0, 1.0);
                y = (y + jitter.sample(&mut r)).clamp(0.0, 1.0);
            }
            pose[[t, j, 0]] = x as f32;
            pose[[t, j, 1]] = y as f32;
            pose[[t, j, 2]] = c as f32;
        }
    }
    Sample {
        id,
        clip: RgbClip::from_trusted(frames),
        pose: PoseSequence::from_trusted(pose),
        label,
        signer: signer_id,
    }
}

/// Generates the training samples (class-major) followed by the held-out
/// samples. Pure function of `spec`.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    let motions = class_motions(spec);
    let signers: Vec<Signer> = (0..spec.num_signers).map(|s| Signer::draw(spec.seed, s)).collect();
    let mut out = Vec::with_capacity(spec.total_samples());
    let parts = [
        (spec.samples_per_class, spec.train_signers()),
        (spec.eval_samples_per_class, spec.held_out_signers()),
    ];
    for (per_class, pool) in parts {
        for (label, motion) in motions.iter().enumerate() {
            for i in 0..per_class {
                let signer = pool.start + (i + label) % pool.len();
                let id = out.len();
                out.push(generate_sample(spec, motion, signer, &signers[signer], label, id));
            }
        }
    }
    Ok(out)
}

/// Splits a generated corpus into (training, held-out) by signer.
pub fn split_by_signer(spec: &CorpusSpec, samples: Vec<Sample>) -> (Vec<Sample>, Vec<Sample>) {
    let n_train = spec.num_classes * spec.samples_per_class;
    let mut train = samples;
    let held = train.split_off(n_train.min(train.len()));
    (train, held)
}

/// A disk moving along `path` (normalized coordinates, one point per frame)
/// over a constant background. Returns the clip and the ground-truth disk
/// coverage per frame.
pub fn moving_disk_clip(
    path: &[(f64, f64)],
    height: usize,
    width: usize,
    radius_px: f64,
    background: [f32; 3],
    color: [f32; 3],
) -> (RgbClip, Array3<bool>) {
    let t = path.len();
    let mut frames = Array4::<f32>::zeros((t, height, width, 3));
    let mut truth = Array3::from_elem((t, height, width), false);
    for (i, &p) in path.iter().enumerate() {
        let mut frame = frames.index_axis_mut(ndarray::Axis(0), i);
        frame.indexed_iter_mut().for_each(|((_, _, c), v)| *v = background[c]);
        let mut canvas = Canvas { frame, h: height, w: width };
        canvas.disk(p, radius_px, color);
        let (cx, cy) = canvas.px(p);
        for y in 0..height {
            for x in 0..width {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                truth[[i, y, x]] = dx * dx + dy * dy <= radius_px * radius_px;
            }
        }
    }
    (RgbClip::from_trusted(frames), truth)
}

fn file_names(id: usize) -> (String, String) {
    (format!("{id:06}_rgb.arr"), format!("{id:06}_pose.arr"))
}

/// Writes `manifest.tsv` plus two array files per sample into `dir`.
pub fn write_corpus(samples: &[Sample], dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::from(MANIFEST_HEADER);
    manifest.push('\n');
    for s in samples {
        let (rgb, pose) = file_names(s.id);
        arrayfile::write_array(&dir.join(&rgb), &s.clip.frames.clone().into_dyn())?;
        arrayfile::write_array(&dir.join(&pose), &s.pose.joints.clone().into_dyn())?;
        writeln!(manifest, "{}\t{}\t{}\t{}\t{}", s.id, s.label, s.signer, rgb, pose).expect("string write");
    }
    let path = dir.join("manifest.tsv");
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// One parsed manifest record.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: usize,
    pub label: usize,
    pub signer: usize,
    pub rgb_file: String,
    pub pose_file: String,
}

pub fn read_manifest(manifest: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let malformed = |msg: String| Error::Malformed {
        path: manifest.to_path_buf(),
        msg,
    };
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == MANIFEST_HEADER => {}
        _ => return Err(malformed("missing or wrong header line".into())),
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 5 {
                return Err(malformed(format!("line {}: expected 5 fields", n + 2)));
            }
            let num = |s: &str| {
                s.parse::<usize>()
                    .map_err(|_| malformed(format!("line {}: `{s}` is not an integer", n + 2)))
            };
            Ok(ManifestEntry {
                id: num(f[0])?,
                label: num(f[1])?,
                signer: num(f[2])?,
                rgb_file: f[3].to_string(),
                pose_file: f[4].to_string(),
            })
        })
        .collect()
}

fn to_rank<const N: usize, D: ndarray::Dimension>(a: ArrayD<f32>, path: &Path) -> Result<ndarray::Array<f32, D>> {
    let found = a.shape().to_vec();
    a.into_dimensionality::<D>().map_err(|_| Error::ShapeMismatch {
        path: path.to_path_buf(),
        expected: vec![0; N],
        found,
    })
}

pub fn load_entry(dir: &Path, e: &ManifestEntry) -> Result<Sample> {
    let rgb_path = dir.join(&e.rgb_file);
    let pose_path = dir.join(&e.pose_file);
    let rgb: Array4<f32> = to_rank::<4, _>(arrayfile::read_array(&rgb_path)?, &rgb_path)?;
    let pose: Array3<f32> = to_rank::<3, _>(arrayfile::read_array(&pose_path)?, &pose_path)?;
    if rgb.shape()[3] != 3 {
        let mut expected = rgb.shape().to_vec();
        expected[3] = 3;
        return Err(Error::ShapeMismatch {
            path: rgb_path,
            expected,
            found: rgb.shape().to_vec(),
        });
    }
    if pose.shape()[2] != 3 || pose.shape()[0] != rgb.shape()[0] {
        let expected = vec![rgb.shape()[0], pose.shape()[1], 3];
        return Err(Error::ShapeMismatch {
            path: pose_path,
            expected,
            found: pose.shape().to_vec(),
        });
    }
    Ok(Sample {
        id: e.id,
        clip: RgbClip::new(rgb).map_err(|err| Error::Malformed {
            path: rgb_path.clone(),
            msg: err.to_string(),
        })?,
        pose: PoseSequence::new(pose).map_err(|err| Error::Malformed {
            path: pose_path.clone(),
            msg: err.to_string(),
        })?,
        label: e.label,
        signer: e.signer,
    })
}

/// Loads every sample listed in a manifest, in manifest order.
pub fn read_corpus(manifest: &Path) -> Result<Vec<Sample>> {
    let dir = manifest.parent().unwrap_or(Path::new("."));
    read_manifest(manifest)?
        .iter()
        .map(|e| load_entry(dir, e))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn tiny() -> CorpusSpec {
        CorpusSpec {
            num_classes: 2,
            samples_per_class: 3,
            eval_samples_per_class: 0,
            t_raw: 12,
            height: 16,
            width: 16,
            num_signers: 2,
            eval_signers: 0,
            ..CorpusSpec::default()
        }
    }

    #[test]
    fn counts_and_labels() {
        let s = generate_corpus(&tiny()).unwrap();
        assert_eq!(s.len(), 6);
        assert_eq!(s.iter().map(|x| x.label).collect::<Vec<_>>(), vec![0, 0, 0, 1, 1, 1]);
        for x in &s {
            assert_eq!(x.clip.frames().shape(), &[12, 16, 16, 3]);
            assert_eq!(x.pose.joints().shape(), &[12, TOY_JOINTS, 3]);
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let a = generate_corpus(&tiny()).unwrap();
        let b = generate_corpus(&tiny()).unwrap();
        assert_eq!(a, b);
        let c = generate_corpus(&CorpusSpec { seed: 9, ..tiny() }).unwrap();
        assert_ne!(a[0].pose, c[0].pose);
    }

    #[test]
    fn one_background_per_signer() {
        let spec = CorpusSpec {
            num_signers: 4,
            samples_per_class: 8,
            ..tiny()
        };
        let samples = generate_corpus(&spec).unwrap();
        let colors: BTreeSet<[u32; 3]> = samples
            .iter()
            .map(|s| {
                let f = s.clip.frames();
                [f[[0, 0, 0, 0]].to_bits(), f[[0, 0, 0, 1]].to_bits(), f[[0, 0, 0, 2]].to_bits()]
            })
            .collect();
        assert_eq!(colors.len(), 4);
    }

    #[test]
    fn held_out_signers_are_disjoint() {
        let spec = CorpusSpec {
            num_classes: 3,
            samples_per_class: 4,
            eval_samples_per_class: 2,
            t_raw: 4,
            height: 8,
            width: 8,
            ..CorpusSpec::default()
        };
        let samples = generate_corpus(&spec).unwrap();
        let (train, held) = split_by_signer(&spec, samples);
        assert_eq!(train.len(), 12);
        assert_eq!(held.len(), 6);
        assert!(train.iter().all(|s| s.signer < 2));
        assert!(held.iter().all(|s| s.signer >= 2));
    }

    #[test]
    fn pose_overlaps_rendered_foreground() {
        let samples = generate_corpus(&CorpusSpec { height: 32, width: 32, ..tiny() }).unwrap();
        for s in &samples {
            let f = s.clip.frames();
            let p = s.pose.joints();
            let (h, w) = (f.shape()[1], f.shape()[2]);
            let mut at_joints = 0.0;
            let mut n = 0.0;
            for t in 0..s.pose.frames() {
                for j in 0..TOY_JOINTS {
                    let x = ((p[[t, j, 0]] * w as f32) as usize).min(w - 1);
                    let y = ((p[[t, j, 1]] * h as f32) as usize).min(h - 1);
                    at_joints += (0..3).map(|c| f[[t, y, x, c]]).sum::<f32>() / 3.0;
                    n += 1.0;
                }
            }
            let bg = (0..3).map(|c| f[[0, 0, 0, c]]).sum::<f32>() / 3.0;
            assert!(at_joints / n > bg, "sample {}", s.id);
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(generate_corpus(&CorpusSpec { num_classes: 0, ..tiny() }).is_err());
        assert!(generate_corpus(&CorpusSpec { t_raw: 1, ..tiny() }).is_err());
        assert!(generate_corpus(&CorpusSpec { joints: 30, ..tiny() }).is_err());
    }

    #[test]
    fn toy_groups_valid() {
        let g = PoseGroups::toy();
        g.validate(TOY_JOINTS).unwrap();
        assert!(g.validate(20).is_err());
        let all: Vec<usize> = g.ordered().iter().flat_map(|(_, g)| g.joints.clone()).collect();
        assert_eq!(all.len(), TOY_JOINTS);
        assert_eq!(all.iter().collect::<BTreeSet<_>>().len(), TOY_JOINTS);
    }

    #[test]
    fn validating_constructors() {
        assert!(PoseSequence::new(Array3::zeros((2, 3, 2))).is_err());
        let mut bad = Array3::<f32>::zeros((2, 3, 3));
        bad[[0, 0, 2]] = 1.5;
        assert!(PoseSequence::new(bad).is_err());
        let mut clip = Array4::<f32>::zeros((1, 2, 2, 3));
        clip[[0, 0, 0, 0]] = f32::NAN;
        assert!(RgbClip::new(clip).is_err());
    }
}
