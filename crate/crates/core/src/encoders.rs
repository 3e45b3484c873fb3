//! The learnable networks: RGB encoder, pose encoder, projection head and
//! classifier head. All sizes are configurable; the defaults train on a CPU.

use ndarray::{Array2, ArrayD, IxDyn};
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{Bound, Graph, Params, Tensor, Var};
use crate::corpus::{Group, PoseGroups, PoseSequence, RgbClip};
use crate::error::{Error, Result};
use crate::rng::Rng;

fn normal(shape: &[usize], std: f64, r: &mut Rng) -> Tensor {
    ArrayD::from_shape_fn(IxDyn(shape), |_| {
        let z: f64 = StandardNormal.sample(r);
        z * std
    })
}

fn zeros(shape: &[usize]) -> Tensor {
    ArrayD::zeros(IxDyn(shape))
}

fn push_linear(p: &mut Params, name: &str, fan_in: usize, fan_out: usize, r: &mut Rng) {
    p.push(format!("{name}.w"), normal(&[fan_in, fan_out], (1.0 / fan_in as f64).sqrt(), r));
    p.push(format!("{name}.b"), zeros(&[fan_out]));
}

fn linear(g: &mut Graph, p: &Bound, name: &str, x: Var) -> Var {
    let (w, b) = (p.var(&format!("{name}.w")), p.var(&format!("{name}.b")));
    g.linear(x, w, b)
}

fn push_conv(p: &mut Params, name: &str, cin: usize, cout: usize, k: [usize; 3], gain: f64, r: &mut Rng) {
    let fan_in = cin * k[0] * k[1] * k[2];
    p.push(
        format!("{name}.w"),
        normal(&[cout, cin, k[0], k[1], k[2]], gain * (2.0 / fan_in as f64).sqrt(), r),
    );
    p.push(format!("{name}.b"), zeros(&[cout]));
}

fn conv(g: &mut Graph, p: &Bound, name: &str, x: Var, stride: [usize; 3], pad: [usize; 3]) -> Var {
    let (w, b) = (p.var(&format!("{name}.w")), p.var(&format!("{name}.b")));
    g.conv3d(x, w, b, stride, pad)
}

/// Batches clips into a `[B, 3, T, H, W]` tensor, each clip standardized
/// per color channel so a global color cast carries no signal.
pub fn rgb_batch(clips: &[&RgbClip]) -> Tensor {
    let f0 = clips[0].frames();
    let (t, h, w) = (f0.shape()[0], f0.shape()[1], f0.shape()[2]);
    let mut out = ArrayD::<f64>::zeros(IxDyn(&[clips.len(), 3, t, h, w]));
    for (b, clip) in clips.iter().enumerate() {
        for ((ti, y, x, c), &v) in clip.frames().indexed_iter() {
            out[[b, c, ti, y, x]] = v as f64;
        }
        for c in 0..3 {
            let mut ch = out.slice_mut(ndarray::s![b, c, .., .., ..]);
            let n = ch.len() as f64;
            let mean = ch.sum() / n;
            let var = ch.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var.sqrt() + 0.05);
            ch.mapv_inplace(|v| (v - mean) * inv);
        }
    }
    out
}

/// Batches poses into a `[B, T, J, 3]` tensor.
pub fn pose_batch(poses: &[&PoseSequence]) -> Tensor {
    let j0 = poses[0].joints();
    let (t, j) = (j0.shape()[0], j0.shape()[1]);
    let mut out = ArrayD::<f64>::zeros(IxDyn(&[poses.len(), t, j, 3]));
    for (b, pose) in poses.iter().enumerate() {
        for ((ti, ji, c), &v) in pose.joints().indexed_iter() {
            out[[b, ti, ji, c]] = v as f64;
        }
    }
    out
}

/// Writes `key=value` architecture lines under a prefix.
fn describe(prefix: &str, fields: &[(&str, String)]) -> Vec<(String, String)> {
    fields.iter().map(|(k, v)| (format!("{prefix}.{k}"), v.clone())).collect()
}

// ---------------------------------------------------------------- RGB ----

#[derive(Clone, Debug, PartialEq)]
pub struct RgbEncoderConfig {
    /// Side of the non-overlapping spatial patches the stem embeds.
    pub stem_patch: usize,
    pub stem_channels: usize,
    /// Channels of the residual stages; every stage after the first halves
    /// the temporal and spatial resolution.
    pub stage_channels: Vec<usize>,
    pub out_dim: usize,
}

impl Default for RgbEncoderConfig {
    fn default() -> Self {
        Self {
            stem_patch: 4,
            stem_channels: 8,
            stage_channels: vec![8, 16, 32],
            out_dim: 128,
        }
    }
}

/// Patch stem, residual 3D-conv stages, global average pool, linear.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbEncoder {
    pub cfg: RgbEncoderConfig,
}

impl RgbEncoder {
    pub fn new(cfg: RgbEncoderConfig) -> Result<Self> {
        if cfg.stem_patch == 0 || cfg.stem_channels == 0 || cfg.stage_channels.is_empty() || cfg.out_dim == 0 {
            return Err(Error::Invalid("rgb encoder sizes must be positive".into()));
        }
        Ok(Self { cfg })
    }

    pub fn out_dim(&self) -> usize {
        self.cfg.out_dim
    }

    pub fn descriptor(&self) -> Vec<(String, String)> {
        let c = &self.cfg;
        describe(
            "rgb",
            &[
                ("stem_patch", c.stem_patch.to_string()),
                ("stem_channels", c.stem_channels.to_string()),
                ("stage_channels", join(&c.stage_channels)),
                ("out_dim", c.out_dim.to_string()),
            ],
        )
    }

    fn stride(i: usize) -> [usize; 3] {
        if i == 0 {
            [1, 1, 1]
        } else {
            [2, 2, 2]
        }
    }

    pub fn init(&self, r: &mut Rng) -> Params {
        let c = &self.cfg;
        let mut p = Params::new();
        push_conv(&mut p, "stem", 3, c.stem_channels, [1, c.stem_patch, c.stem_patch], 1.0, r);
        let mut cin = c.stem_channels;
        for (i, &cout) in c.stage_channels.iter().enumerate() {
            push_conv(&mut p, &format!("stage{i}.a"), cin, cout, [3, 3, 3], 1.0, r);
            push_conv(&mut p, &format!("stage{i}.b"), cout, cout, [3, 3, 3], 0.5, r);
            if cin != cout || i > 0 {
                push_conv(&mut p, &format!("stage{i}.skip"), cin, cout, [1, 1, 1], 1.0, r);
            }
            cin = cout;
        }
        push_linear(&mut p, "out", cin, c.out_dim, r);
        p.push("out_ln.g", ArrayD::ones(IxDyn(&[c.out_dim])));
        p.push("out_ln.b", zeros(&[c.out_dim]));
        p
    }

    /// `x [B, 3, T, H, W]` to `[B, out_dim]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let shape = g.value(x).shape().to_vec();
        let patch = self.cfg.stem_patch;
        if shape.len() != 5 || shape[1] != 3 || shape[3] < patch || shape[4] < patch {
            return Err(Error::Dimension(format!("rgb encoder got input of shape {shape:?}")));
        }
        let mut h = conv(g, p, "stem", x, [1, patch, patch], [0, 0, 0]);
        h = g.relu(h);
        let mut cin = self.cfg.stem_channels;
        for (i, &cout) in self.cfg.stage_channels.iter().enumerate() {
            let s = Self::stride(i);
            let a = conv(g, p, &format!("stage{i}.a"), h, s, [1, 1, 1]);
            let a = g.relu(a);
            let b = conv(g, p, &format!("stage{i}.b"), a, [1, 1, 1], [1, 1, 1]);
            let skip = if cin != cout || i > 0 {
                conv(g, p, &format!("stage{i}.skip"), h, s, [0, 0, 0])
            } else {
                h
            };
            let sum = g.add(b, skip);
            h = g.relu(sum);
            cin = cout;
        }
        let pooled = g.mean_axes(h, &[2, 3, 4]);
        let out = linear(g, p, "out", pooled);
        Ok(g.layer_norm(out, p.var("out_ln.g"), p.var("out_ln.b"), 1e-5))
    }
}

// --------------------------------------------------------------- pose ----

#[derive(Clone, Debug, PartialEq)]
pub struct PoseEncoderConfig {
    pub groups: PoseGroups,
    pub num_joints: usize,
    pub group_blocks: usize,
    pub group_dim: usize,
    /// Width of the manual (hands + body) temporal stream.
    pub manual_dim: usize,
    /// Width of the non-manual (face + mouth) temporal stream.
    pub non_manual_dim: usize,
    pub transformer_blocks: usize,
    pub heads: usize,
}

impl Default for PoseEncoderConfig {
    fn default() -> Self {
        Self {
            groups: PoseGroups::toy(),
            num_joints: crate::corpus::TOY_JOINTS,
            group_blocks: 1,
            group_dim: 32,
            manual_dim: 64,
            non_manual_dim: 64,
            transformer_blocks: 1,
            heads: 2,
        }
    }
}

impl PoseEncoderConfig {
    pub fn out_dim(&self) -> usize {
        self.manual_dim + self.non_manual_dim
    }
}

/// Per-group spatial-temporal graph convolutions (the two hands share one
/// module; the right hand is mirrored into left-hand chirality first), then
/// one temporal attention stack for the manual stream and one for the
/// non-manual stream.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseEncoder {
    pub cfg: PoseEncoderConfig,
    adjacency: [Array2<f64>; 5],
}

/// `D^-1/2 (A + I) D^-1/2` for an undirected bone list.
pub fn normalized_adjacency(group: &Group) -> Array2<f64> {
    let n = group.joints.len();
    let mut a = Array2::<f64>::eye(n);
    for &(i, j) in &group.edges {
        a[[i, j]] = 1.0;
        a[[j, i]] = 1.0;
    }
    let deg: Vec<f64> = a.rows().into_iter().map(|r| r.sum()).collect();
    Array2::from_shape_fn((n, n), |(i, j)| a[[i, j]] / (deg[i] * deg[j]).sqrt())
}

fn sinusoid(len: usize, dim: usize) -> Array2<f64> {
    Array2::from_shape_fn((len, dim), |(t, i)| {
        let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
        if i % 2 == 0 {
            (t as f64 * rate).sin()
        } else {
            (t as f64 * rate).cos()
        }
    })
}

/// Module prefix used by each group; the hands share theirs.
const GROUP_MODULES: [&str; 5] = ["hand", "hand", "body", "face", "mouth"];

impl PoseEncoder {
    pub fn new(cfg: PoseEncoderConfig) -> Result<Self> {
        cfg.groups.validate(cfg.num_joints)?;
        if cfg.group_blocks == 0 || cfg.transformer_blocks == 0 || cfg.heads == 0 {
            return Err(Error::Invalid("pose encoder block counts must be positive".into()));
        }
        if cfg.manual_dim % cfg.heads != 0 || cfg.non_manual_dim % cfg.heads != 0 {
            return Err(Error::Invalid("stream widths must be divisible by the head count".into()));
        }
        let adjacency = cfg.groups.ordered().map(|(_, g)| normalized_adjacency(g));
        Ok(Self { cfg, adjacency })
    }

    pub fn out_dim(&self) -> usize {
        self.cfg.out_dim()
    }

    pub fn descriptor(&self) -> Vec<(String, String)> {
        let c = &self.cfg;
        let groups: Vec<String> = c.groups.ordered().iter().map(|(_, g)| join(&g.joints)).collect();
        describe(
            "pose",
            &[
                ("num_joints", c.num_joints.to_string()),
                ("groups", groups.join("/")),
                ("group_blocks", c.group_blocks.to_string()),
                ("group_dim", c.group_dim.to_string()),
                ("manual_dim", c.manual_dim.to_string()),
                ("non_manual_dim", c.non_manual_dim.to_string()),
                ("transformer_blocks", c.transformer_blocks.to_string()),
                ("heads", c.heads.to_string()),
            ],
        )
    }

    pub fn init(&self, r: &mut Rng) -> Params {
        let c = &self.cfg;
        let mut p = Params::new();
        for module in ["hand", "body", "face", "mouth"] {
            let mut cin = 3;
            for blk in 0..c.group_blocks {
                let name = format!("{module}.{blk}");
                push_linear(&mut p, &format!("{name}.spatial"), cin, c.group_dim, r);
                push_conv(&mut p, &format!("{name}.temporal"), c.group_dim, c.group_dim, [3, 1, 1], 0.5, r);
                cin = c.group_dim;
            }
        }
        for (stream, groups, width) in [("manual", 3, c.manual_dim), ("non_manual", 2, c.non_manual_dim)] {
            push_linear(&mut p, &format!("{stream}.in"), groups * c.group_dim, width, r);
            for blk in 0..c.transformer_blocks {
                let n = format!("{stream}.{blk}");
                for ln in ["ln1", "ln2"] {
                    p.push(format!("{n}.{ln}.g"), ArrayD::ones(IxDyn(&[width])));
                    p.push(format!("{n}.{ln}.b"), zeros(&[width]));
                }
                for proj in ["q", "k", "v", "o"] {
                    push_linear(&mut p, &format!("{n}.{proj}"), width, width, r);
                }
                push_linear(&mut p, &format!("{n}.ff1"), width, 2 * width, r);
                push_linear(&mut p, &format!("{n}.ff2"), 2 * width, width, r);
            }
            p.push(format!("{stream}.ln.g"), ArrayD::ones(IxDyn(&[width])));
            p.push(format!("{stream}.ln.b"), zeros(&[width]));
        }
        p
    }

    /// Confidence-weighted joint features `[B*T, n, 3]` for one group. The
    /// right hand is mirrored so both hands present the same chirality.
    fn group_input(&self, pose: &Tensor, group: &Group, mirror: bool) -> Tensor {
        let (b, t) = (pose.shape()[0], pose.shape()[1]);
        let n = group.joints.len();
        let mut out = ArrayD::<f64>::zeros(IxDyn(&[b * t, n, 3]));
        for bi in 0..b {
            for ti in 0..t {
                for (k, &j) in group.joints.iter().enumerate() {
                    let (x, y, c) = (pose[[bi, ti, j, 0]], pose[[bi, ti, j, 1]], pose[[bi, ti, j, 2]]);
                    let dx = if mirror { 0.5 - x } else { x - 0.5 };
                    out[[bi * t + ti, k, 0]] = dx * c;
                    out[[bi * t + ti, k, 1]] = (y - 0.5) * c;
                    out[[bi * t + ti, k, 2]] = c;
                }
            }
        }
        out
    }

    /// Spatial-temporal graph blocks over one group, pooled over its joints:
    /// `[B*T, group_dim]`.
    fn group_features(&self, g: &mut Graph, p: &Bound, slot: usize, pose: &Tensor) -> Var {
        let (b, t) = (pose.shape()[0], pose.shape()[1]);
        let (name, group) = self.cfg.groups.ordered()[slot];
        let input = self.group_input(pose, group, name == "right_hand");
        let n = group.joints.len();
        let d = self.cfg.group_dim;
        let module = GROUP_MODULES[slot];
        let mut h = g.constant(input);
        for blk in 0..self.cfg.group_blocks {
            let pre = format!("{module}.{blk}");
            let cin = g.value(h).shape()[2];
            let flat = g.reshape(h, &[b * t * n, cin]);
            let lin = linear(g, p, &format!("{pre}.spatial"), flat);
            let lin = g.reshape(lin, &[b * t, n, d]);
            let mixed = g.joint_mix(lin, &self.adjacency[slot]);
            let spatial = g.relu(mixed);
            // temporal conv over each joint's channels: [B, D, T, n, 1]
            let seq = g.reshape(spatial, &[b, t, n, d]);
            let chan = g.permute(seq, &[0, 3, 1, 2]);
            let chan = g.reshape(chan, &[b, d, t, n, 1]);
            let tc = conv(g, p, &format!("{pre}.temporal"), chan, [1, 1, 1], [1, 0, 0]);
            let tc = g.reshape(tc, &[b, d, t, n]);
            let tc = g.permute(tc, &[0, 2, 3, 1]);
            let tc = g.reshape(tc, &[b * t, n, d]);
            let sum = g.add(tc, spatial);
            h = g.relu(sum);
        }
        g.mean_axes(h, &[1])
    }

    /// The five pooled group features in encoder order (left hand, right
    /// hand, body, face, mouth), each `[B*T, group_dim]`.
    pub fn group_stage(&self, g: &mut Graph, p: &Bound, pose: &Tensor) -> Result<[Var; 5]> {
        let shape = pose.shape();
        if shape.len() != 4 || shape[2] != self.cfg.num_joints || shape[3] != 3 {
            return Err(Error::Dimension(format!(
                "pose encoder expects [B, T, {}, 3], got {shape:?}",
                self.cfg.num_joints
            )));
        }
        Ok(std::array::from_fn(|slot| self.group_features(g, p, slot, pose)))
    }

    fn stream(&self, g: &mut Graph, p: &Bound, name: &str, x: Var, b: usize, t: usize) -> Var {
        let width = g.value(p.var(&format!("{name}.in.b"))).len();
        let h = linear(g, p, &format!("{name}.in"), x);
        let pe = sinusoid(t, width);
        let pe_tiled = ndarray::concatenate(ndarray::Axis(0), &vec![pe.view(); b]).expect("tile");
        let mut h = g.add_const(h, &pe_tiled.into_dyn());
        for blk in 0..self.cfg.transformer_blocks {
            let n = format!("{name}.{blk}");
            let ln = g.layer_norm(h, p.var(&format!("{n}.ln1.g")), p.var(&format!("{n}.ln1.b")), 1e-5);
            let q = linear(g, p, &format!("{n}.q"), ln);
            let k = linear(g, p, &format!("{n}.k"), ln);
            let v = linear(g, p, &format!("{n}.v"), ln);
            let att = g.attention(q, k, v, b, self.cfg.heads);
            let o = linear(g, p, &format!("{n}.o"), att);
            h = g.add(h, o);
            let ln = g.layer_norm(h, p.var(&format!("{n}.ln2.g")), p.var(&format!("{n}.ln2.b")), 1e-5);
            let f = linear(g, p, &format!("{n}.ff1"), ln);
            let f = g.relu(f);
            let f = linear(g, p, &format!("{n}.ff2"), f);
            h = g.add(h, f);
        }
        let h = g.layer_norm(h, p.var(&format!("{name}.ln.g")), p.var(&format!("{name}.ln.b")), 1e-5);
        let h = g.reshape(h, &[b, t, width]);
        g.mean_axes(h, &[1])
    }

    /// `pose [B, T, J, 3]` to `[B, out_dim]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, pose: &Tensor) -> Result<Var> {
        let [lh, rh, body, face, mouth] = self.group_stage(g, p, pose)?;
        let (b, t) = (pose.shape()[0], pose.shape()[1]);
        let manual = g.concat(&[lh, rh, body], 1);
        let non_manual = g.concat(&[face, mouth], 1);
        let m = self.stream(g, p, "manual", manual, b, t);
        let n = self.stream(g, p, "non_manual", non_manual, b, t);
        Ok(g.concat(&[m, n], 1))
    }
}

// -------------------------------------------------------------- heads ----

/// Two-layer MLP whose output is L2-normalized.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionHead {
    pub in_dim: usize,
    pub hidden: usize,
    pub out_dim: usize,
}

impl ProjectionHead {
    pub fn init(&self, r: &mut Rng) -> Params {
        let mut p = Params::new();
        push_linear(&mut p, "fc1", self.in_dim, self.hidden, r);
        push_linear(&mut p, "fc2", self.hidden, self.out_dim, r);
        p
    }

    pub fn descriptor(&self, prefix: &str) -> Vec<(String, String)> {
        describe(
            prefix,
            &[
                ("in_dim", self.in_dim.to_string()),
                ("hidden", self.hidden.to_string()),
                ("out_dim", self.out_dim.to_string()),
            ],
        )
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let h = linear(g, p, "fc1", x);
        let h = g.relu(h);
        let f = linear(g, p, "fc2", h);
        g.l2_normalize_rows(f)
    }
}

/// Single affine layer producing raw class logits.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub in_dim: usize,
    pub num_classes: usize,
}

impl Classifier {
    pub fn init(&self, r: &mut Rng) -> Params {
        let mut p = Params::new();
        push_linear(&mut p, "fc", self.in_dim, self.num_classes, r);
        p
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        linear(g, p, "fc", x)
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Compares two architecture descriptors; the error names the first field
/// that differs.
pub fn check_descriptor(checkpoint: &[(String, String)], config: &[(String, String)]) -> Result<()> {
    for (k, v) in config {
        match checkpoint.iter().find(|(ck, _)| ck == k) {
            Some((_, cv)) if cv == v => {}
            Some((_, cv)) => {
                return Err(Error::Architecture {
                    field: k.clone(),
                    checkpoint: cv.clone(),
                    config: v.clone(),
                })
            }
            None => {
                return Err(Error::Architecture {
                    field: k.clone(),
                    checkpoint: "<absent>".into(),
                    config: v.clone(),
                })
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use ndarray::Array4;
    use rand::Rng as _;

    fn random_pose(b: usize, t: usize, seed: u64) -> Tensor {
        let mut r = stream(seed, &[]);
        ArrayD::from_shape_fn(IxDyn(&[b, t, 25, 3]), |idx| if idx[3] == 2 { r.gen_range(0.3..1.0) } else { r.gen::<f64>() })
    }

    fn small_rgb() -> RgbEncoder {
        RgbEncoder::new(RgbEncoderConfig {
            stem_patch: 2,
            stem_channels: 3,
            stage_channels: vec![3, 4],
            out_dim: 5,
        })
        .unwrap()
    }

    fn small_pose() -> PoseEncoder {
        PoseEncoder::new(PoseEncoderConfig {
            group_dim: 4,
            manual_dim: 4,
            non_manual_dim: 4,
            ..PoseEncoderConfig::default()
        })
        .unwrap()
    }

    /// Central differences (small step, to stay clear of ReLU kinks) against the tape for a few entries
    /// of every parameter tensor.
    fn grad_check(params: &Params, loss: impl Fn(&mut Graph, &Bound) -> Var) {
        let mut g = Graph::new();
        let bound = params.bind(&mut g, true);
        let out = loss(&mut g, &bound);
        let grads = bound.grads(params, &g.backward(out));
        let eval = |p: &Params| {
            let mut g = Graph::no_grad();
            let b = p.bind(&mut g, false);
            let o = loss(&mut g, &b);
            g.scalar_value(o)
        };
        let h = 1e-6;
        for (pi, (name, value)) in params.iter().enumerate() {
            for idx in [0, value.len() / 2, value.len() - 1] {
                let mut plus = params.clone();
                let mut minus = params.clone();
                plus.values_mut()[pi].as_slice_mut().unwrap()[idx] += h;
                minus.values_mut()[pi].as_slice_mut().unwrap()[idx] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let an = grads.values()[pi].as_slice().unwrap()[idx];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                assert!(rel <= 1e-3 || (fd - an).abs() < 1e-8, "{name}[{idx}]: fd {fd} analytic {an}");
            }
        }
    }

    #[test]
    fn rgb_shapes_determinism_and_gradients() {
        let enc = small_rgb();
        let params = enc.init(&mut stream(0, &[]));
        let mut r = stream(1, &[]);
        let clip = RgbClip::new(Array4::from_shape_fn((4, 8, 8, 3), |_| r.gen::<f32>())).unwrap();
        let x = rgb_batch(&[&clip, &clip]);
        let mut g = Graph::no_grad();
        let b = params.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let out = enc.forward(&mut g, &b, xv).unwrap();
        let v = g.value(out);
        assert_eq!(v.shape(), &[2, 5]);
        assert!(v.iter().all(|x| x.is_finite()));
        assert_eq!(v.index_axis(ndarray::Axis(0), 0), v.index_axis(ndarray::Axis(0), 1));
        grad_check(&params, |g, b| {
            let xv = g.constant(x.clone());
            let o = enc.forward(g, b, xv).unwrap();
            let s = g.mean_all(o);
            g.scale(s, 10.0)
        });
    }

    #[test]
    fn default_rgb_output_dim() {
        let enc = RgbEncoder::new(RgbEncoderConfig::default()).unwrap();
        let params = enc.init(&mut stream(0, &[]));
        let clip = RgbClip::new(Array4::from_elem((8, 32, 32, 3), 0.3)).unwrap();
        let mut g = Graph::no_grad();
        let b = params.bind(&mut g, false);
        let x = g.constant(rgb_batch(&[&clip]));
        let out = enc.forward(&mut g, &b, x).unwrap();
        assert_eq!(g.value(out).shape(), &[1, 128]);
        let bad = g.constant(ArrayD::zeros(IxDyn(&[1, 2, 8, 32, 32])));
        assert!(enc.forward(&mut g, &b, bad).is_err());
    }

    #[test]
    fn pose_shapes_and_gradients() {
        let enc = small_pose();
        let params = enc.init(&mut stream(2, &[]));
        let pose = random_pose(2, 3, 3);
        let mut g = Graph::no_grad();
        let b = params.bind(&mut g, false);
        let out = enc.forward(&mut g, &b, &pose).unwrap();
        assert_eq!(g.value(out).shape(), &[2, 8]);
        grad_check(&params, |g, b| {
            let o = enc.forward(g, b, &pose).unwrap();
            g.mean_all(o)
        });
    }

    #[test]
    fn default_pose_output_dim() {
        let enc = PoseEncoder::new(PoseEncoderConfig::default()).unwrap();
        assert_eq!(enc.out_dim(), 128);
        let params = enc.init(&mut stream(0, &[]));
        let mut g = Graph::no_grad();
        let b = params.bind(&mut g, false);
        let out = enc.forward(&mut g, &b, &random_pose(1, 8, 0)).unwrap();
        assert_eq!(g.value(out).shape(), &[1, 128]);
        assert!(enc.forward(&mut g, &b, &ArrayD::zeros(IxDyn(&[1, 8, 20, 3]))).is_err());
    }

    #[test]
    fn out_of_range_group_rejected() {
        let mut cfg = PoseEncoderConfig::default();
        cfg.groups.face.joints.push(40);
        assert!(PoseEncoder::new(cfg).is_err());
    }

    #[test]
    fn mirrored_hands_swap_manual_slots() {
        let enc = small_pose();
        let params = enc.init(&mut stream(4, &[]));
        let a = random_pose(1, 3, 5);
        let groups = &enc.cfg.groups;
        let mut swapped = a.clone();
        for (&l, &r) in groups.left_hand.joints.iter().zip(&groups.right_hand.joints) {
            for t in 0..3 {
                for (dst, src) in [(l, r), (r, l)] {
                    swapped[[0, t, dst, 0]] = 1.0 - a[[0, t, src, 0]];
                    swapped[[0, t, dst, 1]] = a[[0, t, src, 1]];
                    swapped[[0, t, dst, 2]] = a[[0, t, src, 2]];
                }
            }
        }
        let mut g = Graph::no_grad();
        let b = params.bind(&mut g, false);
        let [lh_a, rh_a, ..] = enc.group_stage(&mut g, &b, &a).unwrap();
        let [lh_b, rh_b, ..] = enc.group_stage(&mut g, &b, &swapped).unwrap();
        let close = |x: &Tensor, y: &Tensor| x.iter().zip(y).all(|(p, q)| (p - q).abs() < 1e-12);
        assert!(close(g.value(lh_b), g.value(rh_a)));
        assert!(close(g.value(rh_b), g.value(lh_a)));
        assert!(!close(g.value(lh_a), g.value(rh_a)));
    }

    #[test]
    fn zero_confidence_erases_coordinates() {
        let enc = small_pose();
        let params = enc.init(&mut stream(6, &[]));
        let mut masked = random_pose(1, 4, 7);
        for t in 0..4 {
            for j in 0..25 {
                masked[[0, t, j, 2]] = 0.0;
            }
        }
        let zero = ArrayD::zeros(IxDyn(&[1, 4, 25, 3]));
        let mut g = Graph::no_grad();
        let b = params.bind(&mut g, false);
        let x = enc.forward(&mut g, &b, &masked).unwrap();
        let y = enc.forward(&mut g, &b, &zero).unwrap();
        assert_eq!(g.value(x), g.value(y));

        // A single joint at zero confidence: its coordinates are irrelevant.
        let mut p1 = random_pose(1, 4, 8);
        p1[[0, 2, 7, 2]] = 0.0;
        let mut p2 = p1.clone();
        p2[[0, 2, 7, 0]] = 0.123;
        p2[[0, 2, 7, 1]] = 0.987;
        let x = enc.forward(&mut g, &b, &p1).unwrap();
        let y = enc.forward(&mut g, &b, &p2).unwrap();
        assert_eq!(g.value(x), g.value(y));
    }

    #[test]
    fn projection_and_classifier() {
        let head = ProjectionHead {
            in_dim: 6,
            hidden: 5,
            out_dim: 4,
        };
        let params = head.init(&mut stream(9, &[]));
        let mut r = stream(10, &[]);
        let x: Tensor = ArrayD::from_shape_fn(IxDyn(&[3, 6]), |_| r.gen_range(-1.0..1.0));
        let mut g = Graph::no_grad();
        let b = params.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let f = head.forward(&mut g, &b, xv);
        for row in g.value(f).rows() {
            assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-6);
        }
        let probe: Tensor = ArrayD::from_shape_fn(IxDyn(&[3, 4]), |_| r.gen_range(-1.0..1.0));
        grad_check(&params, |g, b| {
            let xv = g.constant(x.clone());
            let f = head.forward(g, b, xv);
            let pv = g.constant(probe.clone());
            let m = g.mul(f, pv);
            g.mean_all(m)
        });

        let clf = Classifier { in_dim: 6, num_classes: 7 };
        let mut cp = clf.init(&mut stream(11, &[]));
        grad_check(&cp, |g, b| {
            let xv = g.constant(x.clone());
            let l = clf.forward(g, b, xv);
            g.cross_entropy(l, &[0, 3, 6])
        });
        cp.values_mut().iter_mut().for_each(|v| v.fill(0.0));
        let mut g = Graph::no_grad();
        let b = cp.bind(&mut g, false);
        let xv = g.constant(x);
        let l = clf.forward(&mut g, &b, xv);
        assert_eq!(g.value(l).shape(), &[3, 7]);
        assert!(g.value(l).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adjacency_is_symmetric_normalized() {
        let a = normalized_adjacency(&PoseGroups::toy().left_hand);
        assert_eq!(a, a.t());
        // wrist touches all four fingertips: degree 5
        assert!((a[[0, 0]] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn descriptor_mismatch_names_field() {
        let a = RgbEncoder::new(RgbEncoderConfig::default()).unwrap().descriptor();
        let b = RgbEncoder::new(RgbEncoderConfig {
            out_dim: 64,
            ..RgbEncoderConfig::default()
        })
        .unwrap()
        .descriptor();
        match check_descriptor(&a, &b) {
            Err(Error::Architecture { field, .. }) => assert_eq!(field, "rgb.out_dim"),
            other => panic!("{other:?}"),
        }
        check_descriptor(&a, &a).unwrap();
    }
}
