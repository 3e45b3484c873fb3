//! Pre-training and fine-tuning loops, SGD, learning-rate schedule and
//! checkpoints.

use std::fs::{self, File, OpenOptions};
use std::io::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;

use crate::augment::{make_views, train_view, AugmentConfig};
use crate::autograd::{Graph, Params, Tensor};
use crate::checkpoint::Checkpoint;
use crate::contrastive::{
    ema_update, enqueue_keys, pretrain_losses, round_f32, BatchViews, BranchState, LossConfig, LossReport,
    MemoryBank, Modality, Networks,
};
use crate::corpus::Sample;
use crate::encoders::{check_descriptor, pose_batch, rgb_batch, Classifier, PoseEncoder, PoseEncoderConfig, RgbEncoder, RgbEncoderConfig};
use crate::error::{invalid, Error, Result};
use crate::eval::{classify_features, extract_features};
use crate::mpm::LatentCodec;
use crate::parallel;
use crate::rng::{stream, TAG_BANK, TAG_INIT, TAG_SHUFFLE, TAG_VIEW};

// ----------------------------------------------------------- schedule ----

#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub epochs: usize,
    pub base_lr: f64,
    pub batch_size: usize,
    pub lr_drop_epochs: Vec<usize>,
    pub lr_drop_factor: f64,
}

impl Schedule {
    pub fn paper_pretrain() -> Self {
        Self {
            epochs: 140,
            base_lr: 0.01,
            batch_size: 64,
            lr_drop_epochs: vec![100],
            lr_drop_factor: 0.1,
        }
    }

    pub fn paper_finetune() -> Self {
        Self {
            epochs: 40,
            base_lr: 0.05,
            batch_size: 128,
            lr_drop_epochs: vec![25, 35],
            lr_drop_factor: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return invalid("epochs and batch_size must be at least 1");
        }
        if !(self.base_lr > 0.0) {
            return invalid("base_lr must be positive");
        }
        if !(self.lr_drop_factor > 0.0) {
            return invalid("lr_drop_factor must be positive");
        }
        let d = &self.lr_drop_epochs;
        if d.windows(2).any(|w| w[0] >= w[1]) || d.last().is_some_and(|&e| e >= self.epochs) {
            return invalid("lr_drop_epochs must be strictly increasing and below epochs");
        }
        Ok(())
    }
}

/// `base_lr * factor^(number of drop epochs <= epoch)`. Division by the
/// reciprocal keeps decimal factors such as 0.1 exact.
pub fn lr_at(epoch: usize, s: &Schedule) -> f64 {
    let drops = s.lr_drop_epochs.iter().filter(|&&e| e <= epoch).count() as i32;
    s.base_lr / (1.0 / s.lr_drop_factor).powi(drops)
}

/// SGD with momentum and L2 weight decay.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    /// Rescales each parameter group's gradient to at most this L2 norm.
    pub clip_norm: Option<f64>,
}

impl Default for Sgd {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            weight_decay: 1e-4,
            clip_norm: None,
        }
    }
}

impl Sgd {
    /// `v <- mu v + (grad + wd theta)`, `theta <- theta - lr v`. Both are
    /// kept f32-representable.
    pub fn step(&self, params: &mut Params, grads: &Params, velocity: &mut Params, lr: f64) {
        let norm = grads.values().iter().map(|g| g.iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
        let gain = match self.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        for ((p, g), v) in params
            .values_mut()
            .iter_mut()
            .zip(grads.values())
            .zip(velocity.values_mut().iter_mut())
        {
            ndarray::Zip::from(p).and(g).and(v).for_each(|p, &g, v| {
                *v = round_f32(self.momentum * *v + gain * g + self.weight_decay * *p);
                if lr != 0.0 {
                    *p = round_f32(*p - lr * *v);
                }
            });
        }
    }
}

fn round_params(p: &mut Params) {
    for v in p.values_mut() {
        v.mapv_inplace(round_f32);
    }
}

// -------------------------------------------------------------- model ----

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub rgb: RgbEncoderConfig,
    pub pose: PoseEncoderConfig,
    pub proj_hidden: usize,
    pub proj_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            rgb: RgbEncoderConfig::default(),
            pose: PoseEncoderConfig::default(),
            proj_hidden: 128,
            proj_dim: 128,
        }
    }
}

impl ModelConfig {
    pub fn build(&self) -> Result<Networks> {
        if self.proj_hidden == 0 || self.proj_dim == 0 {
            return invalid("projection sizes must be positive");
        }
        Ok(Networks::new(
            RgbEncoder::new(self.rgb.clone())?,
            PoseEncoder::new(self.pose.clone())?,
            self.proj_hidden,
            self.proj_dim,
        ))
    }
}

fn put_descriptor(ckpt: &mut Checkpoint, nets: &Networks) {
    for (k, v) in nets.descriptor() {
        ckpt.set_meta(&format!("arch.{k}"), v);
    }
}

fn expect_kind(ckpt: &Checkpoint, kind: &str) -> Result<()> {
    match ckpt.meta("kind") {
        Some(k) if k == kind => Ok(()),
        other => invalid(format!("expected a {kind} checkpoint, found {}", other.unwrap_or("<none>"))),
    }
}

// ----------------------------------------------------------- pretrain ----

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub model: ModelConfig,
    pub schedule: Schedule,
    pub sgd: Sgd,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
    pub bank_size: usize,
    pub seed: u64,
    /// Stops early after this many optimizer steps in total.
    pub max_steps: Option<usize>,
    /// Data-preparation workers.
    pub threads: usize,
    /// Writes an extra checkpoint every this many epochs.
    pub save_every: Option<usize>,
    /// Hash of the resolved run config, stamped into checkpoints.
    pub config_hash: String,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            schedule: Schedule {
                epochs: 20,
                base_lr: 0.01,
                batch_size: 16,
                lr_drop_epochs: vec![15],
                lr_drop_factor: 0.1,
            },
            sgd: Sgd::default(),
            loss: LossConfig::default(),
            augment: AugmentConfig::default(),
            bank_size: 512,
            seed: 0,
            max_steps: None,
            threads: 1,
            save_every: None,
            config_hash: String::new(),
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.augment.validate()?;
        self.loss.validate(self.bank_size)?;
        if self.bank_size % self.schedule.batch_size != 0 {
            return invalid(format!(
                "batch size {} must divide the memory bank size {}",
                self.schedule.batch_size, self.bank_size
            ));
        }
        Ok(())
    }
}

/// How often each per-step state transition has happened, per branch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counters {
    pub optimizer_steps: [usize; 2],
    pub ema_updates: [usize; 2],
    pub enqueues: [usize; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub report: LossReport,
}

impl StepLog {
    /// One loss-log record, tab separated.
    pub fn tsv(&self) -> String {
        let r = &self.report;
        format!(
            "{}\t{:.9}\t{:.9}\t{:.9}\t{:.9}\t{:.9}\t{:.9}\t{:.9}\t{}",
            self.step, r.l_cl_r, r.l_cl_p, r.l_spm_r, r.l_spm_p, r.l_r2p, r.l_p2r, r.total, self.lr
        )
    }
}

/// Momentum buffers for one branch's query encoder and head.
#[derive(Clone, Debug, PartialEq)]
struct Velocity {
    encoder: Params,
    head: Params,
}

/// Complete pre-training state; every step is a pure function of it and
/// the corpus.
#[derive(Clone, Debug)]
pub struct Pretrainer {
    pub cfg: PretrainConfig,
    pub nets: Networks,
    /// `[rgb, pose]`.
    pub branches: [BranchState; 2],
    velocity: [Velocity; 2],
    pub step: usize,
    pub counters: Counters,
    codec: Option<LatentCodec>,
}

fn branch_index(m: Modality) -> usize {
    match m {
        Modality::Rgb => 0,
        Modality::Pose => 1,
    }
}

impl Pretrainer {
    /// Seeded initialization.
    pub fn new(cfg: PretrainConfig) -> Result<Self> {
        cfg.validate()?;
        let nets = cfg.model.build()?;
        let mut branches = Vec::with_capacity(2);
        for m in Modality::BOTH {
            let i = branch_index(m) as u64;
            let mut init = stream(cfg.seed, &[TAG_INIT, i]);
            let mut bank = stream(cfg.seed, &[TAG_BANK, i]);
            branches.push(BranchState::init(&nets, m, cfg.bank_size, &mut init, &mut bank)?);
        }
        let pose = branches.pop().expect("pose branch");
        let rgb = branches.pop().expect("rgb branch");
        let velocity = [&rgb, &pose].map(|b| Velocity {
            encoder: b.encoder_q.zeros_like(),
            head: b.head_q.zeros_like(),
        });
        Ok(Self {
            cfg,
            nets,
            branches: [rgb, pose],
            velocity,
            step: 0,
            counters: Counters::default(),
            codec: None,
        })
    }

    /// Restores a pre-training checkpoint; the next step continues exactly
    /// where the saved run stopped.
    pub fn resume(cfg: PretrainConfig, ckpt: &Checkpoint) -> Result<Self> {
        let mut t = Self::new(cfg)?;
        expect_kind(ckpt, "pretrain")?;
        check_descriptor(&ckpt.meta_section("arch"), &t.nets.descriptor())?;
        for m in Modality::BOTH {
            let i = branch_index(m);
            let n = m.name();
            let b = &mut t.branches[i];
            b.encoder_q = ckpt.params(&format!("{n}.encoder_q"), &b.encoder_q)?;
            b.encoder_k = ckpt.params(&format!("{n}.encoder_k"), &b.encoder_k)?;
            b.head_q = ckpt.params(&format!("{n}.head_q"), &b.head_q)?;
            b.head_k = ckpt.params(&format!("{n}.head_k"), &b.head_k)?;
            for (bank, slot) in [("g_bank", &mut b.g_bank), ("f_bank", &mut b.f_bank)] {
                let rows = ckpt.array(&format!("{n}.{bank}"))?;
                let rows: Array2<f64> = rows
                    .into_dimensionality()
                    .map_err(|_| Error::Invalid(format!("{n}.{bank} is not a matrix")))?;
                if rows.dim() != (slot.capacity(), slot.dim()) {
                    return Err(Error::Architecture {
                        field: format!("{n}.{bank}"),
                        checkpoint: format!("{:?}", rows.dim()),
                        config: format!("{:?}", (slot.capacity(), slot.dim())),
                    });
                }
                *slot = MemoryBank::restore(rows, ckpt.meta_usize(&format!("{n}.{bank}.cursor"))?)?;
            }
            let v = &mut t.velocity[i];
            v.encoder = ckpt.params(&format!("{n}.velocity.encoder"), &v.encoder)?;
            v.head = ckpt.params(&format!("{n}.velocity.head"), &v.head)?;
            t.counters.optimizer_steps[i] = ckpt.meta_usize(&format!("{n}.optimizer_steps"))?;
            t.counters.ema_updates[i] = ckpt.meta_usize(&format!("{n}.ema_updates"))?;
            t.counters.enqueues[i] = ckpt.meta_usize(&format!("{n}.enqueues"))?;
        }
        t.step = ckpt.meta_usize("step")?;
        Ok(t)
    }

    pub fn checkpoint(&self, num_samples: usize) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.set_meta("kind", "pretrain");
        c.set_meta("config_hash", &self.cfg.config_hash);
        c.set_meta("step", self.step);
        c.set_meta("epoch", self.step / self.steps_per_epoch(num_samples).max(1));
        put_descriptor(&mut c, &self.nets);
        for m in Modality::BOTH {
            let i = branch_index(m);
            let n = m.name();
            let b = &self.branches[i];
            c.set_meta(&format!("{n}.g_bank.cursor"), b.g_bank.cursor());
            c.set_meta(&format!("{n}.f_bank.cursor"), b.f_bank.cursor());
            c.set_meta(&format!("{n}.optimizer_steps"), self.counters.optimizer_steps[i]);
            c.set_meta(&format!("{n}.ema_updates"), self.counters.ema_updates[i]);
            c.set_meta(&format!("{n}.enqueues"), self.counters.enqueues[i]);
            c.push_params(&format!("{n}.encoder_q"), &b.encoder_q);
            c.push_params(&format!("{n}.encoder_k"), &b.encoder_k);
            c.push_params(&format!("{n}.head_q"), &b.head_q);
            c.push_params(&format!("{n}.head_k"), &b.head_k);
            c.push_array(format!("{n}.g_bank"), &b.g_bank.rows().clone().into_dyn());
            c.push_array(format!("{n}.f_bank"), &b.f_bank.rows().clone().into_dyn());
            c.push_params(&format!("{n}.velocity.encoder"), &self.velocity[i].encoder);
            c.push_params(&format!("{n}.velocity.head"), &self.velocity[i].head);
        }
        c
    }

    /// Full batches per epoch; the last partial batch is dropped.
    pub fn steps_per_epoch(&self, num_samples: usize) -> usize {
        num_samples / self.cfg.schedule.batch_size
    }

    pub fn total_steps(&self, num_samples: usize) -> usize {
        let full = self.cfg.schedule.epochs * self.steps_per_epoch(num_samples);
        self.cfg.max_steps.map_or(full, |m| m.min(full))
    }

    /// Sample positions of the batch consumed at `step`.
    pub fn batch_indices(&self, num_samples: usize, step: usize) -> Vec<usize> {
        let spe = self.steps_per_epoch(num_samples).max(1);
        let (epoch, within) = (step / spe, step % spe);
        let mut order: Vec<usize> = (0..num_samples).collect();
        order.shuffle(&mut stream(self.cfg.seed, &[TAG_SHUFFLE, 0, epoch as u64]));
        let b = self.cfg.schedule.batch_size;
        order[within * b..(within + 1) * b].to_vec()
    }

    fn codec_for(&mut self, samples: &[Sample]) -> Option<LatentCodec> {
        let a = &self.cfg.augment;
        if a.mpm_alpha <= 0.0 || a.mpm_views == crate::augment::MpmViews::Neither {
            return None;
        }
        let clip = &samples[0].clip;
        if self.codec.as_ref().is_none_or(|c| c.latent_dim() != clip.height() * clip.width() * 3) {
            self.codec = Some(LatentCodec::new(clip.height(), clip.width(), self.cfg.seed));
        }
        self.codec.clone()
    }

    /// One optimization step: views, losses, SGD on the query pathway,
    /// momentum update of the key pathway, then enqueue.
    pub fn train_step(&mut self, samples: &[Sample]) -> Result<StepLog> {
        let b = self.cfg.schedule.batch_size;
        if samples.len() < b {
            return invalid(format!("corpus has {} samples, fewer than one batch of {b}", samples.len()));
        }
        let codec = self.codec_for(samples);
        let step = self.step;
        let picks = self.batch_indices(samples.len(), step);
        let aug = &self.cfg.augment;
        let seed = self.cfg.seed;
        let views = parallel::map(&picks, self.cfg.threads, |&i| {
            let mut r = stream(seed, &[TAG_VIEW, 0, step as u64, i as u64]);
            make_views(&samples[i], aug, &mut r, codec.as_ref())
        })?;
        let batch = BatchViews::from_views(&views);
        let [rgb, pose] = &self.branches;
        let out = pretrain_losses(&self.nets, &batch, rgb, pose, &self.cfg.loss, step, true)?;
        let grads = out.grads.expect("gradients requested");

        let epoch = step / self.steps_per_epoch(samples.len()).max(1);
        let lr = lr_at(epoch.min(self.cfg.schedule.epochs - 1), &self.cfg.schedule);
        for (i, g) in grads.iter().enumerate() {
            let (branch, vel) = (&mut self.branches[i], &mut self.velocity[i]);
            self.cfg.sgd.step(&mut branch.encoder_q, &g.encoder_q, &mut vel.encoder, lr);
            self.cfg.sgd.step(&mut branch.head_q, &g.head_q, &mut vel.head, lr);
            self.counters.optimizer_steps[i] += 1;
            ema_update(&branch.encoder_q, &mut branch.encoder_k, self.cfg.loss.gamma)?;
            ema_update(&branch.head_q, &mut branch.head_k, self.cfg.loss.gamma)?;
            round_params(&mut branch.encoder_k);
            round_params(&mut branch.head_k);
            self.counters.ema_updates[i] += 1;
            enqueue_keys(branch, &out.keys[i])?;
            self.counters.enqueues[i] += 1;
        }
        self.step += 1;
        Ok(StepLog {
            step,
            epoch,
            lr,
            report: out.report,
        })
    }
}

pub struct PretrainOutcome {
    pub trainer: Pretrainer,
    pub log: Vec<StepLog>,
    pub checkpoint: Checkpoint,
}

/// Runs pre-training to completion (or `max_steps`). With `out_dir`, writes
/// `loss_log.tsv`, `checkpoint.ckpt` and periodic `checkpoint_epochNNNN.ckpt`.
pub fn pretrain(cfg: &PretrainConfig, samples: &[Sample], out_dir: Option<&Path>, resume: Option<&Checkpoint>) -> Result<PretrainOutcome> {
    let mut t = match resume {
        Some(c) => Pretrainer::resume(cfg.clone(), c)?,
        None => Pretrainer::new(cfg.clone())?,
    };
    if samples.len() < cfg.schedule.batch_size {
        return invalid(format!(
            "corpus has {} samples, fewer than one batch of {}",
            samples.len(),
            cfg.schedule.batch_size
        ));
    }
    let mut log_file = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("loss_log.tsv");
            let f = if resume.is_some() {
                OpenOptions::new().create(true).append(true).open(&path)
            } else {
                File::create(&path)
            };
            Some((f.map_err(|e| Error::io(&path, e))?, path))
        }
        None => None,
    };
    let spe = t.steps_per_epoch(samples.len());
    let total = t.total_steps(samples.len());
    let mut log = Vec::new();
    while t.step < total {
        let entry = t.train_step(samples)?;
        if let Some((f, path)) = log_file.as_mut() {
            writeln!(f, "{}", entry.tsv()).map_err(|e| Error::io(path.as_path(), e))?;
        }
        log.push(entry);
        if let (Some(dir), Some(every)) = (out_dir, cfg.save_every) {
            if every > 0 && t.step % spe == 0 && (t.step / spe) % every == 0 {
                let path = dir.join(format!("checkpoint_epoch{:04}.ckpt", t.step / spe));
                t.checkpoint(samples.len()).write(&path)?;
            }
        }
    }
    let checkpoint = t.checkpoint(samples.len());
    if let Some(dir) = out_dir {
        checkpoint.write(&dir.join("checkpoint.ckpt"))?;
    }
    Ok(PretrainOutcome {
        trainer: t,
        log,
        checkpoint,
    })
}

// ----------------------------------------------------------- finetune ----

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneConfig {
    pub model: ModelConfig,
    pub schedule: Schedule,
    pub sgd: Sgd,
    pub augment: AugmentConfig,
    /// Train only the classifier heads on frozen, cached features.
    pub freeze_encoder: bool,
    pub num_classes: usize,
    pub seed: u64,
    pub threads: usize,
    pub config_hash: String,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            schedule: Schedule {
                epochs: 10,
                base_lr: 0.05,
                batch_size: 32,
                lr_drop_epochs: vec![6, 8],
                lr_drop_factor: 0.1,
            },
            sgd: Sgd::default(),
            augment: AugmentConfig {
                mpm_alpha: 0.0,
                ..AugmentConfig::default()
            },
            freeze_encoder: false,
            num_classes: 10,
            seed: 0,
            threads: 1,
            config_hash: String::new(),
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.augment.validate()?;
        if self.num_classes < 2 {
            return invalid("fine-tuning needs at least two classes");
        }
        Ok(())
    }
}

/// Encoders plus one linear classifier per branch.
#[derive(Clone, Debug, PartialEq)]
pub struct FinetunedModel {
    /// `[rgb, pose]`.
    pub encoders: [Params; 2],
    pub classifiers: [Params; 2],
    pub num_classes: usize,
}

fn classifier_for(nets: &Networks, m: Modality, classes: usize) -> Classifier {
    Classifier {
        in_dim: nets.embed_dim(m),
        num_classes: classes,
    }
}

impl FinetunedModel {
    pub fn checkpoint(&self, nets: &Networks, config_hash: &str) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.set_meta("kind", "finetune");
        c.set_meta("config_hash", config_hash);
        c.set_meta("num_classes", self.num_classes);
        put_descriptor(&mut c, nets);
        for m in Modality::BOTH {
            let i = branch_index(m);
            c.push_params(&format!("{}.encoder", m.name()), &self.encoders[i]);
            c.push_params(&format!("{}.classifier", m.name()), &self.classifiers[i]);
        }
        c
    }

    pub fn from_checkpoint(nets: &Networks, ckpt: &Checkpoint) -> Result<Self> {
        expect_kind(ckpt, "finetune")?;
        check_descriptor(&ckpt.meta_section("arch"), &nets.descriptor())?;
        let num_classes = ckpt.meta_usize("num_classes")?;
        let mut r = stream(0, &[]);
        let mut load = |m: Modality| -> Result<(Params, Params)> {
            let enc = ckpt.params(&format!("{}.encoder", m.name()), &nets.init_encoder(m, &mut r))?;
            let cls = classifier_for(nets, m, num_classes).init(&mut r);
            let cls = ckpt.params(&format!("{}.classifier", m.name()), &cls)?;
            Ok((enc, cls))
        };
        let (er, cr) = load(Modality::Rgb)?;
        let (ep, cp) = load(Modality::Pose)?;
        Ok(Self {
            encoders: [er, ep],
            classifiers: [cr, cp],
            num_classes,
        })
    }

    /// Per-branch logits `[rgb, pose]` on deterministic evaluation views.
    pub fn logits(&self, nets: &Networks, samples: &[&Sample], t_model: usize, threads: usize) -> Result<[Array2<f64>; 2]> {
        let mut out = Vec::with_capacity(2);
        for m in Modality::BOTH {
            let i = branch_index(m);
            let feats = extract_features(nets, m, &self.encoders[i], samples, t_model, threads)?;
            out.push(classify_features(&classifier_for(nets, m, self.num_classes), &self.classifiers[i], &feats));
        }
        let p = out.pop().expect("pose logits");
        let r = out.pop().expect("rgb logits");
        Ok([r, p])
    }
}

/// Query encoders of a pre-training checkpoint, `[rgb, pose]`.
pub fn pretrained_encoders(nets: &Networks, ckpt: &Checkpoint) -> Result<[Params; 2]> {
    expect_kind(ckpt, "pretrain")?;
    check_descriptor(&ckpt.meta_section("arch"), &nets.descriptor())?;
    let mut r = stream(0, &[]);
    let rgb = ckpt.params("rgb.encoder_q", &nets.init_encoder(Modality::Rgb, &mut r))?;
    let pose = ckpt.params("pose.encoder_q", &nets.init_encoder(Modality::Pose, &mut r))?;
    Ok([rgb, pose])
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    /// Summed cross-entropy of the two branches on the epoch's first batch.
    pub first: f64,
    pub last: f64,
    pub mean: f64,
}

pub struct FinetuneOutcome {
    pub model: FinetunedModel,
    pub epochs: Vec<EpochLoss>,
    /// Fraction of training samples whose fused prediction was correct, on
    /// the final epoch's batches.
    pub train_accuracy: f64,
}

/// Fine-tunes from pre-trained encoders, or from a seeded random
/// initialization when `pretrained` is `None`.
pub fn finetune(cfg: &FinetuneConfig, pretrained: Option<&Checkpoint>, samples: &[Sample]) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return invalid("cannot fine-tune on an empty corpus");
    }
    if let Some(bad) = samples.iter().find(|s| s.label >= cfg.num_classes) {
        return invalid(format!("label {} exceeds num_classes = {}", bad.label, cfg.num_classes));
    }
    let nets = cfg.model.build()?;
    let encoders = match pretrained {
        Some(c) => pretrained_encoders(&nets, c)?,
        None => Modality::BOTH.map(|m| {
            let mut p = nets.init_encoder(m, &mut stream(cfg.seed, &[TAG_INIT, branch_index(m) as u64]));
            round_params(&mut p);
            p
        }),
    };
    let classifiers = Modality::BOTH.map(|m| {
        classifier_for(&nets, m, cfg.num_classes).init(&mut stream(cfg.seed, &[TAG_INIT, 10 + branch_index(m) as u64]))
    });
    let model = FinetunedModel {
        encoders,
        classifiers,
        num_classes: cfg.num_classes,
    };
    if cfg.freeze_encoder {
        linear_probe(cfg, &nets, model, samples)
    } else {
        joint_finetune(cfg, &nets, model, samples)
    }
}

fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, &[TAG_SHUFFLE, 1, epoch as u64]));
    order
}

fn summarize(epoch: usize, losses: &[f64]) -> EpochLoss {
    EpochLoss {
        epoch,
        first: losses[0],
        last: *losses.last().expect("non-empty epoch"),
        mean: losses.iter().sum::<f64>() / losses.len() as f64,
    }
}

fn fused_hits(logits: [&Tensor; 2], labels: &[usize]) -> usize {
    let fused = logits[0] + logits[1];
    fused
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("rank 2")
        .axis_iter(Axis(0))
        .zip(labels)
        .filter(|(row, &l)| crate::eval::in_top_k(row.view(), l, 1))
        .count()
}

fn joint_finetune(cfg: &FinetuneConfig, nets: &Networks, mut model: FinetunedModel, samples: &[Sample]) -> Result<FinetuneOutcome> {
    let heads = Modality::BOTH.map(|m| classifier_for(nets, m, cfg.num_classes));
    let mut vel_enc = model.encoders.clone().map(|p| p.zeros_like());
    let mut vel_cls = model.classifiers.clone().map(|p| p.zeros_like());
    let b = cfg.schedule.batch_size;
    let mut epochs = Vec::new();
    let mut hits = 0;
    let mut step = 0u64;
    for epoch in 0..cfg.schedule.epochs {
        let lr = lr_at(epoch, &cfg.schedule);
        let order = epoch_order(cfg.seed, epoch, samples.len());
        let mut losses = Vec::new();
        hits = 0;
        for picks in order.chunks(b) {
            let views = parallel::map(picks, cfg.threads, |&i| {
                train_view(&samples[i], &cfg.augment, &mut stream(cfg.seed, &[TAG_VIEW, 1, step, i as u64]))
            })?;
            let labels: Vec<usize> = picks.iter().map(|&i| samples[i].label).collect();
            let inputs = [
                rgb_batch(&views.iter().map(|v| &v.rgb).collect::<Vec<_>>()),
                pose_batch(&views.iter().map(|v| &v.pose).collect::<Vec<_>>()),
            ];
            let mut g = Graph::new();
            let mut terms = Vec::new();
            let mut bounds = Vec::new();
            let mut logit_vars = Vec::new();
            for m in Modality::BOTH {
                let i = branch_index(m);
                let be = model.encoders[i].bind(&mut g, true);
                let bc = model.classifiers[i].bind(&mut g, true);
                let feat = nets.encode(m, &mut g, &be, &inputs[i])?;
                let logits = heads[i].forward(&mut g, &bc, feat);
                terms.push(g.cross_entropy(logits, &labels));
                logit_vars.push(logits);
                bounds.push((be, bc));
            }
            let total = g.sum_vars(&terms);
            losses.push(g.scalar_value(total));
            hits += fused_hits([g.value(logit_vars[0]), g.value(logit_vars[1])], &labels);
            let sweep = g.backward(total);
            for (i, (be, bc)) in bounds.iter().enumerate() {
                let ge = be.grads(&model.encoders[i], &sweep);
                let gc = bc.grads(&model.classifiers[i], &sweep);
                cfg.sgd.step(&mut model.encoders[i], &ge, &mut vel_enc[i], lr);
                cfg.sgd.step(&mut model.classifiers[i], &gc, &mut vel_cls[i], lr);
            }
            step += 1;
        }
        epochs.push(summarize(epoch, &losses));
    }
    Ok(FinetuneOutcome {
        model,
        epochs,
        train_accuracy: hits as f64 / samples.len() as f64,
    })
}

/// Per-dimension mean and standard deviation of feature columns.
fn column_stats(x: &Array2<f64>) -> (Array1<f64>, Array1<f64>) {
    let mean = x.mean_axis(Axis(0)).expect("non-empty");
    let std = x.std_axis(Axis(0), 0.0).mapv(|s| s.max(1e-6));
    (mean, std)
}

/// Trains only the classifier heads on standardized features of the
/// deterministic evaluation views, then folds the standardization into the
/// heads so they apply to raw encoder outputs.
fn linear_probe(cfg: &FinetuneConfig, nets: &Networks, mut model: FinetunedModel, samples: &[Sample]) -> Result<FinetuneOutcome> {
    let refs: Vec<&Sample> = samples.iter().collect();
    let labels_all: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let mut feats = Vec::with_capacity(2);
    let mut stats = Vec::with_capacity(2);
    for m in Modality::BOTH {
        let raw = extract_features(nets, m, &model.encoders[branch_index(m)], &refs, cfg.augment.t_model, cfg.threads)?;
        let (mean, std) = column_stats(&raw);
        feats.push((&raw - &mean) / &std);
        stats.push((mean, std));
    }
    let heads = Modality::BOTH.map(|m| classifier_for(nets, m, cfg.num_classes));
    let mut vel = model.classifiers.clone().map(|p| p.zeros_like());
    let mut epochs = Vec::new();
    let mut hits = 0;
    for epoch in 0..cfg.schedule.epochs {
        let lr = lr_at(epoch, &cfg.schedule);
        let order = epoch_order(cfg.seed, epoch, samples.len());
        let mut losses = Vec::new();
        hits = 0;
        for picks in order.chunks(cfg.schedule.batch_size) {
            let labels: Vec<usize> = picks.iter().map(|&i| labels_all[i]).collect();
            let mut g = Graph::new();
            let mut terms = Vec::new();
            let mut bounds = Vec::new();
            let mut logit_vars = Vec::new();
            for (i, head) in heads.iter().enumerate() {
                let x = feats[i].select(Axis(0), picks);
                let xv = g.constant(x.into_dyn());
                let bc = model.classifiers[i].bind(&mut g, true);
                let logits = head.forward(&mut g, &bc, xv);
                terms.push(g.cross_entropy(logits, &labels));
                logit_vars.push(logits);
                bounds.push(bc);
            }
            let total = g.sum_vars(&terms);
            losses.push(g.scalar_value(total));
            hits += fused_hits([g.value(logit_vars[0]), g.value(logit_vars[1])], &labels);
            let sweep = g.backward(total);
            for (i, bc) in bounds.iter().enumerate() {
                let gc = bc.grads(&model.classifiers[i], &sweep);
                cfg.sgd.step(&mut model.classifiers[i], &gc, &mut vel[i], lr);
            }
        }
        epochs.push(summarize(epoch, &losses));
    }
    for (i, (mean, std)) in stats.iter().enumerate() {
        let w: Array2<f64> = model.classifiers[i]
            .get("fc.w")
            .expect("classifier weight")
            .view()
            .into_dimensionality()
            .expect("rank 2")
            .to_owned();
        let scaled = &w / &std.view().insert_axis(Axis(1));
        let shift = (mean / std).dot(&w);
        let bias = model.classifiers[i].get("fc.b").expect("classifier bias") - &shift.into_dyn();
        *model.classifiers[i].get_mut("fc.w").expect("classifier weight") = scaled.into_dyn();
        *model.classifiers[i].get_mut("fc.b").expect("classifier bias") = bias;
    }
    Ok(FinetuneOutcome {
        model,
        epochs,
        train_accuracy: hits as f64 / samples.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn paper_schedules() {
        let p = Schedule::paper_pretrain();
        assert_eq!(lr_at(99, &p), 0.01);
        assert_eq!(lr_at(100, &p), 0.001);
        let f = Schedule::paper_finetune();
        assert_eq!(lr_at(24, &f), 0.05);
        assert_eq!(lr_at(25, &f), 0.005);
        assert_eq!(lr_at(35, &f), 0.0005);
        let flat = Schedule {
            lr_drop_epochs: vec![],
            ..p.clone()
        };
        assert!((0..140).all(|e| lr_at(e, &flat) == 0.01));
        assert!(Schedule { lr_drop_epochs: vec![5, 5], ..p.clone() }.validate().is_err());
        assert!(Schedule { lr_drop_epochs: vec![140], ..p }.validate().is_err());
    }

    #[test]
    fn zero_lr_leaves_params_untouched() {
        let mut p = Params::new();
        p.push("w", Tensor::from_shape_fn(IxDyn(&[3]), |i| round_f32(0.1 * i[0] as f64 + 0.3)));
        let before = p.clone();
        let mut g = p.zeros_like();
        g.values_mut()[0].fill(5.0);
        let mut v = p.zeros_like();
        Sgd::default().step(&mut p, &g, &mut v, 0.0);
        assert_eq!(p, before);
        Sgd::default().step(&mut p, &g, &mut v, 0.1);
        assert_ne!(p, before);
    }
}
