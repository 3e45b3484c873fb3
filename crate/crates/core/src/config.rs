//! Flat `key = value` run configuration with two built-in profiles.
//!
//! A config file may start from either profile (`profile = toy` or
//! `profile = paper`, default toy) and override any documented key. Unknown
//! keys and unparsable values are schema violations. `#` starts a comment.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::augment::{AugmentConfig, MpmViews};
use crate::contrastive::LossConfig;
use crate::corpus::CorpusSpec;
use crate::error::{Error, Result};
use crate::training::{FinetuneConfig, ModelConfig, PretrainConfig, Schedule, Sgd};

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "CCL_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    Toy,
    Paper,
}

impl Profile {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "toy" => Some(Self::Toy),
            "paper" => Some(Self::Paper),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Toy => "toy",
            Self::Paper => "paper",
        }
    }
}

/// Everything a run needs. Model, seed and thread settings are shared by
/// both phases; use [`RunConfig::pretrain_config`] and
/// [`RunConfig::finetune_config`] to get the per-phase views.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub profile: Profile,
    pub corpus: CorpusSpec,
    pub model: ModelConfig,
    pub augment: AugmentConfig,
    pub loss: LossConfig,
    pub bank_size: usize,
    pub pretrain_schedule: Schedule,
    pub pretrain_sgd: Sgd,
    pub max_steps: Option<usize>,
    pub save_every: Option<usize>,
    pub finetune_schedule: Schedule,
    pub finetune_sgd: Sgd,
    pub freeze_encoder: bool,
    pub seed: u64,
    pub threads: usize,
}

impl RunConfig {
    /// Desk-scale defaults: a few minutes of CPU per pretraining run.
    pub fn toy() -> Self {
        let mut augment = AugmentConfig::default();
        augment.crop_lower = 0.5;
        augment.rgb.flip_prob = 0.0;
        augment.pose.flip_prob = 0.0;
        augment.mpm_rule.p = 0.1;
        let clipped = Sgd {
            clip_norm: Some(1.0),
            ..Sgd::default()
        };
        Self {
            profile: Profile::Toy,
            corpus: CorpusSpec::default(),
            model: ModelConfig::default(),
            augment,
            loss: LossConfig {
                gamma: 0.99,
                ..LossConfig::default()
            },
            bank_size: 256,
            pretrain_schedule: Schedule {
                epochs: 8,
                base_lr: 0.05,
                batch_size: 16,
                lr_drop_epochs: vec![6],
                lr_drop_factor: 0.1,
            },
            pretrain_sgd: clipped.clone(),
            max_steps: None,
            save_every: None,
            finetune_schedule: Schedule {
                epochs: 8,
                base_lr: 0.05,
                batch_size: 32,
                lr_drop_epochs: vec![5, 7],
                lr_drop_factor: 0.1,
            },
            finetune_sgd: clipped,
            freeze_encoder: false,
            seed: 0,
            threads: 1,
        }
    }

    /// Published optimisation settings. Sizes the source leaves open keep
    /// their toy values; the corpus is still the synthetic one.
    pub fn paper() -> Self {
        let mut model = ModelConfig::default();
        model.pose.group_dim = 512;
        model.pose.manual_dim = 512;
        model.pose.non_manual_dim = 512;
        model.pose.transformer_blocks = 3;
        model.pose.heads = 8;
        let mut augment = AugmentConfig::default();
        augment.k = 64;
        augment.t_model = 32;
        Self {
            profile: Profile::Paper,
            corpus: CorpusSpec::default(),
            model,
            augment,
            loss: LossConfig::default(),
            bank_size: 8192,
            pretrain_schedule: Schedule::paper_pretrain(),
            pretrain_sgd: Sgd::default(),
            max_steps: None,
            save_every: None,
            finetune_schedule: Schedule::paper_finetune(),
            finetune_sgd: Sgd::default(),
            freeze_encoder: false,
            seed: 0,
            threads: 1,
        }
    }

    pub fn for_profile(p: Profile) -> Self {
        match p {
            Profile::Toy => Self::toy(),
            Profile::Paper => Self::paper(),
        }
    }

    /// Parses config text. The `profile` key (if present) picks the base;
    /// every other line overrides one key. Repeated keys are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::BadConfigValue {
                key: format!("line {}", n + 1),
                msg: format!("expected `key = value`, got `{line}`"),
            })?;
            let (k, v) = (k.trim(), v.trim());
            if lines.iter().any(|(seen, _)| *seen == k) {
                return Err(Error::BadConfigValue {
                    key: k.to_string(),
                    msg: "key given more than once".into(),
                });
            }
            lines.push((k, v));
        }
        let profile = match lines.iter().find(|(k, _)| *k == "profile") {
            Some((_, v)) => Profile::parse(v).ok_or_else(|| Error::BadConfigValue {
                key: "profile".into(),
                msg: format!("expected `toy` or `paper`, got `{v}`"),
            })?,
            None => Profile::Toy,
        };
        let mut cfg = Self::for_profile(profile);
        for (k, v) in lines.into_iter().filter(|(k, _)| *k != "profile") {
            set_key(&mut cfg, k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies the seed override from the environment, if set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v.trim().parse().map_err(|_| Error::BadConfigValue {
                key: SEED_ENV.into(),
                msg: format!("expected an unsigned integer, got `{v}`"),
            })?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.pretrain_config().validate()?;
        self.finetune_config().validate()?;
        self.model.build().map(|_| ())
    }

    /// Fully resolved `key = value` listing, one key per line, in the
    /// documented order.
    pub fn echo(&self) -> String {
        let mut s = format!("profile = {}\n", self.profile.as_str());
        for (key, _) in KEYS {
            let _ = writeln!(s, "{key} = {}", get_key(self, key));
        }
        s
    }

    /// Short digest of the resolved config; recorded in checkpoints.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.echo().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            model: self.model_for_corpus(),
            schedule: self.pretrain_schedule.clone(),
            sgd: self.pretrain_sgd.clone(),
            loss: self.loss.clone(),
            augment: self.augment.clone(),
            bank_size: self.bank_size,
            seed: self.seed,
            max_steps: self.max_steps,
            threads: self.threads,
            save_every: self.save_every,
            config_hash: self.hash(),
        }
    }

    /// Fine-tuning never applies motion-preserving masking.
    pub fn finetune_config(&self) -> FinetuneConfig {
        FinetuneConfig {
            model: self.model_for_corpus(),
            schedule: self.finetune_schedule.clone(),
            sgd: self.finetune_sgd.clone(),
            augment: AugmentConfig {
                mpm_alpha: 0.0,
                ..self.augment.clone()
            },
            freeze_encoder: self.freeze_encoder,
            num_classes: self.corpus.num_classes,
            seed: self.seed,
            threads: self.threads,
            config_hash: self.hash(),
        }
    }

    fn model_for_corpus(&self) -> ModelConfig {
        let mut m = self.model.clone();
        m.pose.num_joints = self.corpus.joints;
        m
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::toy()
    }
}

/// Conversion between config text and typed values.
trait Value: Sized {
    fn parse_value(s: &str) -> std::result::Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! plain_value {
    ($($t:ty),*) => {$(
        impl Value for $t {
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                s.parse().map_err(|_| format!("cannot parse `{s}` as {}", stringify!($t)))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

plain_value!(usize, u64, f64, bool);

impl<T: Value> Value for Option<T> {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        if s == "none" {
            Ok(None)
        } else {
            T::parse_value(s).map(Some)
        }
    }
    fn render(&self) -> String {
        match self {
            Some(v) => v.render(),
            None => "none".into(),
        }
    }
}

impl Value for (f64, f64) {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        let (a, b) = s.split_once(',').ok_or_else(|| format!("expected `lo, hi`, got `{s}`"))?;
        Ok((f64::parse_value(a.trim())?, f64::parse_value(b.trim())?))
    }
    fn render(&self) -> String {
        format!("{}, {}", self.0, self.1)
    }
}

impl Value for Vec<usize> {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        if s.is_empty() || s == "none" {
            return Ok(Vec::new());
        }
        s.split(',').map(|p| usize::parse_value(p.trim())).collect()
    }
    fn render(&self) -> String {
        if self.is_empty() {
            return "none".into();
        }
        self.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(", ")
    }
}

impl Value for MpmViews {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        MpmViews::parse(s).ok_or_else(|| format!("expected both, query, key or none, got `{s}`"))
    }
    fn render(&self) -> String {
        self.as_str().into()
    }
}

macro_rules! keys {
    ($($key:literal => $($field:ident).+ , $doc:literal;)*) => {
        /// Every accepted key with a one-line description.
        pub const KEYS: &[(&str, &str)] = &[$(($key, $doc)),*];

        fn set_key(c: &mut RunConfig, key: &str, v: &str) -> Result<()> {
            match key {
                $($key => {
                    c.$($field).+ = Value::parse_value(v).map_err(|msg| Error::BadConfigValue {
                        key: key.to_string(),
                        msg,
                    })?;
                })*
                _ => return Err(Error::UnknownKey(key.to_string())),
            }
            Ok(())
        }

        fn get_key(c: &RunConfig, key: &str) -> String {
            match key {
                $($key => c.$($field).+.render(),)*
                _ => unreachable!("listed key"),
            }
        }
    };
}

keys! {
    "seed" => seed, "run seed; the CCL_SEED environment variable overrides it";
    "threads" => threads, "data-preparation workers; 1 is bitwise reproducible";

    "corpus.num_classes" => corpus.num_classes, "number of sign classes";
    "corpus.samples_per_class" => corpus.samples_per_class, "training samples per class";
    "corpus.eval_samples_per_class" => corpus.eval_samples_per_class, "held-out samples per class";
    "corpus.t_raw" => corpus.t_raw, "frames per raw clip";
    "corpus.height" => corpus.height, "frame height in pixels";
    "corpus.width" => corpus.width, "frame width in pixels";
    "corpus.num_signers" => corpus.num_signers, "number of synthetic signers";
    "corpus.eval_signers" => corpus.eval_signers, "signers reserved for the held-out split";
    "corpus.jitter_fraction" => corpus.jitter_fraction, "fraction of joints with degraded confidence";
    "corpus.seed" => corpus.seed, "corpus generator seed";

    "model.rgb.stem_patch" => model.rgb.stem_patch, "rgb stem patch side";
    "model.rgb.stem_channels" => model.rgb.stem_channels, "rgb stem channels";
    "model.rgb.stage_channels" => model.rgb.stage_channels, "rgb residual stage widths";
    "model.rgb.out_dim" => model.rgb.out_dim, "rgb feature width";
    "model.pose.group_blocks" => model.pose.group_blocks, "graph blocks per body-part group";
    "model.pose.group_dim" => model.pose.group_dim, "per-group feature width";
    "model.pose.manual_dim" => model.pose.manual_dim, "hands + body stream width";
    "model.pose.non_manual_dim" => model.pose.non_manual_dim, "face + mouth stream width";
    "model.pose.transformer_blocks" => model.pose.transformer_blocks, "transformer blocks per stream";
    "model.pose.heads" => model.pose.heads, "attention heads";
    "model.proj_hidden" => model.proj_hidden, "projection head hidden width";
    "model.proj_dim" => model.proj_dim, "embedding width";

    "augment.crop_lower" => augment.crop_lower, "temporal crop lower fraction";
    "augment.k" => augment.k, "frames sampled from the temporal crop";
    "augment.t_model" => augment.t_model, "frames fed to the encoders";
    "augment.rgb.crop_scale" => augment.rgb.crop_scale, "spatial crop area range";
    "augment.rgb.flip_prob" => augment.rgb.flip_prob, "rgb horizontal flip probability";
    "augment.rgb.jitter_strength" => augment.rgb.jitter_strength, "brightness/contrast jitter";
    "augment.pose.rotation_range_deg" => augment.pose.rotation_range_deg, "pose rotation range in degrees";
    "augment.pose.scale_range" => augment.pose.scale_range, "pose scale range";
    "augment.pose.joint_mask_prob" => augment.pose.joint_mask_prob, "per-joint masking probability";
    "augment.pose.flip_prob" => augment.pose.flip_prob, "pose horizontal flip probability";
    "augment.mpm_alpha" => augment.mpm_alpha, "probability of motion-preserving masking";
    "augment.mpm_p" => augment.mpm_rule.p, "mask intensity";
    "augment.mpm_invert" => augment.mpm_rule.invert_indicator, "keep low-variation channels instead";
    "augment.mpm_quantile" => augment.mpm_rule.p_is_quantile, "read mpm_p as a quantile";
    "augment.mpm_views" => augment.mpm_views, "views eligible for masking: both, query, key, none";

    "loss.tau" => loss.tau, "InfoNCE temperature";
    "loss.tau_spm" => loss.tau_spm, "pseudo-label loss temperature";
    "loss.k" => loss.k, "pseudo-positives per modality";
    "loss.gamma" => loss.gamma, "key encoder momentum";
    "loss.spm_warmup_steps" => loss.spm_warmup_steps, "steps before pseudo-labels switch on (none = N/B)";
    "loss.use_spm" => loss.use_spm, "enable the pseudo-label term";
    "loss.use_cross" => loss.use_cross, "enable the cross-modal terms";
    "bank_size" => bank_size, "memory bank rows per bank";

    "pretrain.epochs" => pretrain_schedule.epochs, "pretraining epochs";
    "pretrain.base_lr" => pretrain_schedule.base_lr, "pretraining learning rate";
    "pretrain.batch_size" => pretrain_schedule.batch_size, "pretraining batch size";
    "pretrain.lr_drop_epochs" => pretrain_schedule.lr_drop_epochs, "epochs where the rate drops";
    "pretrain.lr_drop_factor" => pretrain_schedule.lr_drop_factor, "rate multiplier per drop";
    "pretrain.momentum" => pretrain_sgd.momentum, "SGD momentum";
    "pretrain.weight_decay" => pretrain_sgd.weight_decay, "SGD weight decay";
    "pretrain.clip_norm" => pretrain_sgd.clip_norm, "gradient norm cap per parameter group (none = off)";
    "pretrain.max_steps" => max_steps, "stop after this many steps (none = full schedule)";
    "pretrain.save_every" => save_every, "extra checkpoint every this many epochs (none = end only)";

    "finetune.epochs" => finetune_schedule.epochs, "fine-tuning epochs";
    "finetune.base_lr" => finetune_schedule.base_lr, "fine-tuning learning rate";
    "finetune.batch_size" => finetune_schedule.batch_size, "fine-tuning batch size";
    "finetune.lr_drop_epochs" => finetune_schedule.lr_drop_epochs, "epochs where the rate drops";
    "finetune.lr_drop_factor" => finetune_schedule.lr_drop_factor, "rate multiplier per drop";
    "finetune.momentum" => finetune_sgd.momentum, "SGD momentum";
    "finetune.weight_decay" => finetune_sgd.weight_decay, "SGD weight decay";
    "finetune.clip_norm" => finetune_sgd.clip_norm, "gradient norm cap per parameter group (none = off)";
    "finetune.freeze_encoder" => freeze_encoder, "train only the classifier heads (linear probe)";
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_round_trips() {
        for p in [Profile::Toy, Profile::Paper] {
            let c = RunConfig::for_profile(p);
            let back = RunConfig::parse(&c.echo()).unwrap();
            assert_eq!(back, c);
            assert_eq!(back.hash(), c.hash());
        }
    }

    #[test]
    fn overrides_and_rejections() {
        let c = RunConfig::parse("# comment\nloss.k = 5\npretrain.lr_drop_epochs = 3, 6\npretrain.clip_norm = none\n").unwrap();
        assert_eq!(c.loss.k, 5);
        assert_eq!(c.pretrain_schedule.lr_drop_epochs, vec![3, 6]);
        assert_eq!(c.pretrain_sgd.clip_norm, None);
        assert!(matches!(RunConfig::parse("loss.kk = 5"), Err(Error::UnknownKey(k)) if k == "loss.kk"));
        assert!(matches!(RunConfig::parse("loss.k = five"), Err(Error::BadConfigValue { .. })));
        assert!(matches!(RunConfig::parse("loss.k = 5\nloss.k = 6"), Err(Error::BadConfigValue { .. })));
        assert!(matches!(RunConfig::parse("profile = huge"), Err(Error::BadConfigValue { .. })));
        assert!(RunConfig::parse("bank_size = 250").is_err());
    }

    #[test]
    fn paper_profile_values() {
        let c = RunConfig::parse("profile = paper").unwrap();
        assert_eq!(c.pretrain_schedule, Schedule::paper_pretrain());
        assert_eq!(c.finetune_schedule, Schedule::paper_finetune());
        assert_eq!((c.loss.tau, c.loss.tau_spm, c.loss.k), (0.07, 0.02, 10));
        assert_eq!((c.augment.crop_lower, c.augment.k), (0.1, 64));
    }
}
