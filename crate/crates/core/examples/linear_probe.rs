//! Pre-trains, then fits linear classifiers on frozen features and compares
//! held-out accuracy against randomly initialized encoders.
//!
//! Optional argument: `no-cross`, `no-spm` or `no-mpm` to ablate one part.

use signcon::config::RunConfig;
use signcon::corpus::{generate_corpus, split_by_signer, Sample};
use signcon::eval::MetricsReport;
use signcon::training::{finetune, pretrain};

fn probe(cfg: &RunConfig, ckpt: Option<&signcon::checkpoint::Checkpoint>, train: &[Sample], test: &[Sample]) -> signcon::Result<MetricsReport> {
    let mut fc = cfg.finetune_config();
    fc.freeze_encoder = true;
    fc.schedule.epochs = 30;
    fc.schedule.lr_drop_epochs = vec![20, 25];
    let model = finetune(&fc, ckpt, train)?.model;
    let nets = fc.model.build()?;
    let refs: Vec<&Sample> = test.iter().collect();
    let [r, p] = model.logits(&nets, &refs, fc.augment.t_model, fc.threads)?;
    let labels: Vec<usize> = test.iter().map(|s| s.label).collect();
    MetricsReport::from_logits(&r, &p, &labels)
}

fn main() -> signcon::Result<()> {
    let mut cfg = RunConfig::toy();
    match std::env::args().nth(1).as_deref() {
        Some("no-cross") => cfg.loss.use_cross = false,
        Some("no-spm") => cfg.loss.use_spm = false,
        Some("no-mpm") => cfg.augment.mpm_alpha = 0.0,
        _ => {}
    }
    let (train, test) = split_by_signer(&cfg.corpus, generate_corpus(&cfg.corpus)?);
    let ckpt = pretrain(&cfg.pretrain_config(), &train, None, None)?.checkpoint;
    for (name, c) in [("pretrained", Some(&ckpt)), ("random", None)] {
        let m = probe(&cfg, c, &train, &test)?;
        let get = |k: &str| m.get(k).unwrap_or(f64::NAN);
        println!(
            "{name:>10}: fused top-1 {:.3}  rgb {:.3}  pose {:.3}",
            get("fused_instance_top1"),
            get("rgb_instance_top1"),
            get("pose_instance_top1")
        );
    }
    Ok(())
}
