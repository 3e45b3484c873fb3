//! Evaluates every term of the pre-training objective on one batch, before
//! and after the mined positives switch on.

use signcon::augment::make_views;
use signcon::config::RunConfig;
use signcon::contrastive::{pretrain_losses, BatchViews, BranchState, Modality};
use signcon::corpus::generate_corpus;
use signcon::rng::stream;

fn main() -> signcon::Result<()> {
    let cfg = RunConfig::toy();
    let pc = cfg.pretrain_config();
    let mut spec = cfg.corpus.clone();
    spec.samples_per_class = 2;
    spec.eval_samples_per_class = 0;
    let samples = generate_corpus(&spec)?;
    let nets = pc.model.build()?;
    let b = 8;
    let views: Vec<_> = samples
        .iter()
        .take(b)
        .enumerate()
        .map(|(i, s)| make_views(s, &pc.augment, &mut stream(0, &[i as u64]), None))
        .collect::<signcon::Result<_>>()?;
    let batch = BatchViews::from_views(&views);
    let [rgb, pose] = Modality::BOTH.map(|m| {
        BranchState::init(&nets, m, pc.bank_size, &mut stream(0, &[1, m as u64]), &mut stream(0, &[2, m as u64]))
    });
    let (rgb, pose) = (rgb?, pose?);
    let warm = pc.loss.warmup_steps(pc.bank_size, b);
    for step in [0, warm] {
        let r = pretrain_losses(&nets, &batch, &rgb, &pose, &pc.loss, step, false)?.report;
        println!("step {step:>3}: {r:#?}");
    }
    Ok(())
}
