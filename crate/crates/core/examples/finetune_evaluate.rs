//! Fine-tunes encoders and classifiers jointly from scratch, then reports
//! all twelve metrics on the held-out signers.

use signcon::config::RunConfig;
use signcon::corpus::{generate_corpus, split_by_signer, Sample};
use signcon::eval::MetricsReport;
use signcon::training::finetune;

fn main() -> signcon::Result<()> {
    let cfg = RunConfig::toy();
    let (train, test) = split_by_signer(&cfg.corpus, generate_corpus(&cfg.corpus)?);
    let fc = cfg.finetune_config();
    let out = finetune(&fc, None, &train)?;
    for e in &out.epochs {
        println!("epoch {:>2}: loss first {:.4} last {:.4} mean {:.4}", e.epoch, e.first, e.last, e.mean);
    }
    let nets = fc.model.build()?;
    let refs: Vec<&Sample> = test.iter().collect();
    let [r, p] = out.model.logits(&nets, &refs, fc.augment.t_model, fc.threads)?;
    let labels: Vec<usize> = test.iter().map(|s| s.label).collect();
    print!("{}", MetricsReport::from_logits(&r, &p, &labels)?.to_text());
    Ok(())
}
