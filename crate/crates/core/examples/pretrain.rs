//! A short pre-training run on the toy corpus; writes loss_log.tsv and a
//! checkpoint.
//!
//!     cargo run --release --example pretrain -- 100

use signcon::config::RunConfig;
use signcon::corpus::{generate_corpus, split_by_signer};
use signcon::training::pretrain;

fn main() -> signcon::Result<()> {
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(60);
    let mut cfg = RunConfig::toy();
    cfg.max_steps = Some(steps);
    let (train, _) = split_by_signer(&cfg.corpus, generate_corpus(&cfg.corpus)?);
    let dir = std::env::temp_dir().join("signcon_pretrain");
    let out = pretrain(&cfg.pretrain_config(), &train, Some(&dir), None)?;
    for l in out.log.iter().step_by((steps / 10).max(1)) {
        let r = &l.report;
        println!(
            "step {:>4} lr {:.4}  total {:.4}  single {:.4}  cross {:.4}",
            l.step, l.lr, r.total, r.l_single, r.l_cross
        );
    }
    println!("counters {:?}", out.trainer.counters);
    println!("outputs in {}", dir.display());
    Ok(())
}
