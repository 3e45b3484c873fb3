//! Stops pre-training half way, reloads the checkpoint from disk and checks
//! the continuation matches an uninterrupted run.

use signcon::checkpoint::Checkpoint;
use signcon::config::RunConfig;
use signcon::corpus::{generate_corpus, split_by_signer};
use signcon::training::pretrain;

fn main() -> signcon::Result<()> {
    let mut cfg = RunConfig::toy();
    cfg.max_steps = Some(10);
    let (train, _) = split_by_signer(&cfg.corpus, generate_corpus(&cfg.corpus)?);
    let full = pretrain(&cfg.pretrain_config(), &train, None, None)?;

    let dir = std::env::temp_dir().join("signcon_resume");
    let mut half = cfg.pretrain_config();
    half.max_steps = Some(5);
    pretrain(&half, &train, Some(&dir), None)?;
    let ckpt = Checkpoint::read(&dir.join("checkpoint.ckpt"))?;
    let rest = pretrain(&cfg.pretrain_config(), &train, Some(&dir), Some(&ckpt))?;

    for (a, b) in full.log[5..].iter().zip(&rest.log) {
        println!("step {}: uninterrupted {:.9} resumed {:.9}", a.step, a.report.total, b.report.total);
    }
    println!("identical checkpoints: {}", full.checkpoint.to_bytes() == rest.checkpoint.to_bytes());
    Ok(())
}
