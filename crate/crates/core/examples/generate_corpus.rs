//! Renders the toy corpus, splits it by signer and writes both halves.
//!
//!     cargo run --release --example generate_corpus -- /tmp/toy

use std::path::PathBuf;

use signcon::corpus::{generate_corpus, split_by_signer, write_corpus, CorpusSpec};

fn main() -> signcon::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("signcon_toy"));
    let spec = CorpusSpec::default();
    let all = generate_corpus(&spec)?;
    let (train, held) = split_by_signer(&spec, all);
    println!(
        "{} classes, {} train samples from signers {:?}, {} held-out from {:?}",
        spec.num_classes,
        train.len(),
        spec.train_signers(),
        held.len(),
        spec.held_out_signers()
    );
    let s = &train[0];
    println!(
        "sample 0: label {} signer {}, clip {:?}, pose {:?}",
        s.label,
        s.signer,
        s.clip.frames().shape(),
        s.pose.joints().shape()
    );
    let a = write_corpus(&train, &out.join("train"))?;
    let b = write_corpus(&held, &out.join("eval"))?;
    println!("wrote {} and {}", a.display(), b.display());
    Ok(())
}
