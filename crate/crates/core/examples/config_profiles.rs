//! Shows the two built-in profiles and how a config file overrides them.

use signcon::config::RunConfig;
use signcon::training::lr_at;

fn main() -> signcon::Result<()> {
    let text = "profile = paper\nloss.use_cross = false\nbank_size = 4096\n";
    let cfg = RunConfig::parse(text)?;
    println!("parsed paper overrides, hash {}", cfg.hash());
    for line in cfg.echo().lines().filter(|l| l.starts_with("loss.") || l.starts_with("bank") || l.starts_with("pretrain.")) {
        println!("  {line}");
    }
    let toy = RunConfig::toy();
    println!("toy pretrain lr by epoch:");
    for e in 0..toy.pretrain_schedule.epochs {
        print!(" {}", lr_at(e, &toy.pretrain_schedule));
    }
    println!();
    match RunConfig::parse("loss.temperature = 0.1\n") {
        Err(e) => println!("rejected: {e} (schema violation: {})", e.is_schema_violation()),
        Ok(_) => unreachable!(),
    }
    Ok(())
}
