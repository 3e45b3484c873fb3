use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use signcon::checkpoint::Checkpoint;
use signcon::config::RunConfig;
use signcon::corpus::{generate_corpus, read_corpus, split_by_signer, write_corpus, Sample};
use signcon::eval::{export_embeddings, MetricsReport};
use signcon::mpm::{preview, LatentCodec, MaskRule};
use signcon::training::{finetune, pretrain, FinetunedModel};
use signcon::Error;

#[derive(Parser)]
#[command(name = "signcon", version, about = "Cross-modal contrastive pre-training on a synthetic sign corpus")]
struct Cli {
    /// Data-preparation workers; 1 gives bitwise-reproducible runs
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic corpus into OUT/train and OUT/eval
    GenCorpus {
        /// `key = value` config file (default: toy profile)
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Contrastive pre-training; writes checkpoints and loss_log.tsv
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Training manifest (OUT/train/manifest.tsv from gen-corpus)
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a pre-training checkpoint
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train classifier heads (and encoders unless finetune.freeze_encoder)
    Finetune {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Pre-training checkpoint; random initialization when omitted
        #[arg(long)]
        pretrained: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a fine-tuned checkpoint; prints and writes metrics.txt
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Config of the run (default: config.txt beside the checkpoint, else toy)
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also export encoder embeddings to OUT/embeddings
        #[arg(long)]
        embeddings: bool,
    },
    /// Write original / motion / masked frame grids for one sample
    MpmPreview {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        sample_id: usize,
        /// Mask intensity
        #[arg(long)]
        p: f64,
        #[arg(long)]
        out: PathBuf,
        /// Codec seed (default: CCL_SEED, else 0)
        #[arg(long)]
        seed: Option<u64>,
    },
}

struct Failure {
    code: u8,
    msg: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Self {
            code: if e.is_schema_violation() { 2 } else { 1 },
            msg: e.to_string(),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let gen = matches!(cli.cmd, Cmd::GenCorpus { .. });
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            // corpus generation reports every failure as 1
            ExitCode::from(if gen { 1 } else { f.code })
        }
    }
}

fn load_config(path: Option<&Path>, threads: Option<usize>) -> Result<RunConfig, Error> {
    let mut cfg = match path {
        Some(p) => RunConfig::read(p)?,
        None => RunConfig::toy(),
    };
    cfg.apply_env()?;
    if let Some(t) = threads {
        cfg.threads = t.max(1);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_text(path: &Path, text: &str) -> Result<(), Error> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn prepare_out(out: &Path, cfg: &RunConfig) -> Result<(), Error> {
    std::fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    write_text(&out.join("config.txt"), &cfg.echo())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.cmd {
        Cmd::GenCorpus { config, out } => {
            let cfg = load_config(config.as_deref(), cli.threads)?;
            let all = generate_corpus(&cfg.corpus)?;
            let total = all.len();
            let (train, held) = split_by_signer(&cfg.corpus, all);
            prepare_out(&out, &cfg)?;
            write_corpus(&train, &out.join("train"))?;
            write_corpus(&held, &out.join("eval"))?;
            println!("wrote {total} samples ({} train, {} eval) to {}", train.len(), held.len(), out.display());
        }
        Cmd::Pretrain {
            config,
            manifest,
            out,
            resume,
        } => {
            let cfg = load_config(config.as_deref(), cli.threads)?;
            let samples = read_corpus(&manifest)?;
            let resume = resume.as_deref().map(Checkpoint::read).transpose()?;
            prepare_out(&out, &cfg)?;
            let res = pretrain(&cfg.pretrain_config(), &samples, Some(&out), resume.as_ref())?;
            match res.log.last() {
                Some(last) => println!(
                    "pretrained to step {} (epoch {}), total loss {:.4}",
                    last.step + 1,
                    last.epoch,
                    last.report.total
                ),
                None => println!("nothing to do: the schedule is already complete"),
            }
            println!("checkpoint: {}", out.join("checkpoint.ckpt").display());
        }
        Cmd::Finetune {
            config,
            pretrained,
            manifest,
            out,
        } => {
            let cfg = load_config(config.as_deref(), cli.threads)?;
            let samples = read_corpus(&manifest)?;
            let ckpt = pretrained.as_deref().map(Checkpoint::read).transpose()?;
            prepare_out(&out, &cfg)?;
            let fc = cfg.finetune_config();
            let res = finetune(&fc, ckpt.as_ref(), &samples)?;
            let nets = fc.model.build()?;
            let path = out.join("finetuned.ckpt");
            res.model.checkpoint(&nets, &fc.config_hash).write(&path)?;
            let mut log = String::from("epoch\tfirst\tlast\tmean\n");
            for e in &res.epochs {
                let _ = writeln!(log, "{}\t{:.9}\t{:.9}\t{:.9}", e.epoch, e.first, e.last, e.mean);
            }
            write_text(&out.join("finetune_log.tsv"), &log)?;
            println!("train accuracy (fused) {:.4}", res.train_accuracy);
            println!("checkpoint: {}", path.display());
        }
        Cmd::Evaluate {
            checkpoint,
            manifest,
            out,
            config,
            embeddings,
        } => {
            let beside = checkpoint.parent().map(|d| d.join("config.txt")).filter(|p| p.exists());
            let cfg = load_config(config.as_deref().or(beside.as_deref()), cli.threads)?;
            let ckpt = Checkpoint::read(&checkpoint)?;
            let samples = read_corpus(&manifest)?;
            let fc = cfg.finetune_config();
            let nets = fc.model.build()?;
            let model = FinetunedModel::from_checkpoint(&nets, &ckpt)?;
            let refs: Vec<&Sample> = samples.iter().collect();
            let [r, p] = model.logits(&nets, &refs, fc.augment.t_model, fc.threads)?;
            let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
            let report = MetricsReport::from_logits(&r, &p, &labels)?;
            prepare_out(&out, &cfg)?;
            write_text(&out.join("metrics.txt"), &report.to_text())?;
            print!("{}", report.to_text());
            if embeddings {
                let dir = out.join("embeddings");
                let encoders = [&model.encoders[0], &model.encoders[1]];
                let path = export_embeddings(&nets, encoders, &refs, fc.augment.t_model, fc.threads, &dir)?;
                println!("embeddings: {}", path.display());
            }
        }
        Cmd::MpmPreview {
            manifest,
            sample_id,
            p,
            out,
            seed,
        } => {
            let seed = match seed {
                Some(s) => s,
                None => {
                    let mut c = RunConfig::toy();
                    c.apply_env()?;
                    c.seed
                }
            };
            let samples = read_corpus(&manifest)?;
            let sample = samples.iter().find(|s| s.id == sample_id).ok_or_else(|| Failure {
                code: 1,
                msg: format!("no sample with id {sample_id} in {}", manifest.display()),
            })?;
            let codec = LatentCodec::new(sample.clip.height(), sample.clip.width(), seed);
            let paths = preview(&sample.clip, &codec, &MaskRule::absolute(p), &out, &format!("{sample_id:06}"))?;
            for path in paths {
                println!("{}", path.display());
            }
        }
    }
    Ok(())
}
