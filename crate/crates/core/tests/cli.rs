use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ndarray::{Array3, Array4};
use signcon::config::RunConfig;
use signcon::corpus::{write_corpus, PoseSequence, RgbClip, Sample};
use signcon::eval::MetricsReport;

const TINY: &str = "\
# a run small enough for a unit test
corpus.num_classes = 3
corpus.samples_per_class = 4
corpus.eval_samples_per_class = 2
corpus.t_raw = 20
bank_size = 16
augment.k = 8
augment.t_model = 4
pretrain.batch_size = 4
pretrain.max_steps = 3
finetune.epochs = 2
finetune.batch_size = 4
finetune.lr_drop_epochs = none
";

fn signcon(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_signcon"))
        .args(args)
        .env_remove("CCL_SEED")
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.clone(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

struct Run {
    _tmp: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

fn setup() -> Run {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().to_path_buf();
    let config = root.join("tiny.cfg");
    fs::write(&config, TINY).unwrap();
    Run { _tmp: tmp, root, config }
}

fn pipeline(r: &Run, tag: &str) -> PathBuf {
    let out = r.root.join(tag);
    let (data, pre, fine, ev) = (out.join("data"), out.join("pre"), out.join("fine"), out.join("eval"));
    let cfg = s(&r.config);
    ok(&signcon(&["--threads", "1", "gen-corpus", "--config", cfg, "--out", s(&data)]));
    let train = data.join("train/manifest.tsv");
    let held = data.join("eval/manifest.tsv");
    ok(&signcon(&["--threads", "1", "pretrain", "--config", cfg, "--manifest", s(&train), "--out", s(&pre)]));
    ok(&signcon(&[
        "--threads",
        "1",
        "finetune",
        "--config",
        cfg,
        "--pretrained",
        s(&pre.join("checkpoint.ckpt")),
        "--manifest",
        s(&train),
        "--out",
        s(&fine),
    ]));
    let text = ok(&signcon(&[
        "--threads",
        "1",
        "evaluate",
        "--checkpoint",
        s(&fine.join("finetuned.ckpt")),
        "--manifest",
        s(&held),
        "--out",
        s(&ev),
        "--embeddings",
    ]));
    let metrics: Vec<&str> = text.lines().filter(|l| l.contains("_top")).collect();
    assert_eq!(metrics.len(), 12, "{text}");
    out
}

#[test]
fn end_to_end_and_idempotent() {
    let r = setup();
    let out = pipeline(&r, "a");
    for d in ["data", "pre", "fine", "eval"] {
        let echo = fs::read_to_string(out.join(d).join("config.txt")).unwrap();
        let parsed = RunConfig::parse(&echo).unwrap();
        assert_eq!(parsed.corpus.num_classes, 3);
        assert_eq!(parsed.echo(), echo);
    }
    let log = fs::read_to_string(out.join("pre/loss_log.tsv")).unwrap();
    assert_eq!(log.lines().count(), 3);
    let report = MetricsReport::parse(&fs::read_to_string(out.join("eval/metrics.txt")).unwrap()).unwrap();
    assert_eq!(report.entries().len(), 12);
    assert!(out.join("eval/embeddings").is_dir());

    let before = files(&out);
    pipeline(&r, "a");
    let after = files(&out);
    assert_eq!(before.len(), after.len());
    for ((pa, a), (pb, b)) in before.iter().zip(&after) {
        assert_eq!(pa, pb);
        assert!(a == b, "{} changed on re-run", pa.display());
    }
}

#[test]
fn exit_codes() {
    let r = setup();
    let bad = r.root.join("bad.cfg");
    fs::write(&bad, "pretrain.bogus = 1\n").unwrap();
    let out = r.root.join("out");
    let data = r.root.join("data");
    ok(&signcon(&["gen-corpus", "--config", s(&r.config), "--out", s(&data)]));
    let train = data.join("train/manifest.tsv");

    let gen = signcon(&["gen-corpus", "--config", s(&bad), "--out", s(&out)]);
    assert_eq!(gen.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&gen.stderr).contains("pretrain.bogus"));

    for sub in ["pretrain", "finetune"] {
        let o = signcon(&[sub, "--config", s(&bad), "--manifest", s(&train), "--out", s(&out)]);
        assert_eq!(o.status.code(), Some(2), "{sub}");
        assert!(String::from_utf8_lossy(&o.stderr).contains("pretrain.bogus"));
    }
    fs::write(&bad, "loss.tau = warm\n").unwrap();
    let o = signcon(&["pretrain", "--config", s(&bad), "--manifest", s(&train), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));

    let missing = r.root.join("missing.tsv");
    let o = signcon(&["pretrain", "--config", s(&r.config), "--manifest", s(&missing), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&o.stderr);
    assert_eq!(stderr.trim().lines().count(), 1, "{stderr}");

    let o = signcon(&["mpm-preview", "--manifest", s(&train), "--sample-id", "999", "--p", "0.1", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));

    let o = Command::new(env!("CARGO_BIN_EXE_signcon"))
        .args(["pretrain", "--config", s(&r.config), "--manifest", s(&train), "--out", s(&out)])
        .env("CCL_SEED", "many")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn seed_comes_from_the_environment() {
    let r = setup();
    let out = r.root.join("data");
    let o = Command::new(env!("CARGO_BIN_EXE_signcon"))
        .args(["gen-corpus", "--config", s(&r.config), "--out", s(&out)])
        .env("CCL_SEED", "7")
        .output()
        .unwrap();
    ok(&o);
    let echo = fs::read_to_string(out.join("config.txt")).unwrap();
    assert!(echo.lines().any(|l| l == "seed = 7"), "{echo}");
}

#[test]
fn help_lists_every_flag() {
    let cases: [(&str, &[&str]); 5] = [
        ("gen-corpus", &["--config", "--out"]),
        ("pretrain", &["--config", "--manifest", "--out", "--resume"]),
        ("finetune", &["--config", "--pretrained", "--manifest", "--out"]),
        ("evaluate", &["--checkpoint", "--manifest", "--out", "--config", "--embeddings"]),
        ("mpm-preview", &["--manifest", "--sample-id", "--p", "--out", "--seed"]),
    ];
    for (sub, flags) in cases {
        let text = ok(&signcon(&[sub, "--help"]));
        for f in flags.iter().chain(&["--threads"]) {
            assert!(text.contains(f), "{sub} --help lacks {f}:\n{text}");
        }
    }
}

fn ppm_pixels(path: &Path) -> Vec<u8> {
    let bytes = fs::read(path).unwrap();
    assert!(bytes.starts_with(b"P6"));
    // header: magic, width, height, maxval, each followed by whitespace
    let mut fields = 0;
    let mut i = 0;
    while fields < 4 {
        while bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        while !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        fields += 1;
    }
    bytes[i + 1..].to_vec()
}

#[test]
fn mpm_preview_grids() {
    let tmp = tempfile::tempdir().unwrap();
    let (t, h, w) = (6, 16, 16);
    let moving = RgbClip::new(Array4::from_shape_fn((t, h, w, 3), |(f, y, x, _)| {
        let (cx, cy) = (3.0 + 2.0 * f as f32, 8.0);
        if (x as f32 - cx).powi(2) + (y as f32 - cy).powi(2) < 6.0 {
            0.9
        } else {
            0.1
        }
    }))
    .unwrap();
    let still = RgbClip::new(Array4::from_shape_fn((t, h, w, 3), |(_, y, x, c)| ((x + 2 * y + c) % 7) as f32 / 7.0)).unwrap();
    let pose = PoseSequence::new(Array3::from_elem((t, 25, 3), 0.5)).unwrap();
    let samples = vec![
        Sample::new(0, moving, pose.clone(), 0, 0).unwrap(),
        Sample::new(1, still, pose, 0, 0).unwrap(),
    ];
    let manifest = write_corpus(&samples, tmp.path()).unwrap();

    let p0 = tmp.path().join("p0");
    ok(&signcon(&["mpm-preview", "--manifest", s(&manifest), "--sample-id", "0", "--p", "0", "--out", s(&p0)]));
    let names: Vec<String> = fs::read_dir(&p0).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    assert_eq!(names.len(), 3, "{names:?}");
    let orig = ppm_pixels(&p0.join("000000_original.ppm"));
    assert_eq!(ppm_pixels(&p0.join("000000_masked.ppm")), orig);

    let st = tmp.path().join("still");
    ok(&signcon(&["mpm-preview", "--manifest", s(&manifest), "--sample-id", "1", "--p", "0.2", "--out", s(&st)]));
    assert_eq!(fs::read_dir(&st).unwrap().count(), 3);
    assert!(ppm_pixels(&st.join("000001_masked.ppm")).iter().all(|&v| v == 0));
    assert!(ppm_pixels(&st.join("000001_original.ppm")).iter().any(|&v| v > 0));
}
