use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = r#"{
  "image_h": 32, "image_w": 32, "embed_dim": 16, "t_max": 40,
  "seq2au": {"hidden": 16, "batch_size": 2, "steps": 6, "checkpoint_every": 3},
  "gan": {"ngf": 4, "ndf": 4, "res_blocks": 1, "perceptual_widths": [4, 8],
          "perceptual_weights": [1.0, 1.0], "batch_size": 2, "steps": 4,
          "checkpoint_every": 2, "max_frames": 6}
}"#;

const SENTENCES: &str = "the keeper saves a late penalty\nfans sing loudly\nrain stops play\n";

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_anchorpipe"));
    c.env_remove("ANCHORPIPE_SEED");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// The single machine-readable error line and its `kind`.
fn error_kind(o: &Output) -> String {
    let err = stderr(o);
    let lines: Vec<&str> = err.lines().collect();
    assert_eq!(lines.len(), 1, "one stderr line expected: {err:?}");
    let rest = lines[0].strip_prefix("error kind=").expect("error line prefix");
    assert!(rest.contains(" msg=\""), "{err}");
    rest.split(' ').next().unwrap().to_string()
}

fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("sentences.txt"), SENTENCES).unwrap();
        fs::write(dir.path().join("small.json"), SMALL).unwrap();
        Self { dir }
    }

    fn p(&self, rel: &str) -> String {
        self.dir.path().join(rel).display().to_string()
    }

    fn gen(&self, out: &str) -> Output {
        run(&["gen-data", "--sentences", &self.p("sentences.txt"), "--out", &self.p(out), "--config", &self.p("small.json")])
    }
}

#[test]
fn usage_errors_exit_1() {
    for args in [
        vec![],
        vec!["frobnicate"],
        vec!["gen-data", "--sentences", "x.txt"],
        vec!["train-seq2au", "--corpus", "c", "--out", "o", "--bogus"],
        vec!["train-gan", "--corpus", "c", "--out", "o"],
    ] {
        let o = run(&args);
        assert_eq!(o.status.code(), Some(1), "{args:?}: {}", stderr(&o));
        assert_eq!(error_kind(&o), "usage", "{args:?}");
    }
}

#[test]
fn help_exits_0() {
    let o = run(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).contains("gen-data"));
}

#[test]
fn missing_corpus_is_a_data_error() {
    let f = Fixture::new();
    let o = run(&["train-seq2au", "--corpus", &f.p("nowhere"), "--out", &f.p("o")]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert_eq!(error_kind(&o), "data");
    assert!(!f.dir.path().join("o").exists());
}

#[test]
fn bad_config_file_exits_1() {
    let f = Fixture::new();
    fs::write(f.dir.path().join("bad.json"), "{\"seq2au\": {\"hidden\": \"wide\"}}").unwrap();
    fs::write(f.dir.path().join("neg.json"), "{\"lambda_fm\": -1}").unwrap();
    for cfg in ["bad.json", "neg.json"] {
        let o = run(&["gen-data", "--sentences", &f.p("sentences.txt"), "--out", &f.p("c"), "--config", &f.p(cfg)]);
        assert_eq!(o.status.code(), Some(1), "{cfg}: {}", stderr(&o));
        assert_eq!(error_kind(&o), "config");
    }
}

#[test]
fn corrupt_checkpoint_is_a_format_error() {
    let f = Fixture::new();
    fs::write(f.dir.path().join("junk.anch"), b"ANCH\x01\x00\x00\x00\xff\xff\xff\xff").unwrap();
    let o = run(&["synth", "--text", "hello", "--seq2au", &f.p("junk.anch"), "--gan", &f.p("junk.anch"), "--out", &f.p("s")]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert_eq!(error_kind(&o), "format");
}

#[test]
fn gen_data_is_byte_identical_across_runs() {
    let f = Fixture::new();
    assert!(f.gen("a").status.success());
    assert!(f.gen("b").status.success());
    let (a, b) = (tree(&f.dir.path().join("a")), tree(&f.dir.path().join("b")));
    assert!(a.len() > 10);
    assert_eq!(a, b);

    let o = f.gen("a");
    assert_eq!(o.status.code(), Some(2), "existing output dir must be refused");
}

#[test]
fn seed_flag_and_env_agree() {
    let f = Fixture::new();
    let base = ["gen-data", "--sentences", &f.p("sentences.txt"), "--config", &f.p("small.json")];
    let flag = bin().args(base).args(["--out", &f.p("flag"), "--seed", "99"]).output().unwrap();
    let env = bin().args(base).args(["--out", &f.p("env")]).env("ANCHORPIPE_SEED", "99").output().unwrap();
    let default = bin().args(base).args(["--out", &f.p("default")]).output().unwrap();
    assert!(flag.status.success() && env.status.success() && default.status.success());
    let (a, b, c) = (tree(&f.dir.path().join("flag")), tree(&f.dir.path().join("env")), tree(&f.dir.path().join("default")));
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn eval_oracle_against_itself() {
    let f = Fixture::new();
    assert!(f.gen("c").status.success());
    let o = run(&["eval", "--corpus", &f.p("c"), "--gt-aups", "--gt-frames", "--out", &f.p("ev/report.txt")]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = fs::read_to_string(f.dir.path().join("ev/report.txt")).unwrap();
    let kv: BTreeMap<&str, &str> = report.lines().filter_map(|l| l.split_once('=')).collect();
    assert_eq!(kv["au_mse"].parse::<f64>().unwrap(), 0.0);
    assert_eq!(kv["psnr_db"], "inf");
    assert_eq!(kv["ssim"].parse::<f64>().unwrap(), 1.0);
    assert_eq!(kv["temporal_l1"].parse::<f64>().unwrap(), 0.0);
    assert_eq!(kv["samples"], "3");
    let table = fs::read_to_string(f.dir.path().join("ev/report.samples.csv")).unwrap();
    assert_eq!(table.lines().count(), 4);
    assert!(f.dir.path().join("ev/report.config.json").exists());
}

/// Trains both stages briefly, then checks `synth`'s output contract and
/// that a resumed translator run ends bitwise where the full run did.
#[test]
fn train_synth_and_resume() {
    let f = Fixture::new();
    assert!(f.gen("c").status.success());
    let cfg = f.p("small.json");

    let o = run(&["train-seq2au", "--corpus", &f.p("c"), "--out", &f.p("s2a"), "--config", &cfg]);
    assert!(o.status.success(), "{}", stderr(&o));
    for name in ["seq2au.anch", "config.json", "loss.csv", "checkpoints/step_000003.anch"] {
        assert!(f.dir.path().join("s2a").join(name).exists(), "{name}");
    }
    let o = run(&[
        "train-seq2au", "--corpus", &f.p("c"), "--out", &f.p("s2a_r"), "--config", &cfg,
        "--resume", &f.p("s2a/checkpoints/step_000003.anch"),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        fs::read(f.dir.path().join("s2a/seq2au.anch")).unwrap(),
        fs::read(f.dir.path().join("s2a_r/seq2au.anch")).unwrap()
    );

    let o = run(&["train-gan", "--corpus", &f.p("c"), "--out", &f.p("gan"), "--gt-aups", "--config", &cfg]);
    assert!(o.status.success(), "{}", stderr(&o));
    let log = fs::read_to_string(f.dir.path().join("gan/loss.csv")).unwrap();
    assert_eq!(log.lines().next(), Some("step,d_loss,g_adv,g_fm,g_perc"));
    assert_eq!(log.lines().count(), 5);

    let o = run(&[
        "synth", "--text", "fans sing loudly", "--seq2au", &f.p("s2a/seq2au.anch"), "--gan", &f.p("gan/gan.anch"),
        "--out", &f.p("syn"), "--gif",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let frames = fs::read_dir(f.dir.path().join("syn/frames")).unwrap().count();
    assert!((1..=40).contains(&frames), "{frames} frames");
    assert!(f.dir.path().join("syn/frames/00000.png").exists());
    let aups = fs::read_to_string(f.dir.path().join("syn/aups.csv")).unwrap();
    assert_eq!(aups.lines().count(), frames + 1);
    assert!(f.dir.path().join("syn/anim.gif").exists());
    assert!(f.dir.path().join("syn/config.json").exists());

    let o = run(&[
        "eval", "--corpus", &f.p("c"), "--seq2au", &f.p("s2a/seq2au.anch"), "--gan", &f.p("gan/gan.anch"),
        "--out", &f.p("ev.txt"), "--samples", "s0001",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let first = fs::read_to_string(f.dir.path().join("ev.txt")).unwrap();
    assert!(first.contains("samples=1"));
    let o = run(&[
        "eval", "--corpus", &f.p("c"), "--seq2au", &f.p("s2a/seq2au.anch"), "--gan", &f.p("gan/gan.anch"),
        "--out", &f.p("ev2.txt"), "--samples", "s0001",
    ]);
    assert!(o.status.success());
    assert_eq!(first, fs::read_to_string(f.dir.path().join("ev2.txt")).unwrap());
}
