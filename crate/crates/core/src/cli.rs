//! Command-line driver. Exit codes: 0 success, 1 usage or config error,
//! 2 data, format or I/O error, 3 runtime failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::oracle::corpus::{frame_file, read_sentences, write_aups_csv, write_png};
use crate::oracle::{generate_corpus, Corpus};
use crate::train::eval::sibling;
use crate::train::gan_run::load_translator;
use crate::train::{
    evaluate, synthesize_frames, train_gan, train_seq2au, AupsSource, Checkpoint, EvalOptions,
    LoadedGan, LoadedSeq2au, CONFIG_ECHO,
};

pub const SEED_ENV: &str = "ANCHORPIPE_SEED";
const PROGRESS_EVERY: u64 = 100;
/// Frame delay of the animated GIF, in milliseconds (25 fps).
const GIF_DELAY_MS: u32 = 40;

#[derive(Debug, Parser)]
#[command(name = "anchorpipe", version, about = "Text to action units to face frames")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic corpus from a file of sentences.
    GenData(GenData),
    /// Train the text to AU+PS translator.
    TrainSeq2au(TrainSeq2au),
    /// Train the frame generator and discriminator.
    TrainGan(TrainGan),
    /// Turn text into frames.
    Synth(Synth),
    /// Score full inference against the corpus.
    Eval(Eval),
}

#[derive(Debug, Args)]
struct Common {
    /// JSON config; its values override the defaults, flags override it.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Root seed; overrides the config file and $ANCHORPIPE_SEED.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct GenData {
    #[arg(long, value_name = "FILE")]
    sentences: PathBuf,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct TrainSeq2au {
    #[arg(long, value_name = "DIR")]
    corpus: PathBuf,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long, value_name = "CKPT")]
    resume: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("source").required(true).args(["gt_aups", "seq2au"]))]
struct TrainGan {
    #[arg(long, value_name = "DIR")]
    corpus: PathBuf,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    /// Condition on the corpus AU+PS.
    #[arg(long)]
    gt_aups: bool,
    /// Condition on teacher-forced predictions of this translator.
    #[arg(long, value_name = "CKPT")]
    seq2au: Option<PathBuf>,
    #[arg(long, value_name = "CKPT")]
    resume: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct Synth {
    #[arg(long)]
    text: String,
    #[arg(long, value_name = "CKPT")]
    seq2au: PathBuf,
    #[arg(long, value_name = "CKPT")]
    gan: PathBuf,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Also write an animated GIF.
    #[arg(long)]
    gif: bool,
}

#[derive(Debug, Args)]
struct Eval {
    #[arg(long, value_name = "DIR")]
    corpus: PathBuf,
    #[arg(long, value_name = "CKPT", required_unless_present = "gt_aups")]
    seq2au: Option<PathBuf>,
    #[arg(long, value_name = "CKPT", required_unless_present = "gt_frames")]
    gan: Option<PathBuf>,
    /// Report file; the per-sample table goes next to it.
    #[arg(long, value_name = "REPORT")]
    out: PathBuf,
    /// Use the corpus AU+PS instead of the translator.
    #[arg(long)]
    gt_aups: bool,
    /// Use the corpus frames instead of the generator.
    #[arg(long)]
    gt_frames: bool,
    /// Comma-separated sample ids (all when absent).
    #[arg(long, value_delimiter = ',')]
    samples: Vec<String>,
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            report("usage", &one_line(&e.to_string()));
            return 1;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            report(e.kind(), &e.to_string());
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 1,
        Error::Format { .. } | Error::Data(_) | Error::Io { .. } | Error::Range { .. } | Error::EmptyInput(_) => 2,
        Error::Contract(_) | Error::Shape(_) | Error::Length { .. } | Error::InvalidInput(_) | Error::Eval(_) => 3,
    }
}

/// Clap's message without the usage footer, joined onto one line.
fn one_line(s: &str) -> String {
    s.lines()
        .map(str::trim)
        .take_while(|l| !l.starts_with("Usage:"))
        .filter(|l| !l.is_empty())
        .collect::<Vec<_>>()
        .join(" ")
        .trim_start_matches("error: ")
        .to_string()
}

/// `error kind=<kind> msg="<escaped>"` on one stderr line.
fn report(kind: &str, msg: &str) {
    let escaped: String = msg
        .chars()
        .flat_map(|c| match c {
            '"' => vec!['\\', '"'],
            '\\' => vec!['\\', '\\'],
            '\n' => vec!['\\', 'n'],
            '\r' => vec!['\\', 'r'],
            c => vec![c],
        })
        .collect();
    eprintln!("error kind={kind} msg=\"{escaped}\"");
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData(a) => gen_data(a),
        Command::TrainSeq2au(a) => cmd_train_seq2au(a),
        Command::TrainGan(a) => cmd_train_gan(a),
        Command::Synth(a) => synth(a),
        Command::Eval(a) => eval(a),
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Defaults, then corpus-derived image and oracle settings, then
/// `ANCHORPIPE_SEED`, then the config file, then `--seed` and `edit`.
fn resolve_config(
    common: &Common,
    corpus: Option<&Corpus>,
    edit: impl FnOnce(&mut PipelineConfig),
) -> Result<PipelineConfig> {
    let mut value = serde_json::to_value(PipelineConfig::default()).expect("config serializes");
    if let Some(c) = corpus {
        let cc = c.config();
        merge(
            &mut value,
            json!({ "image_h": cc.image_h, "image_w": cc.image_w, "oracle": cc.oracle }),
        );
    }
    if let Ok(s) = std::env::var(SEED_ENV) {
        let seed: u64 = s
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_ENV}={s:?} is not an unsigned integer")))?;
        merge(&mut value, json!({ "seed": seed }));
    }
    if let Some(path) = &common.config {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let over: Value = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if !over.is_object() {
            return Err(Error::Config(format!("{}: expected a JSON object", path.display())));
        }
        merge(&mut value, over);
    }
    let mut cfg: PipelineConfig =
        serde_json::from_value(value).map_err(|e| Error::Config(format!("config: {e}")))?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    edit(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

fn open_corpus(dir: &Path) -> Result<Corpus> {
    Corpus::open(dir).map_err(|e| match e {
        Error::Io { .. } | Error::Format { .. } => Error::Data(format!("cannot open corpus {}: {e}", dir.display())),
        other => other,
    })
}

fn gen_data(a: GenData) -> Result<()> {
    let cfg = resolve_config(&a.common, None, |_| {})?;
    let sentences = read_sentences(&a.sentences)?;
    let m = generate_corpus(&sentences, &cfg, &a.out)?;
    let frames: usize = m.samples.iter().map(|s| s.num_frames).sum();
    println!("wrote {} samples ({frames} frames) to {}", m.samples.len(), a.out.display());
    Ok(())
}

fn load_resume(path: Option<&PathBuf>) -> Result<Option<Checkpoint>> {
    path.map(|p| Checkpoint::load(p)).transpose()
}

fn cmd_train_seq2au(a: TrainSeq2au) -> Result<()> {
    let corpus = open_corpus(&a.corpus)?;
    let cfg = resolve_config(&a.common, Some(&corpus), |c| {
        if let Some(s) = a.steps {
            c.seq2au.steps = s;
        }
    })?;
    let resume = load_resume(a.resume.as_ref())?;
    let total = cfg.seq2au.steps;
    let run = train_seq2au(&corpus, &cfg, &a.out, resume.as_ref(), &mut |step, r| {
        if step % PROGRESS_EVERY == 0 || step as usize == total {
            println!("step {step}/{total} mse={:.6} stop_bce={:.6} total={:.6}", r.mse, r.stop_bce, r.total);
        }
    })?;
    println!("saved {} at step {}", a.out.join(crate::train::seq2au_run::SEQ2AU_FILE).display(), run.step);
    Ok(())
}

fn cmd_train_gan(a: TrainGan) -> Result<()> {
    let corpus = open_corpus(&a.corpus)?;
    let cfg = resolve_config(&a.common, Some(&corpus), |c| {
        if let Some(s) = a.steps {
            c.gan.steps = s;
        }
    })?;
    let resume = load_resume(a.resume.as_ref())?;
    let translator = a.seq2au.as_ref().map(|p| load_translator(p)).transpose()?;
    let source = match &translator {
        Some((model, table)) => AupsSource::Seq2au(model, table),
        None => AupsSource::GroundTruth,
    };
    let total = cfg.gan.steps;
    let run = train_gan(&corpus, &cfg, &source, &a.out, resume.as_ref(), &mut |step, r| {
        if step % PROGRESS_EVERY == 0 || step as usize == total {
            let e = r.entries();
            println!(
                "step {step}/{total} {}={:.6} {}={:.6} {}={:.6} {}={:.6}",
                e[0].0, e[0].1, e[1].0, e[1].1, e[2].0, e[2].1, e[3].0, e[3].1
            );
        }
    })?;
    println!("saved {} at step {}", a.out.join(crate::train::gan_run::GAN_FILE).display(), run.step);
    Ok(())
}

fn synth(a: Synth) -> Result<()> {
    let s2a = LoadedSeq2au::load(&a.seq2au)?;
    let gan = LoadedGan::load(&a.gan)?;
    let aups = s2a.infer(&a.text)?;
    let frames = synthesize_frames(&gan, &aups)?;
    let frames_dir = a.out.join("frames");
    fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
    let echo = json!({
        "command": "synth",
        "text": a.text,
        "seq2au": a.seq2au,
        "gan": a.gan,
        "gif": a.gif,
        "seq2au_config": s2a.config,
        "gan_config": gan.config,
    });
    let echo_path = a.out.join(CONFIG_ECHO);
    fs::write(&echo_path, serde_json::to_string_pretty(&echo).expect("echo serializes") + "\n")
        .map_err(|e| Error::io(&echo_path, e))?;
    for (t, f) in frames.iter().enumerate() {
        write_png(&frames_dir.join(frame_file(t)), f)?;
    }
    write_aups_csv(&a.out.join("aups.csv"), &aups)?;
    if a.gif {
        write_gif(&a.out.join("anim.gif"), &frames)?;
    }
    println!("wrote {} frames to {}", frames.len(), a.out.display());
    Ok(())
}

pub fn write_gif(path: &Path, frames: &[crate::domain::FrameImage]) -> Result<()> {
    use image::codecs::gif::{GifEncoder, Repeat};
    use image::{Delay, Frame, RgbaImage};
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = GifEncoder::new(file);
    let gif_err = |e: image::ImageError| Error::format(path.display(), 0, e.to_string());
    enc.set_repeat(Repeat::Infinite).map_err(gif_err)?;
    for f in frames {
        let rgba: Vec<u8> = f.to_rgb8().chunks(3).flat_map(|p| [p[0], p[1], p[2], 255]).collect();
        let img = RgbaImage::from_raw(f.width() as u32, f.height() as u32, rgba)
            .ok_or_else(|| Error::Shape("frame buffer size".into()))?;
        enc.encode_frame(Frame::from_parts(img, 0, 0, Delay::from_numer_denom_ms(GIF_DELAY_MS, 1)))
            .map_err(gif_err)?;
    }
    Ok(())
}

fn eval(a: Eval) -> Result<()> {
    let corpus = open_corpus(&a.corpus)?;
    let s2a = match (&a.seq2au, a.gt_aups) {
        (Some(p), false) => Some(LoadedSeq2au::load(p)?),
        _ => None,
    };
    let gan = match (&a.gan, a.gt_frames) {
        (Some(p), false) => Some(LoadedGan::load(p)?),
        _ => None,
    };
    let opts = EvalOptions {
        gt_aups: a.gt_aups,
        gt_frames: a.gt_frames,
        samples: a.samples.clone(),
    };
    let report = evaluate(&corpus, s2a.as_ref(), gan.as_ref(), &opts)?;
    let table = report.write(&a.out)?;
    let echo = json!({
        "command": "eval",
        "corpus": a.corpus,
        "seq2au": a.seq2au,
        "gan": a.gan,
        "gt_aups": a.gt_aups,
        "gt_frames": a.gt_frames,
        "samples": a.samples,
        "seq2au_config": s2a.as_ref().map(|s| &s.config),
        "gan_config": gan.as_ref().map(|g| &g.config),
    });
    let echo_path = sibling(&a.out, "config.json");
    fs::write(&echo_path, serde_json::to_string_pretty(&echo).expect("echo serializes") + "\n")
        .map_err(|e| Error::io(&echo_path, e))?;
    print!("{}", report.to_text());
    println!("per-sample table: {}", table.display());
    Ok(())
}
