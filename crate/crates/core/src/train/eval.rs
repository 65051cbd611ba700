use std::fs;
use std::path::{Path, PathBuf};

use super::checkpoint::Checkpoint;
use super::gan_run::GanRun;
use super::metrics::{fmt_metric, psnr, ssim, temporal_l1};
use super::seq2au_run::{embedding_table, Seq2AuRun};
use crate::cond::{CondConfig, StackBuilder};
use crate::config::PipelineConfig;
use crate::domain::{AupsVector, FrameImage};
use crate::error::{Error, Result};
use crate::gan::Generator;
use crate::oracle::Corpus;
use crate::seq2au::Seq2AuParams;
use crate::text::{embed_text, EmbeddingTable};

/// Translator ready for inference.
#[derive(Debug, Clone)]
pub struct LoadedSeq2au {
    pub model: Seq2AuParams<f32>,
    pub table: EmbeddingTable,
    pub config: PipelineConfig,
}

impl LoadedSeq2au {
    pub fn from_run(run: &Seq2AuRun) -> Result<Self> {
        Ok(Self {
            model: run.trainer.model.clone(),
            table: embedding_table(&run.config)?,
            config: run.config.clone(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let run = Seq2AuRun::from_checkpoint(&Checkpoint::load(path)?, &path.display().to_string())?;
        Self::from_run(&run)
    }

    /// Free-running AU+PS trajectory for `text`.
    pub fn infer(&self, text: &str) -> Result<Vec<AupsVector>> {
        self.model.infer(&embed_text(text, &self.table)?, self.config.t_max)
    }
}

/// Generator plus the conditioning it was trained with.
#[derive(Debug, Clone)]
pub struct LoadedGan {
    pub gen: Generator<f32>,
    pub builder: StackBuilder,
    pub config: PipelineConfig,
}

impl LoadedGan {
    pub fn from_run(run: &GanRun) -> Self {
        Self {
            gen: run.trainer.models.gen.clone(),
            builder: StackBuilder::new(CondConfig::from_pipeline(&run.config), &run.avg_flm),
            config: run.config.clone(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let run = GanRun::from_checkpoint(&Checkpoint::load(path)?, &path.display().to_string())?;
        Ok(Self::from_run(&run))
    }
}

/// Frames for `aups`, each conditioned on the previously generated frames.
pub fn synthesize_frames(gan: &LoadedGan, aups: &[AupsVector]) -> Result<Vec<FrameImage>> {
    let mut frames: Vec<FrameImage> = Vec::with_capacity(aups.len());
    for t in 0..aups.len() {
        let stack = gan.builder.assemble_at(aups, &frames, t)?;
        frames.push(gan.gen.generate(&stack)?);
    }
    Ok(frames)
}

/// Frames for `aups`, each conditioned on the ground-truth prior frames.
pub fn teacher_forced_frames(gan: &LoadedGan, aups: &[AupsVector], truth: &[FrameImage]) -> Result<Vec<FrameImage>> {
    if truth.len() < aups.len() {
        return Err(Error::Shape(format!("{} frames for {} vectors", truth.len(), aups.len())));
    }
    (0..aups.len())
        .map(|t| gan.gen.generate(&gan.builder.assemble_at(aups, truth, t)?))
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalOptions {
    /// Use oracle AU+PS instead of the translator's output.
    pub gt_aups: bool,
    /// Use oracle frames instead of synthesized ones.
    pub gt_frames: bool,
    /// Restrict to these sample ids (all when empty).
    pub samples: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleMetrics {
    pub id: String,
    pub predicted_frames: usize,
    pub truth_frames: usize,
    pub au_mse: f64,
    pub psnr_db: f64,
    pub ssim: f64,
    pub temporal_l1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    /// Mean over aligned frames, normalized units.
    pub au_mse: f64,
    /// Mean per-frame PSNR over aligned frames; `+∞` when all are identical.
    pub psnr_db: f64,
    pub ssim: f64,
    pub temporal_l1: f64,
    pub frames: usize,
    pub per_sample: Vec<SampleMetrics>,
}

impl MetricsReport {
    /// Flat `key=value` lines.
    pub fn to_text(&self) -> String {
        format!(
            "au_mse={}\npsnr_db={}\nssim={}\ntemporal_l1={}\nsamples={}\nframes={}\n",
            fmt_metric(self.au_mse),
            fmt_metric(self.psnr_db),
            fmt_metric(self.ssim),
            fmt_metric(self.temporal_l1),
            self.per_sample.len(),
            self.frames
        )
    }

    pub fn per_sample_csv(&self) -> String {
        let mut s = String::from("id,predicted_frames,truth_frames,au_mse,psnr_db,ssim,temporal_l1\n");
        for m in &self.per_sample {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                m.id,
                m.predicted_frames,
                m.truth_frames,
                fmt_metric(m.au_mse),
                fmt_metric(m.psnr_db),
                fmt_metric(m.ssim),
                fmt_metric(m.temporal_l1)
            ));
        }
        s
    }

    /// Writes the report to `path` and the per-sample table next to it as
    /// `<stem>.samples.csv`. Returns the table's path.
    pub fn write(&self, path: &Path) -> Result<PathBuf> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))?;
        let table = sibling(path, "samples.csv");
        fs::write(&table, self.per_sample_csv()).map_err(|e| Error::io(&table, e))?;
        Ok(table)
    }
}

/// `dir/<stem>.<suffix>` next to `path`.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Full inference per sample (text → AU+PS → autoregressive frames) scored
/// against the oracle. Oracle frames are read only for scoring.
pub fn evaluate(
    corpus: &Corpus,
    seq2au: Option<&LoadedSeq2au>,
    gan: Option<&LoadedGan>,
    opts: &EvalOptions,
) -> Result<MetricsReport> {
    if !opts.gt_aups && seq2au.is_none() {
        return Err(Error::Config("a translator checkpoint is required unless oracle AU+PS are used".into()));
    }
    if !opts.gt_frames {
        let g = gan.ok_or_else(|| Error::Config("a generator checkpoint is required unless oracle frames are used".into()))?;
        let c = corpus.config();
        if (g.config.image_h, g.config.image_w) != (c.image_h, c.image_w) {
            return Err(Error::Config(format!(
                "generator makes {}x{} frames, corpus holds {}x{}",
                g.config.image_h, g.config.image_w, c.image_h, c.image_w
            )));
        }
    }
    let ids: Vec<String> = if opts.samples.is_empty() {
        corpus.samples().iter().map(|s| s.id.clone()).collect()
    } else {
        opts.samples.clone()
    };
    let (mut au_all, mut psnr_all, mut ssim_all) = (Vec::new(), Vec::new(), Vec::new());
    let (mut tl1_sum, mut tl1_weight) = (0.0, 0usize);
    let mut per_sample = Vec::with_capacity(ids.len());
    for id in &ids {
        let text = &corpus.sample(id)?.text;
        let truth_aups = corpus.load_aups(id)?;
        let aups = match seq2au {
            Some(s) if !opts.gt_aups => s.infer(text)?,
            _ => truth_aups.clone(),
        };
        if aups.is_empty() {
            return Err(Error::Eval(format!("sample {id}: inference produced no frames")));
        }
        let frames = match gan {
            Some(g) if !opts.gt_frames => synthesize_frames(g, &aups)?,
            _ => corpus.load_frames(id, None)?,
        };
        let truth = corpus.load_frames(id, None)?;
        let n = aups.len().min(truth_aups.len()).min(frames.len()).min(truth.len());
        let mut au = Vec::with_capacity(n);
        let mut ps = Vec::with_capacity(n);
        let mut ss = Vec::with_capacity(n);
        for t in 0..n {
            au.push(aups[t].mse(&truth_aups[t]));
            ps.push(psnr(&frames[t], &truth[t])?);
            ss.push(ssim(&frames[t], &truth[t])?);
        }
        let tl1 = temporal_l1(&frames[..n], &truth[..n])?;
        per_sample.push(SampleMetrics {
            id: id.clone(),
            predicted_frames: aups.len(),
            truth_frames: truth.len(),
            au_mse: mean(&au),
            psnr_db: mean(&ps),
            ssim: mean(&ss),
            temporal_l1: tl1,
        });
        if n > 1 {
            tl1_sum += tl1 * (n - 1) as f64;
            tl1_weight += n - 1;
        }
        au_all.extend(au);
        psnr_all.extend(ps);
        ssim_all.extend(ss);
    }
    Ok(MetricsReport {
        au_mse: mean(&au_all),
        psnr_db: mean(&psnr_all),
        ssim: mean(&ssim_all),
        temporal_l1: if tl1_weight == 0 { 0.0 } else { tl1_sum / tl1_weight as f64 },
        frames: au_all.len(),
        per_sample,
    })
}
