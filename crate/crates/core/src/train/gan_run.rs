use std::collections::BTreeMap;
use std::path::Path;

use anchorpipe_tensor::Tensor;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{Checkpoint, CheckpointKind, CheckpointMeta, RngState};
use super::seq2au_run::{collect_moments, collect_params, embedding_table, push_moments, push_params};
use super::{batch_indices, step_checkpoint_path, write_config_echo, LossLog};
use crate::cond::{CondConfig, StackBuilder};
use crate::config::PipelineConfig;
use crate::domain::{AupsVector, FrameImage, LandmarkSet};
use crate::error::{Error, Result};
use crate::gan::{GanBatch, GanLossReport, GanModels, GanTrainer};
use crate::oracle::Corpus;
use crate::seq2au::{predict_teacher_forced, Seq2AuParams, TrainExample};
use crate::text::{embed_text, EmbeddingTable};

pub const GAN_FILE: &str = "gan.anch";
const OPT_G: &str = "gen";
const OPT_D: &str = "disc";
const SCHEDULE_RNG: &str = "schedule";

/// Where the conditioning AU+PS of each training frame comes from.
pub enum AupsSource<'a> {
    /// Oracle AU+PS from the corpus.
    GroundTruth,
    /// Teacher-forced predictions of a trained translator.
    Seq2au(&'a Seq2AuParams<f32>, &'a EmbeddingTable),
}

impl AupsSource<'_> {
    fn tag(&self) -> &'static str {
        match self {
            AupsSource::GroundTruth => "gt-aups",
            AupsSource::Seq2au(..) => "seq2au",
        }
    }
}

#[derive(Debug, Clone)]
pub struct GanSample {
    pub id: String,
    pub aups: Vec<AupsVector>,
    pub frames: Vec<FrameImage>,
}

/// Frames and conditioning for every training window.
#[derive(Debug, Clone)]
pub struct GanData {
    pub samples: Vec<GanSample>,
    /// `(sample, frame)` pairs, sample-major.
    pub windows: Vec<(usize, usize)>,
    pub avg_flm: LandmarkSet,
    pub builder: StackBuilder,
}

impl GanData {
    /// Loads the samples selected by `cfg.gan.samples` (all when empty),
    /// each truncated to `cfg.gan.max_frames` frames when nonzero.
    pub fn load(corpus: &Corpus, cfg: &PipelineConfig, source: &AupsSource) -> Result<Self> {
        let ccfg = corpus.config();
        if (ccfg.image_h, ccfg.image_w) != (cfg.image_h, cfg.image_w) {
            return Err(Error::Config(format!(
                "corpus frames are {}x{} but the config asks for {}x{}",
                ccfg.image_h, ccfg.image_w, cfg.image_h, cfg.image_w
            )));
        }
        let ids: Vec<String> = if cfg.gan.samples.is_empty() {
            corpus.samples().iter().map(|s| s.id.clone()).collect()
        } else {
            cfg.gan.samples.clone()
        };
        let limit = (cfg.gan.max_frames > 0).then_some(cfg.gan.max_frames);
        let mut samples = Vec::with_capacity(ids.len());
        for id in ids {
            let rec = corpus
                .load_sample(&id, limit)
                .map_err(|e| Error::Data(format!("sample {id}: {e}")))?;
            let aups = match source {
                AupsSource::GroundTruth => rec.aups_seq().to_vec(),
                AupsSource::Seq2au(model, table) => {
                    let full = corpus.load_aups(&id)?;
                    let ex = TrainExample::new(embed_text(&rec.text, table)?, full)?;
                    let mut pred = predict_teacher_forced(*model, &[&ex])?.remove(0);
                    pred.truncate(rec.len());
                    pred
                }
            };
            samples.push(GanSample {
                id,
                aups,
                frames: rec.frames().to_vec(),
            });
        }
        let windows = samples
            .iter()
            .enumerate()
            .flat_map(|(s, smp)| (0..smp.frames.len()).map(move |t| (s, t)))
            .collect();
        let avg_flm = corpus.load_avg_flm()?;
        let builder = StackBuilder::new(CondConfig::from_pipeline(cfg), &avg_flm);
        Ok(Self {
            samples,
            windows,
            avg_flm,
            builder,
        })
    }
}

/// Resumable generator/discriminator training state.
#[derive(Debug, Clone)]
pub struct GanRun {
    pub trainer: GanTrainer,
    pub config: PipelineConfig,
    pub step: u64,
    pub avg_flm: LandmarkSet,
    pub aups_source: String,
    schedule_rng: ChaCha8Rng,
    /// Latest generated frame per `(sample id, frame)`, for scheduled sampling.
    cache: BTreeMap<(String, usize), Tensor<f32>>,
}

impl GanRun {
    pub fn new(cfg: &PipelineConfig, avg_flm: LandmarkSet, aups_source: &str) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            trainer: GanTrainer::new(GanModels::new(cfg)?, cfg)?,
            config: cfg.clone(),
            step: 0,
            avg_flm,
            aups_source: aups_source.into(),
            schedule_rng: ChaCha8Rng::seed_from_u64(cfg.stream_seed("gan.schedule")),
            cache: BTreeMap::new(),
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let t = &self.trainer;
        let mut c = Checkpoint::new(CheckpointMeta {
            kind: CheckpointKind::Gan,
            config: self.config.clone(),
            global_step: self.step,
            rngs: BTreeMap::from([(SCHEDULE_RNG.to_string(), RngState::capture(&self.schedule_rng))]),
            adam_steps: BTreeMap::from([
                (OPT_G.to_string(), t.opt_g.step_count()),
                (OPT_D.to_string(), t.opt_d.step_count()),
            ]),
            vocab: None,
            avg_flm: Some(self.avg_flm.flatten()),
            aups_source: Some(self.aups_source.clone()),
        });
        let (gp, dp) = (t.models.gen.params(), t.models.disc.params());
        push_params(&mut c, "gen/", gp);
        push_params(&mut c, "disc/", dp);
        let (m, v) = t.opt_g.moments();
        push_moments(&mut c, &format!("{OPT_G}.m/"), gp, m);
        push_moments(&mut c, &format!("{OPT_G}.v/"), gp, v);
        let (m, v) = t.opt_d.moments();
        push_moments(&mut c, &format!("{OPT_D}.m/"), dp, m);
        push_moments(&mut c, &format!("{OPT_D}.v/"), dp, v);
        for ((id, frame), t) in &self.cache {
            c.push(format!("cache/{id}/{frame}"), t.clone());
        }
        c
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, source: &str) -> Result<Self> {
        ckpt.expect_kind(CheckpointKind::Gan, source)?;
        let meta = &ckpt.meta;
        let bad = |msg: String| Error::format(source, 0, msg);
        let flat = meta.avg_flm.as_ref().ok_or_else(|| bad("missing average landmarks".into()))?;
        if flat.len() % 2 != 0 {
            return Err(bad("odd landmark coordinate count".into()));
        }
        let avg_flm = LandmarkSet::new(flat.chunks(2).map(|p| (p[0], p[1])).collect())
            .map_err(|e| bad(e.to_string()))?;
        let aups_source = meta.aups_source.clone().unwrap_or_else(|| "gt-aups".into());
        let mut run = Self::new(&meta.config, avg_flm, &aups_source)?;
        let t = &mut run.trainer;
        let g = collect_params(ckpt, "gen/", t.models.gen.params()).map_err(bad)?;
        t.models.gen.params_mut().assign_from(&g).map_err(bad)?;
        let d = collect_params(ckpt, "disc/", t.models.disc.params()).map_err(bad)?;
        t.models.disc.params_mut().assign_from(&d).map_err(bad)?;
        for (opt, name, params) in [
            (&mut t.opt_g, OPT_G, t.models.gen.params()),
            (&mut t.opt_d, OPT_D, t.models.disc.params()),
        ] {
            let m = collect_moments(ckpt, &format!("{name}.m/"), params).map_err(bad)?;
            let v = collect_moments(ckpt, &format!("{name}.v/"), params).map_err(bad)?;
            let steps = *meta
                .adam_steps
                .get(name)
                .ok_or_else(|| bad(format!("missing {name} optimizer step")))?;
            opt.restore(steps, m, v).map_err(bad)?;
        }
        if let Some(r) = meta.rngs.get(SCHEDULE_RNG) {
            run.schedule_rng = r.restore()?;
        }
        for (rest, t) in ckpt.with_prefix("cache/") {
            let (id, frame) = rest
                .rsplit_once('/')
                .and_then(|(id, f)| f.parse().ok().map(|f| (id.to_string(), f)))
                .ok_or_else(|| bad(format!("bad cache entry {rest:?}")))?;
            run.cache.insert((id, frame), t.clone());
        }
        run.step = meta.global_step;
        Ok(run)
    }

    /// Batch for `windows`: stacks use ground-truth priors except where
    /// scheduled sampling swaps in the cached generated frame; the
    /// discriminator always sees ground-truth priors.
    pub fn assemble_batch(&mut self, data: &GanData, windows: &[(usize, usize)]) -> Result<GanBatch<f32>> {
        let cfg = data.builder.config();
        let (n, h, w) = (cfg.n_prior, cfg.height, cfg.width);
        let p = self.config.gan.scheduled_sampling;
        let blank = FrameImage::filled(h, w, 0.0);
        let mut stacks = Vec::with_capacity(windows.len());
        let mut priors_gt = Vec::with_capacity(windows.len());
        let mut reals = Vec::with_capacity(windows.len());
        for &(s, t) in windows {
            let smp = &data.samples[s];
            let mut prior_vecs = Vec::with_capacity(n);
            let mut prior_frames: Vec<FrameImage> = Vec::with_capacity(n);
            let mut gt_frames: Vec<&FrameImage> = Vec::with_capacity(n);
            for back in (1..=n).rev() {
                match t.checked_sub(back) {
                    Some(i) => {
                        prior_vecs.push(smp.aups[i]);
                        gt_frames.push(&smp.frames[i]);
                        let cached = self.cache.get(&(smp.id.clone(), i));
                        let swap = p > 0.0 && cached.is_some() && self.schedule_rng.random::<f64>() < p;
                        let frame = match cached {
                            Some(c) if swap => FrameImage::new(h, w, c.data().to_vec())?,
                            _ => smp.frames[i].clone(),
                        };
                        prior_frames.push(frame);
                    }
                    None => {
                        prior_vecs.push(AupsVector::zero_normalized());
                        gt_frames.push(&blank);
                        prior_frames.push(blank.clone());
                    }
                }
            }
            let refs: Vec<&FrameImage> = prior_frames.iter().collect();
            let stack = data
                .builder
                .assemble(&smp.aups[t], &prior_vecs, &refs)
                .map_err(|e| Error::Data(format!("sample {} frame {t}: {e}", smp.id)))?;
            stacks.push(stack.into_channels());
            let gt: Vec<Tensor<f32>> = gt_frames.iter().map(|f| Tensor::new(&[3, h, w], f.pixels().to_vec())).collect();
            let gt_refs: Vec<&Tensor<f32>> = gt.iter().collect();
            priors_gt.push(if n == 0 { Tensor::zeros(&[0, h, w]) } else { Tensor::concat(&gt_refs, 0) });
            reals.push(Tensor::new(&[3, h, w], smp.frames[t].pixels().to_vec()));
        }
        Ok(GanBatch {
            stacks: Tensor::stack(&stacks),
            prior_frames: Tensor::stack(&priors_gt),
            real: Tensor::stack(&reals),
        })
    }

    /// Runs alternating updates until `config.gan.steps` in total.
    pub fn run(
        &mut self,
        data: &GanData,
        out_dir: Option<&Path>,
        on_step: &mut dyn FnMut(u64, &GanLossReport),
    ) -> Result<()> {
        if data.windows.is_empty() {
            return Err(Error::Data("no training windows".into()));
        }
        let mut log = match out_dir {
            Some(dir) => Some(LossLog::create(dir, &["d_loss", "g_adv", "g_fm", "g_perc"])?),
            None => None,
        };
        let g = &self.config.gan;
        let (total, every, bs) = (g.steps as u64, g.checkpoint_every as u64, g.batch_size);
        let keep_cache = g.scheduled_sampling > 0.0;
        let data_seed = self.config.stream_seed("gan.data");
        while self.step < total {
            let idx = batch_indices(data_seed, data.windows.len(), bs, self.step);
            let windows: Vec<(usize, usize)> = idx.iter().map(|&i| data.windows[i]).collect();
            let batch = self.assemble_batch(data, &windows)?;
            let (report, fake) = self.trainer.train_step(&batch)?;
            if keep_cache {
                for (b, &(s, t)) in windows.iter().enumerate() {
                    self.cache.insert((data.samples[s].id.clone(), t), fake.index_outer(b));
                }
            }
            self.step += 1;
            if let Some(log) = log.as_mut() {
                let e = report.entries();
                log.row(self.step, &[e[0].1, e[1].1, e[2].1, e[3].1])?;
            }
            on_step(self.step, &report);
            if let Some(dir) = out_dir {
                if every > 0 && self.step.is_multiple_of(every) && self.step < total {
                    self.to_checkpoint().save(&step_checkpoint_path(dir, self.step))?;
                }
            }
        }
        Ok(())
    }
}

/// Trains the frame generator on the corpus. With `resume`, continues from
/// that checkpoint's state and config up to `cfg`'s step count. Writes
/// `config.json`, `loss.csv`, periodic checkpoints and `gan.anch` under
/// `out_dir`.
pub fn train_gan(
    corpus: &Corpus,
    cfg: &PipelineConfig,
    source: &AupsSource,
    out_dir: &Path,
    resume: Option<&Checkpoint>,
    on_step: &mut dyn FnMut(u64, &GanLossReport),
) -> Result<GanRun> {
    corpus
        .validate()
        .map_err(|e| Error::Data(format!("corpus {} failed validation: {e}", corpus.root().display())))?;
    let mut run = match resume {
        Some(c) => {
            let mut run = GanRun::from_checkpoint(c, "resume checkpoint")?;
            run.config.gan.steps = cfg.gan.steps;
            run
        }
        None => GanRun::new(cfg, corpus.load_avg_flm()?, source.tag())?,
    };
    let data = GanData::load(corpus, &run.config, source)?;
    write_config_echo(out_dir, &run.config)?;
    run.run(&data, Some(out_dir), on_step)?;
    run.to_checkpoint().save(&out_dir.join(GAN_FILE))?;
    Ok(run)
}

/// Translator and word vectors for the seq2au source of `train_gan`.
pub fn load_translator(path: &Path) -> Result<(Seq2AuParams<f32>, EmbeddingTable)> {
    let ckpt = Checkpoint::load(path)?;
    let run = super::Seq2AuRun::from_checkpoint(&ckpt, &path.display().to_string())?;
    let table = embedding_table(&run.config)?;
    Ok((run.trainer.model, table))
}
