use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use anchorpipe_tensor::{ParamSet, Tensor};

use super::checkpoint::{Checkpoint, CheckpointKind, CheckpointMeta, RngState};
use super::{batch_indices, step_checkpoint_path, write_config_echo, LossLog};
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::oracle::Corpus;
use crate::seq2au::{LossReport, Seq2AuParams, Seq2AuTrainer, TrainExample};
use crate::text::{embed_text, load_word2vec_text, tokenize, EmbeddingTable};

pub const SEQ2AU_FILE: &str = "seq2au.anch";
const OPT: &str = "seq2au";
const TEACHER_RNG: &str = "teacher";

/// Word vectors named by the config, or the hashed fallback for every word.
pub fn embedding_table(cfg: &PipelineConfig) -> Result<EmbeddingTable> {
    let table = match &cfg.text.embeddings {
        Some(path) => load_word2vec_text(Path::new(path), cfg.text.fallback_seed)?,
        None => EmbeddingTable::empty(cfg.embed_dim, cfg.text.fallback_seed),
    };
    if table.dim() != cfg.embed_dim {
        return Err(Error::Config(format!(
            "embeddings have {} dims but embed_dim is {}",
            table.dim(),
            cfg.embed_dim
        )));
    }
    Ok(table)
}

/// One example per corpus sample, in manifest order.
pub fn corpus_examples(corpus: &Corpus, table: &EmbeddingTable) -> Result<Vec<TrainExample>> {
    corpus
        .samples()
        .iter()
        .map(|s| TrainExample::new(embed_text(&s.text, table)?, corpus.load_aups(&s.id)?))
        .collect()
}

/// Sorted distinct tokens of the corpus.
pub fn corpus_vocab(corpus: &Corpus) -> Result<Vec<String>> {
    let mut words = BTreeSet::new();
    for s in corpus.samples() {
        words.extend(tokenize(&s.text)?.into_iter().map(|t| t.as_str().to_string()));
    }
    Ok(words.into_iter().collect())
}

/// Resumable translator training state.
#[derive(Debug, Clone)]
pub struct Seq2AuRun {
    pub trainer: Seq2AuTrainer,
    pub config: PipelineConfig,
    pub step: u64,
}

impl Seq2AuRun {
    pub fn new(cfg: &PipelineConfig, vocab: Option<Vec<String>>, table: &EmbeddingTable) -> Result<Self> {
        cfg.validate()?;
        let mut model = Seq2AuParams::new(cfg.embed_dim, cfg.seq2au.hidden, cfg.stream_seed("seq2au.init"));
        if let Some(words) = vocab {
            model = model.with_vocab(words, table)?;
        }
        Ok(Self {
            trainer: Seq2AuTrainer::new(model, cfg),
            config: cfg.clone(),
            step: 0,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let t = &self.trainer;
        let mut c = Checkpoint::new(CheckpointMeta {
            kind: CheckpointKind::Seq2au,
            config: self.config.clone(),
            global_step: self.step,
            rngs: BTreeMap::from([(TEACHER_RNG.to_string(), RngState::capture(&t.rng))]),
            adam_steps: BTreeMap::from([(OPT.to_string(), t.opt.step_count())]),
            vocab: t.model.vocab().map(|v| v.words().to_vec()),
            avg_flm: None,
            aups_source: None,
        });
        push_params(&mut c, "model/", t.model.params());
        let (m, v) = t.opt.moments();
        push_moments(&mut c, &format!("{OPT}.m/"), t.model.params(), m);
        push_moments(&mut c, &format!("{OPT}.v/"), t.model.params(), v);
        c
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, source: &str) -> Result<Self> {
        ckpt.expect_kind(CheckpointKind::Seq2au, source)?;
        let meta = &ckpt.meta;
        let cfg = meta.config.clone();
        let table = EmbeddingTable::empty(cfg.embed_dim, cfg.text.fallback_seed);
        let mut run = Self::new(&cfg, meta.vocab.clone(), &table)?;
        let bad = |msg: String| Error::format(source, 0, msg);
        let model = &mut run.trainer.model;
        let loaded = collect_params(ckpt, "model/", model.params()).map_err(bad)?;
        model.params_mut().assign_from(&loaded).map_err(bad)?;
        let m = collect_moments(ckpt, &format!("{OPT}.m/"), model.params()).map_err(bad)?;
        let v = collect_moments(ckpt, &format!("{OPT}.v/"), model.params()).map_err(bad)?;
        let steps = *meta.adam_steps.get(OPT).ok_or_else(|| bad("missing optimizer step".into()))?;
        run.trainer.opt.restore(steps, m, v).map_err(bad)?;
        let rng = meta
            .rngs
            .get(TEACHER_RNG)
            .ok_or_else(|| bad("missing teacher-forcing rng".into()))?;
        run.trainer.rng = rng.restore()?;
        run.step = meta.global_step;
        Ok(run)
    }

    /// Runs updates until `config.seq2au.steps` in total, saving periodic
    /// checkpoints under `out_dir` when given.
    pub fn run(
        &mut self,
        examples: &[TrainExample],
        out_dir: Option<&Path>,
        on_step: &mut dyn FnMut(u64, &LossReport),
    ) -> Result<()> {
        if examples.is_empty() {
            return Err(Error::Data("no training examples".into()));
        }
        let mut log = match out_dir {
            Some(dir) => Some(LossLog::create(dir, &["mse", "stop_bce", "total"])?),
            None => None,
        };
        let s = &self.config.seq2au;
        let (total, every, bs) = (s.steps as u64, s.checkpoint_every as u64, s.batch_size);
        let data_seed = self.config.stream_seed("seq2au.data");
        while self.step < total {
            let idx = batch_indices(data_seed, examples.len(), bs, self.step);
            let batch: Vec<&TrainExample> = idx.iter().map(|&i| &examples[i]).collect();
            let report = self.trainer.train_step(&batch)?;
            self.step += 1;
            if let Some(log) = log.as_mut() {
                log.row(self.step, &[report.mse, report.stop_bce, report.total])?;
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

pub(crate) fn push_params(c: &mut Checkpoint, prefix: &str, params: &ParamSet<f32>) {
    for (name, t) in params.iter() {
        c.push(format!("{prefix}{name}"), t.clone());
    }
}

pub(crate) fn push_moments(c: &mut Checkpoint, prefix: &str, params: &ParamSet<f32>, moments: &[Tensor<f32>]) {
    for (name, t) in params.names().iter().zip(moments) {
        c.push(format!("{prefix}{name}"), t.clone());
    }
}

/// Parameter set with the names of `like`, read from `prefix`-ed tensors.
pub(crate) fn collect_params(ckpt: &Checkpoint, prefix: &str, like: &ParamSet<f32>) -> Result<ParamSet<f32>, String> {
    let mut out = ParamSet::new();
    for t in collect_moments(ckpt, prefix, like)? {
        let name = &like.names()[out.len()];
        out.add(name.clone(), t);
    }
    Ok(out)
}

pub(crate) fn collect_moments(ckpt: &Checkpoint, prefix: &str, like: &ParamSet<f32>) -> Result<Vec<Tensor<f32>>, String> {
    let found = ckpt.with_prefix(prefix).count();
    if found != like.len() {
        return Err(format!("{found} tensors under {prefix:?}, expected {}", like.len()));
    }
    like.names()
        .iter()
        .map(|n| {
            ckpt.get(&format!("{prefix}{n}"))
                .cloned()
                .ok_or_else(|| format!("missing tensor {prefix}{n}"))
        })
        .collect()
}

/// Trains the translator on every corpus sample. With `resume`, training
/// continues from that checkpoint's state and config, up to `cfg`'s step
/// count. Writes `config.json`, `loss.csv`, periodic checkpoints and
/// `seq2au.anch` under `out_dir`.
pub fn train_seq2au(
    corpus: &Corpus,
    cfg: &PipelineConfig,
    out_dir: &Path,
    resume: Option<&Checkpoint>,
    on_step: &mut dyn FnMut(u64, &LossReport),
) -> Result<Seq2AuRun> {
    corpus
        .validate()
        .map_err(|e| Error::Data(format!("corpus {} failed validation: {e}", corpus.root().display())))?;
    let mut run = match resume {
        Some(c) => {
            let mut run = Seq2AuRun::from_checkpoint(c, "resume checkpoint")?;
            run.config.seq2au.steps = cfg.seq2au.steps;
            run
        }
        None => {
            let table = embedding_table(cfg)?;
            let vocab = if cfg.text.fine_tune { Some(corpus_vocab(corpus)?) } else { None };
            Seq2AuRun::new(cfg, vocab, &table)?
        }
    };
    let table = embedding_table(&run.config)?;
    let examples = corpus_examples(corpus, &table)?;
    write_config_echo(out_dir, &run.config)?;
    run.run(&examples, Some(out_dir), on_step)?;
    run.to_checkpoint().save(&out_dir.join(SEQ2AU_FILE))?;
    Ok(run)
}
