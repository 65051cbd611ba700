//! Training loops for both stages, checkpoints, synthesis and evaluation.

pub mod checkpoint;
pub mod eval;
pub mod gan_run;
pub mod metrics;
pub mod seq2au_run;

pub use checkpoint::{Checkpoint, CheckpointKind, CheckpointMeta, RngState};
pub use eval::{
    evaluate, synthesize_frames, teacher_forced_frames, EvalOptions, LoadedGan, LoadedSeq2au, MetricsReport,
    SampleMetrics,
};
pub use gan_run::{train_gan, AupsSource, GanData, GanRun};
pub use seq2au_run::{embedding_table, train_seq2au, Seq2AuRun};

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{derive_seed, PipelineConfig};
use crate::error::{Error, Result};

pub const CONFIG_ECHO: &str = "config.json";
pub const LOSS_LOG: &str = "loss.csv";

/// Writes the resolved config to `<dir>/config.json`.
pub fn write_config_echo(dir: &Path, cfg: &PipelineConfig) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(CONFIG_ECHO);
    fs::write(&path, cfg.to_json() + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Item indices of batch `step`. Each epoch visits every item once in an
/// order shuffled by `(seed, epoch)`, so any step's batch is a pure function
/// of its number and resumed runs need no data-order state.
pub fn batch_indices(seed: u64, items: usize, batch_size: usize, step: u64) -> Vec<usize> {
    let per_epoch = items.div_ceil(batch_size) as u64;
    let epoch = step / per_epoch;
    let chunk = (step % per_epoch) as usize;
    let mut order: Vec<usize> = (0..items).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("epoch{epoch}"))));
    let start = chunk * batch_size;
    order[start..(start + batch_size).min(items)].to_vec()
}

/// Path of the periodic checkpoint taken after `step` updates.
pub fn step_checkpoint_path(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join("checkpoints").join(format!("step_{step:06}.anch"))
}

/// Append-only CSV loss log.
pub(crate) struct LossLog {
    file: fs::File,
    path: PathBuf,
}

impl LossLog {
    pub(crate) fn create(dir: &Path, columns: &[&str]) -> Result<Self> {
        let path = dir.join(LOSS_LOG);
        let mut file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        writeln!(file, "step,{}", columns.join(",")).map_err(|e| Error::io(&path, e))?;
        Ok(Self { file, path })
    }

    pub(crate) fn row(&mut self, step: u64, values: &[f64]) -> Result<()> {
        let cells: Vec<String> = values.iter().map(|v| format!("{v:.9}")).collect();
        writeln!(self.file, "{step},{}", cells.join(",")).map_err(|e| Error::io(&self.path, e))
    }
}
