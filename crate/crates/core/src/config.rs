use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fully resolved settings for every stage. Serialized as the config echo
/// written next to every output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Root seed; every random stream is derived from it.
    pub seed: u64,
    /// Number of prior frames (and AU+PS vectors) conditioning each frame.
    pub n_prior: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub embed_dim: usize,
    /// Upper bound on decoded frames.
    pub t_max: usize,
    /// Feature-matching weight.
    pub lambda_fm: f64,
    /// Perceptual-loss weight.
    pub lambda_vgg: f64,
    pub text: TextConfig,
    pub oracle: OracleConfig,
    pub seq2au: Seq2AuConfig,
    pub gan: GanConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextConfig {
    /// Word2vec text file; when absent every word takes the hashed fallback.
    pub embeddings: Option<String>,
    pub fallback_seed: u64,
    /// Train the vectors of corpus words together with the translator.
    pub fine_tune: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    pub frames_per_word: usize,
    pub landmark_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seq2AuConfig {
    pub hidden: usize,
    pub lambda_stop: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub steps: usize,
    /// Probability of feeding the ground-truth previous frame while training.
    pub teacher_forcing: f64,
    /// Global gradient-norm cap; `0` disables clipping.
    pub grad_clip: f64,
    pub checkpoint_every: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdversarialLoss {
    /// Log-likelihood (binary cross-entropy on logits).
    Vanilla,
    /// Least-squares targets 1/0.
    Lsgan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GanConfig {
    pub ngf: usize,
    pub ndf: usize,
    pub res_blocks: usize,
    pub disc_scales: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub adversarial: AdversarialLoss,
    /// Probability that a prior-frame slot is filled with the generator's
    /// own latest output for that frame instead of the ground truth.
    pub scheduled_sampling: f64,
    /// Landmark splat width in pixels.
    pub sigma_px: f64,
    /// Include the average-landmark heatmap once instead of once per timestep.
    pub dedup_flm: bool,
    pub perceptual_widths: Vec<usize>,
    pub perceptual_weights: Vec<f64>,
    /// Restrict training to these sample ids (all when empty).
    pub samples: Vec<String>,
    /// Use only the first `max_frames` frames of each sample (all when 0).
    pub max_frames: usize,
    pub checkpoint_every: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            n_prior: 2,
            image_h: 64,
            image_w: 64,
            embed_dim: 200,
            t_max: 120,
            lambda_fm: 10.0,
            lambda_vgg: 10.0,
            text: TextConfig::default(),
            oracle: OracleConfig::default(),
            seq2au: Seq2AuConfig::default(),
            gan: GanConfig::default(),
        }
    }
}

impl Default for TextConfig {
    fn default() -> Self {
        Self {
            embeddings: None,
            fallback_seed: 1234,
            fine_tune: false,
        }
    }
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            frames_per_word: 4,
            landmark_count: 12,
        }
    }
}

impl Default for Seq2AuConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            lambda_stop: 0.5,
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            batch_size: 20,
            steps: 2000,
            teacher_forcing: 1.0,
            grad_clip: 0.0,
            checkpoint_every: 500,
        }
    }
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            ngf: 16,
            ndf: 16,
            res_blocks: 4,
            disc_scales: 2,
            lr_g: 2e-4,
            lr_d: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            batch_size: 4,
            steps: 3000,
            adversarial: AdversarialLoss::Vanilla,
            scheduled_sampling: 0.5,
            sigma_px: 1.5,
            dedup_flm: true,
            perceptual_widths: vec![8, 16, 32],
            perceptual_weights: vec![1.0, 1.0, 1.0],
            samples: Vec::new(),
            max_frames: 0,
            checkpoint_every: 1000,
        }
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Config(msg()))
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        ensure(self.t_max >= 1, || "t_max must be at least 1".into())?;
        ensure(self.embed_dim >= 1, || "embed_dim must be at least 1".into())?;
        ensure(self.lambda_fm >= 0.0 && self.lambda_vgg >= 0.0, || {
            format!(
                "loss weights must be nonnegative (lambda_fm={}, lambda_vgg={})",
                self.lambda_fm, self.lambda_vgg
            )
        })?;
        ensure(
            self.image_h >= 4 && self.image_w >= 4 && self.image_h.is_multiple_of(4) && self.image_w.is_multiple_of(4),
            || format!("image size {}x{} must be a positive multiple of 4", self.image_h, self.image_w),
        )?;
        ensure(self.oracle.frames_per_word >= 1, || "frames_per_word must be at least 1".into())?;
        ensure(self.oracle.landmark_count == 12, || {
            "the synthetic face defines exactly 12 landmarks".into()
        })?;
        let s = &self.seq2au;
        ensure(s.hidden >= 1 && s.batch_size >= 1, || "seq2au hidden and batch_size must be positive".into())?;
        ensure(s.lr > 0.0 && s.lambda_stop >= 0.0, || "seq2au lr must be positive, lambda_stop nonnegative".into())?;
        ensure((0.0..=1.0).contains(&s.teacher_forcing), || "teacher_forcing must be in [0,1]".into())?;
        ensure(s.grad_clip >= 0.0, || "grad_clip must be nonnegative".into())?;
        let g = &self.gan;
        ensure(g.ngf >= 1 && g.ndf >= 1 && g.batch_size >= 1, || "gan widths and batch_size must be positive".into())?;
        ensure(g.disc_scales >= 1, || "at least one discriminator scale".into())?;
        ensure(g.lr_g > 0.0 && g.lr_d > 0.0, || "gan learning rates must be positive".into())?;
        ensure((0.0..=1.0).contains(&g.scheduled_sampling), || "scheduled_sampling must be in [0,1]".into())?;
        ensure(g.sigma_px > 0.0, || "sigma_px must be positive".into())?;
        ensure(
            !g.perceptual_widths.is_empty() && g.perceptual_widths.len() == g.perceptual_weights.len(),
            || "perceptual_widths and perceptual_weights must be nonempty and equally long".into(),
        )?;
        ensure(g.perceptual_weights.iter().all(|w| *w >= 0.0), || "perceptual weights must be nonnegative".into())?;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Independent seed for one named random stream.
    pub fn stream_seed(&self, tag: &str) -> u64 {
        derive_seed(self.seed, tag)
    }
}

/// FNV-1a over `tag`, mixed with `base` through a splitmix finalizer.
pub fn derive_seed(base: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = h ^ base.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_roundtrip() {
        let c = PipelineConfig::default();
        c.validate().unwrap();
        assert_eq!(c.n_prior, 2);
        assert_eq!(c.lambda_fm, 10.0);
        assert_eq!(c.lambda_vgg, 10.0);
        assert_eq!(PipelineConfig::from_json(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn partial_json_fills_defaults() {
        let c = PipelineConfig::from_json(r#"{"n_prior": 0, "gan": {"ngf": 4}}"#).unwrap();
        assert_eq!(c.n_prior, 0);
        assert_eq!(c.gan.ngf, 4);
        assert_eq!(c.gan.ndf, 16);
    }

    #[test]
    fn rejects_bad_values_and_unknown_keys() {
        assert!(matches!(PipelineConfig::from_json(r#"{"lambda_fm": -1.0}"#), Err(Error::Config(_))));
        assert!(matches!(PipelineConfig::from_json(r#"{"t_max": 0}"#), Err(Error::Config(_))));
        assert!(matches!(PipelineConfig::from_json(r#"{"bogus": 1}"#), Err(Error::Config(_))));
    }

    #[test]
    fn stream_seeds_differ_by_tag() {
        let c = PipelineConfig::default();
        assert_ne!(c.stream_seed("a"), c.stream_seed("b"));
        assert_eq!(c.stream_seed("a"), c.stream_seed("a"));
    }
}
