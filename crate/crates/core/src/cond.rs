//! Spatial conditioning input for the generator.
//!
//! Channel order: `AU+PS[t−n] … AU+PS[t]` (20 constant channels each), the
//! average-landmark heatmap, then `frame[t−n] … frame[t−1]` (3 each).

use anchorpipe_tensor::Tensor;

use crate::config::PipelineConfig;
use crate::domain::{AupsVector, FrameImage, LandmarkSet, AUPS_DIM};
use crate::error::{Error, Result};

/// Channel count of a stack with `n_prior` priors.
pub fn channel_count(n_prior: usize, dedup_flm: bool) -> usize {
    let heatmaps = if dedup_flm { 1 } else { n_prior + 1 };
    AUPS_DIM * (n_prior + 1) + heatmaps + 3 * n_prior
}

/// Settings shared by every stack of one run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CondConfig {
    pub n_prior: usize,
    pub height: usize,
    pub width: usize,
    pub sigma_px: f64,
    pub dedup_flm: bool,
}

impl CondConfig {
    pub fn from_pipeline(cfg: &PipelineConfig) -> Self {
        Self {
            n_prior: cfg.n_prior,
            height: cfg.image_h,
            width: cfg.image_w,
            sigma_px: cfg.gan.sigma_px,
            dedup_flm: cfg.gan.dedup_flm,
        }
    }

    pub fn channels(&self) -> usize {
        channel_count(self.n_prior, self.dedup_flm)
    }
}

/// What a run of channels holds. Offsets count back from the current step
/// (`0` is the current frame, `1` the one before it).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupKind {
    Aups { back: usize },
    Heatmap { back: usize },
    Frame { back: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChannelGroup {
    pub kind: GroupKind,
    pub start: usize,
    pub len: usize,
}

/// Ordered channel groups of a stack.
pub fn layout(cfg: &CondConfig) -> Vec<ChannelGroup> {
    let n = cfg.n_prior;
    let mut groups = Vec::new();
    let mut start = 0;
    let mut push = |kind, len| {
        groups.push(ChannelGroup { kind, start, len });
        start += len;
    };
    for back in (0..=n).rev() {
        push(GroupKind::Aups { back }, AUPS_DIM);
    }
    if cfg.dedup_flm {
        push(GroupKind::Heatmap { back: 0 }, 1);
    } else {
        for back in (0..=n).rev() {
            push(GroupKind::Heatmap { back }, 1);
        }
    }
    for back in (1..=n).rev() {
        push(GroupKind::Frame { back }, 3);
    }
    groups
}

/// `C×H×W` generator input plus its layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningStack {
    channels: Tensor<f32>,
    layout: Vec<ChannelGroup>,
}

impl ConditioningStack {
    pub fn channels(&self) -> &Tensor<f32> {
        &self.channels
    }

    pub fn into_channels(self) -> Tensor<f32> {
        self.channels
    }

    pub fn layout(&self) -> &[ChannelGroup] {
        &self.layout
    }

    pub fn num_channels(&self) -> usize {
        self.channels.shape()[0]
    }

    /// Channels of one group, `[len, H, W]`.
    pub fn group(&self, kind: GroupKind) -> Option<Tensor<f32>> {
        self.layout
            .iter()
            .find(|g| g.kind == kind)
            .map(|g| self.channels.narrow(0, g.start, g.len))
    }
}

/// 20 spatially constant channels, channel `k` filled with `v[k]`.
pub fn broadcast_aups(v: &AupsVector, height: usize, width: usize) -> Result<Tensor<f32>> {
    if !v.is_normalized() {
        return Err(Error::Contract("broadcast_aups expects a normalized vector".into()));
    }
    let plane = height * width;
    let vals = v.to_array();
    Ok(Tensor::from_fn(&[AUPS_DIM, height, width], |i| vals[i / plane] as f32))
}

/// Max-combined Gaussian bumps at each landmark. Landmark `(x, y)` sits at
/// pixel `(x·(W−1), y·(H−1))`. Far tails are floored at the smallest normal
/// `f32` so every value stays strictly positive.
pub fn splat_landmarks(flm: &LandmarkSet, height: usize, width: usize, sigma_px: f64) -> Tensor<f32> {
    let centers: Vec<(f64, f64)> = flm
        .points()
        .iter()
        .map(|&(x, y)| (x * (width.max(1) - 1) as f64, y * (height.max(1) - 1) as f64))
        .collect();
    let denom = 2.0 * sigma_px * sigma_px;
    Tensor::from_fn(&[1, height, width], |i| {
        let (py, px) = ((i / width) as f64, (i % width) as f64);
        let d2 = centers
            .iter()
            .map(|&(cx, cy)| (px - cx).powi(2) + (py - cy).powi(2))
            .fold(f64::INFINITY, f64::min);
        ((-d2 / denom).exp() as f32).max(f32::MIN_POSITIVE)
    })
}

/// Precomputed heatmap for one corpus plus the run settings.
#[derive(Debug, Clone)]
pub struct StackBuilder {
    cfg: CondConfig,
    heatmap: Tensor<f32>,
    layout: Vec<ChannelGroup>,
}

impl StackBuilder {
    pub fn new(cfg: CondConfig, avg_flm: &LandmarkSet) -> Self {
        Self {
            cfg,
            heatmap: splat_landmarks(avg_flm, cfg.height, cfg.width, cfg.sigma_px),
            layout: layout(&cfg),
        }
    }

    pub fn config(&self) -> &CondConfig {
        &self.cfg
    }

    pub fn heatmap(&self) -> &Tensor<f32> {
        &self.heatmap
    }

    /// `priors` and `prior_frames` are oldest first and hold exactly
    /// `n_prior` entries each.
    pub fn assemble(
        &self,
        current: &AupsVector,
        priors: &[AupsVector],
        prior_frames: &[&FrameImage],
    ) -> Result<ConditioningStack> {
        let (n, h, w) = (self.cfg.n_prior, self.cfg.height, self.cfg.width);
        if priors.len() != n || prior_frames.len() != n {
            return Err(Error::Shape(format!(
                "expected {n} priors and {n} prior frames, got {} and {}",
                priors.len(),
                prior_frames.len()
            )));
        }
        if let Some(f) = prior_frames.iter().find(|f| f.height() != h || f.width() != w) {
            return Err(Error::Shape(format!(
                "prior frame is {}x{}, stack is {h}x{w}",
                f.height(),
                f.width()
            )));
        }
        let mut parts: Vec<Tensor<f32>> = Vec::with_capacity(2 * n + 2);
        for v in priors.iter().chain(std::iter::once(current)) {
            parts.push(broadcast_aups(v, h, w)?);
        }
        let heatmaps = if self.cfg.dedup_flm { 1 } else { n + 1 };
        for _ in 0..heatmaps {
            parts.push(self.heatmap.clone());
        }
        for f in prior_frames {
            parts.push(Tensor::new(&[3, h, w], f.pixels().to_vec()));
        }
        let refs: Vec<&Tensor<f32>> = parts.iter().collect();
        Ok(ConditioningStack {
            channels: Tensor::concat(&refs, 0),
            layout: self.layout.clone(),
        })
    }

    /// Stack for step `t` of a sequence, padding missing priors with zero
    /// vectors and all-zero frames. `frames` must cover at least `0..t`.
    pub fn assemble_at(&self, aups: &[AupsVector], frames: &[FrameImage], t: usize) -> Result<ConditioningStack> {
        let n = self.cfg.n_prior;
        if t >= aups.len() || frames.len() < t {
            return Err(Error::Shape(format!(
                "step {t} out of range for {} vectors and {} frames",
                aups.len(),
                frames.len()
            )));
        }
        let blank = FrameImage::filled(self.cfg.height, self.cfg.width, 0.0);
        let mut priors = Vec::with_capacity(n);
        let mut prior_frames = Vec::with_capacity(n);
        for back in (1..=n).rev() {
            match t.checked_sub(back) {
                Some(i) => {
                    priors.push(aups[i]);
                    prior_frames.push(&frames[i]);
                }
                None => {
                    priors.push(AupsVector::zero_normalized());
                    prior_frames.push(&blank);
                }
            }
        }
        self.assemble(&aups[t], &priors, &prior_frames)
    }
}

/// One-off stack without a cached heatmap.
pub fn assemble_stack(
    current: &AupsVector,
    priors: &[AupsVector],
    avg_flm: &LandmarkSet,
    prior_frames: &[&FrameImage],
    cfg: &CondConfig,
) -> Result<ConditioningStack> {
    StackBuilder::new(*cfg, avg_flm).assemble(current, priors, prior_frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(n: usize) -> CondConfig {
        CondConfig {
            n_prior: n,
            height: 8,
            width: 8,
            sigma_px: 1.5,
            dedup_flm: true,
        }
    }

    fn flm() -> LandmarkSet {
        LandmarkSet::new(vec![(0.25, 0.5), (0.75, 0.5), (0.5, 0.8)]).unwrap()
    }

    fn vec_with(seed: f64) -> AupsVector {
        let vals: Vec<f64> = (0..AUPS_DIM)
            .map(|k| {
                let s = (seed + k as f64).sin();
                if k < 17 { 0.5 + 0.5 * s } else { s }
            })
            .collect();
        AupsVector::from_slice(&vals, true).unwrap()
    }

    #[test]
    fn broadcast_zero_and_constancy() {
        let z = broadcast_aups(&AupsVector::zero_normalized(), 4, 5).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        let v = vec_with(0.3);
        let b = broadcast_aups(&v, 4, 5).unwrap();
        for k in 0..AUPS_DIM {
            let ch = b.narrow(0, k, 1);
            let (lo, hi) = ch.data().iter().fold((f32::MAX, f32::MIN), |(a, b), &x| (a.min(x), b.max(x)));
            assert_eq!(hi - lo, 0.0);
            let mean = ch.data().iter().map(|&x| x as f64).sum::<f64>() / 20.0;
            assert!((mean - v.get(k)).abs() < 1e-6);
        }
        let raw = AupsVector::new([0.0; 17], [0.0; 3], false).unwrap();
        assert!(matches!(broadcast_aups(&raw, 2, 2), Err(Error::Contract(_))));
    }

    #[test]
    fn splat_closed_form() {
        // 9×9: the centre landmark sits exactly on pixel (4, 4).
        let one = LandmarkSet::new(vec![(0.5, 0.5)]).unwrap();
        let m = splat_landmarks(&one, 9, 9, 1.5);
        assert_eq!(m.data()[4 * 9 + 4], 1.0);
        let three_right = m.data()[4 * 9 + 7] as f64;
        assert!((three_right - (-9.0f64 / 4.5).exp()).abs() < 1e-7);
        assert!((three_right - 0.1353).abs() < 1e-4);
        let big = splat_landmarks(&one, 64, 64, 1.5);
        assert!(big.data().iter().all(|&v| v > 0.0 && v <= 1.0));
    }

    #[test]
    fn two_prior_window_has_67_channels() {
        let b = StackBuilder::new(cfg(2), &flm());
        let f = FrameImage::filled(8, 8, 0.1);
        let s = b.assemble(&vec_with(0.0), &[vec_with(1.0), vec_with(2.0)], &[&f, &f]).unwrap();
        assert_eq!(s.num_channels(), 67);
        let s0 = StackBuilder::new(cfg(0), &flm()).assemble(&vec_with(0.0), &[], &[]).unwrap();
        assert_eq!(s0.num_channels(), 21);
    }

    #[test]
    fn layout_round_trips_groups() {
        let b = StackBuilder::new(cfg(2), &flm());
        let f1 = FrameImage::filled(8, 8, -0.5);
        let f2 = FrameImage::filled(8, 8, 0.25);
        let (cur, p1, p2) = (vec_with(0.0), vec_with(1.0), vec_with(2.0));
        let s = b.assemble(&cur, &[p2, p1], &[&f2, &f1]).unwrap();
        assert_eq!(s.group(GroupKind::Aups { back: 0 }).unwrap(), broadcast_aups(&cur, 8, 8).unwrap());
        assert_eq!(s.group(GroupKind::Aups { back: 1 }).unwrap(), broadcast_aups(&p1, 8, 8).unwrap());
        assert_eq!(s.group(GroupKind::Aups { back: 2 }).unwrap(), broadcast_aups(&p2, 8, 8).unwrap());
        assert_eq!(s.group(GroupKind::Heatmap { back: 0 }).unwrap(), *b.heatmap());
        assert_eq!(s.group(GroupKind::Frame { back: 1 }).unwrap().data(), f1.pixels());
        assert_eq!(s.group(GroupKind::Frame { back: 2 }).unwrap().data(), f2.pixels());
        assert!(s.group(GroupKind::Frame { back: 3 }).is_none());
    }

    #[test]
    fn count_mismatch_is_shape_error() {
        let b = StackBuilder::new(cfg(2), &flm());
        let f = FrameImage::filled(8, 8, 0.0);
        assert!(matches!(b.assemble(&vec_with(0.0), &[vec_with(1.0)], &[&f, &f]), Err(Error::Shape(_))));
        let small = FrameImage::filled(4, 4, 0.0);
        assert!(matches!(
            b.assemble(&vec_with(0.0), &[vec_with(1.0), vec_with(2.0)], &[&f, &small]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn sequence_start_is_zero_padded() {
        let b = StackBuilder::new(cfg(2), &flm());
        let aups = vec![vec_with(0.0), vec_with(1.0)];
        let frames = vec![FrameImage::filled(8, 8, 0.5)];
        let s = b.assemble_at(&aups, &frames, 1).unwrap();
        assert!(s.group(GroupKind::Aups { back: 2 }).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(s.group(GroupKind::Frame { back: 2 }).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(s.group(GroupKind::Frame { back: 1 }).unwrap().data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn permuting_priors_changes_stack() {
        let b = StackBuilder::new(cfg(2), &flm());
        let f = FrameImage::filled(8, 8, 0.0);
        let (c, p, q) = (vec_with(0.0), vec_with(1.0), vec_with(2.0));
        let a = b.assemble(&c, &[p, q], &[&f, &f]).unwrap();
        let swapped = b.assemble(&c, &[q, p], &[&f, &f]).unwrap();
        assert_ne!(a, swapped);
        let same = b.assemble(&c, &[p, p], &[&f, &f]).unwrap();
        assert_eq!(same, b.assemble(&c, &[p, p], &[&f, &f]).unwrap());
    }

    #[test]
    fn undeduplicated_heatmaps_repeat_per_step() {
        let c = CondConfig {
            dedup_flm: false,
            ..cfg(2)
        };
        assert_eq!(c.channels(), 69);
        let b = StackBuilder::new(c, &flm());
        let f = FrameImage::filled(8, 8, 0.0);
        let s = b.assemble(&vec_with(0.0), &[vec_with(1.0), vec_with(2.0)], &[&f, &f]).unwrap();
        assert_eq!(s.num_channels(), 69);
        for back in 0..3 {
            assert_eq!(s.group(GroupKind::Heatmap { back }).unwrap(), *b.heatmap());
        }
    }

    proptest! {
        #[test]
        fn channel_formula_holds(n in 0usize..=5) {
            let b = StackBuilder::new(cfg(n), &flm());
            let f = FrameImage::filled(8, 8, 0.0);
            let priors = vec![AupsVector::zero_normalized(); n];
            let frames = vec![&f; n];
            let s = b.assemble(&vec_with(0.0), &priors, &frames).unwrap();
            prop_assert_eq!(s.num_channels(), 20 * (n + 1) + 1 + 3 * n);
            prop_assert_eq!(layout(&cfg(n)).iter().map(|g| g.len).sum::<usize>(), s.num_channels());
        }
    }
}
