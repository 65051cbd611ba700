//! Conditional frame generator, multi-scale patch discriminator and the
//! adversarial + feature-matching + perceptual objective.

mod loss;
mod nets;

pub use loss::{
    d_adv_loss, fm_loss, fm_loss_graph, g_adv_loss, gan_loss, perceptual_loss, perceptual_loss_graph, FeatureExtractor,
    GanLossReport, IdentityExtractor, LossWeights, RandomConvExtractor,
};
pub use nets::{Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, ScaleOutput, ScaleTensors};

use anchorpipe_tensor::{Adam, Bound, Graph, Real, Tensor, Var};

use crate::cond::channel_count;
use crate::config::{AdversarialLoss, PipelineConfig};
use crate::error::{Error, Result};

/// A batch of training windows.
#[derive(Debug, Clone, PartialEq)]
pub struct GanBatch<T> {
    /// Generator inputs, `[B, C, H, W]`.
    pub stacks: Tensor<T>,
    /// Ground-truth prior frames of each window, oldest first, `[B, 3n, H, W]`.
    pub prior_frames: Tensor<T>,
    /// Ground-truth current frames, `[B, 3, H, W]`.
    pub real: Tensor<T>,
}

impl<T: Real> GanBatch<T> {
    pub fn batch_size(&self) -> usize {
        self.stacks.shape()[0]
    }

    pub fn cast<U: Real>(&self) -> GanBatch<U> {
        GanBatch {
            stacks: self.stacks.cast(),
            prior_frames: self.prior_frames.cast(),
            real: self.real.cast(),
        }
    }

    fn validate(&self, in_ch: usize) -> Result<()> {
        let s = self.stacks.shape();
        let r = self.real.shape();
        let p = self.prior_frames.shape();
        let ok = s.len() == 4
            && s[1] == in_ch
            && r == [s[0], 3, s[2], s[3]]
            && p.len() == 4
            && p[0] == s[0]
            && p[1].is_multiple_of(3)
            && p[2..] == s[2..];
        if ok {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "batch shapes stacks {s:?}, priors {p:?}, real {r:?} (generator expects {in_ch} channels)"
            )))
        }
    }
}

/// Generator, discriminator and the frozen perceptual extractor.
#[derive(Debug, Clone)]
pub struct GanModels<T> {
    pub gen: Generator<T>,
    pub disc: Discriminator<T>,
    pub extractor: RandomConvExtractor<T>,
    pub n_prior: usize,
}

impl<T: Real> GanModels<T> {
    pub fn new(cfg: &PipelineConfig) -> Result<Self> {
        let g = &cfg.gan;
        let in_ch = channel_count(cfg.n_prior, g.dedup_flm);
        Ok(Self {
            gen: Generator::new(
                GeneratorConfig {
                    in_ch,
                    ngf: g.ngf,
                    res_blocks: g.res_blocks,
                },
                cfg.stream_seed("gan.generator"),
            ),
            disc: Discriminator::new(
                DiscriminatorConfig {
                    in_ch: in_ch + 3 * (cfg.n_prior + 1),
                    ndf: g.ndf,
                    scales: g.disc_scales,
                },
                cfg.stream_seed("gan.discriminator"),
            ),
            extractor: RandomConvExtractor::new(
                &g.perceptual_widths,
                &g.perceptual_weights,
                cfg.stream_seed("gan.perceptual"),
            )?,
            n_prior: cfg.n_prior,
        })
    }

    pub fn cast<U: Real>(&self) -> GanModels<U> {
        GanModels {
            gen: self.gen.cast(),
            disc: self.disc.cast(),
            extractor: self.extractor.cast(),
            n_prior: self.n_prior,
        }
    }
}

/// Discriminator input: stack ⊕ prior frames ⊕ current frame along channels.
fn disc_input<T: Real>(g: &mut Graph<T>, stacks: Var, priors: Var, current: Var, n_prior: usize) -> Var {
    if n_prior == 0 {
        g.concat(&[stacks, current], 1)
    } else {
        g.concat(&[stacks, priors, current], 1)
    }
}

/// Graph nodes of the generator objective.
pub struct GeneratorTerms {
    pub fake: Var,
    pub adv: Var,
    pub fm: Var,
    pub perc: Var,
    pub total: Var,
}

/// Generator forward on `batch.stacks`; returns `(stacks, fake)` nodes.
pub fn generator_forward<T: Real>(g: &mut Graph<T>, models: &GanModels<T>, pg: &Bound, batch: &GanBatch<T>) -> (Var, Var) {
    let x = g.constant(batch.stacks.clone());
    let fake = models.gen.forward(g, pg, x);
    (x, fake)
}

/// Adversarial, feature-matching and perceptual terms for an existing fake.
/// The fake window is the ground-truth priors plus the generated frame.
#[allow(clippy::too_many_arguments)]
pub fn generator_objective<T: Real>(
    g: &mut Graph<T>,
    models: &GanModels<T>,
    pd: &Bound,
    stacks: Var,
    fake: Var,
    batch: &GanBatch<T>,
    weights: LossWeights,
    kind: AdversarialLoss,
) -> Result<GeneratorTerms> {
    let priors = g.constant(batch.prior_frames.clone());
    let real = g.constant(batch.real.clone());
    let fake_in = disc_input(g, stacks, priors, fake, models.n_prior);
    let real_in = disc_input(g, stacks, priors, real, models.n_prior);
    let fo = models.disc.forward(g, pd, fake_in);
    let ro = models.disc.forward(g, pd, real_in);
    let fake_logits: Vec<Var> = fo.iter().map(|o| o.logits).collect();
    let adv = g_adv_loss(g, &fake_logits, kind);
    let rf: Vec<Vec<Var>> = ro.iter().map(|o| o.features.to_vec()).collect();
    let ff: Vec<Vec<Var>> = fo.iter().map(|o| o.features.to_vec()).collect();
    let fm = fm_loss_graph(g, &rf, &ff)?;
    let perc = perceptual_loss_graph(g, fake, real, &models.extractor)?;
    let a = g.scale(fm, T::lit(weights.lambda_fm));
    let b = g.scale(perc, T::lit(weights.lambda_vgg));
    let total = g.add(adv, a);
    let total = g.add(total, b);
    Ok(GeneratorTerms {
        fake,
        adv,
        fm,
        perc,
        total,
    })
}

/// Discriminator loss with the fake frames held constant.
pub fn discriminator_objective<T: Real>(
    g: &mut Graph<T>,
    models: &GanModels<T>,
    pd: &Bound,
    batch: &GanBatch<T>,
    fake: &Tensor<T>,
    kind: AdversarialLoss,
) -> Var {
    let stacks = g.constant(batch.stacks.clone());
    let priors = g.constant(batch.prior_frames.clone());
    let real = g.constant(batch.real.clone());
    let fake = g.constant(fake.clone());
    let real_in = disc_input(g, stacks, priors, real, models.n_prior);
    let fake_in = disc_input(g, stacks, priors, fake, models.n_prior);
    let ro = models.disc.forward(g, pd, real_in);
    let fo = models.disc.forward(g, pd, fake_in);
    let r: Vec<Var> = ro.iter().map(|o| o.logits).collect();
    let f: Vec<Var> = fo.iter().map(|o| o.logits).collect();
    d_adv_loss(g, &r, &f, kind)
}

fn scalar<T: Real>(g: &Graph<T>, v: Var) -> f64 {
    g.value(v).item().to_f64().unwrap()
}

/// Generator total loss and its gradient for every generator parameter.
pub fn generator_loss_and_grads<T: Real>(
    models: &GanModels<T>,
    batch: &GanBatch<T>,
    weights: LossWeights,
    kind: AdversarialLoss,
) -> Result<(f64, Vec<Tensor<T>>)> {
    batch.validate(models.gen.config().in_ch)?;
    let mut g = Graph::new();
    let pg = models.gen.params().bind(&mut g, true);
    let pd = models.disc.params().bind(&mut g, false);
    let (x, fake) = generator_forward(&mut g, models, &pg, batch);
    let t = generator_objective(&mut g, models, &pd, x, fake, batch, weights, kind)?;
    let loss = scalar(&g, t.total);
    let mut grads = g.backward(t.total);
    Ok((loss, pg.gradients(models.gen.params(), &mut grads)))
}

/// Discriminator loss and its gradient for every discriminator parameter.
pub fn discriminator_loss_and_grads<T: Real>(
    models: &GanModels<T>,
    batch: &GanBatch<T>,
    kind: AdversarialLoss,
) -> Result<(f64, Vec<Tensor<T>>)> {
    batch.validate(models.gen.config().in_ch)?;
    let fake = models.gen.forward_tensor(&batch.stacks)?;
    let mut g = Graph::new();
    let pd = models.disc.params().bind(&mut g, true);
    let l = discriminator_objective(&mut g, models, &pd, batch, &fake, kind);
    let loss = scalar(&g, l);
    let mut grads = g.backward(l);
    Ok((loss, pd.gradients(models.disc.params(), &mut grads)))
}

/// Every loss component on one batch, without updates.
pub fn combined_losses<T: Real>(
    models: &GanModels<T>,
    batch: &GanBatch<T>,
    weights: LossWeights,
    kind: AdversarialLoss,
) -> Result<GanLossReport> {
    batch.validate(models.gen.config().in_ch)?;
    let mut g = Graph::new();
    let pg = models.gen.params().bind(&mut g, false);
    let pd = models.disc.params().bind(&mut g, false);
    let (x, fake) = generator_forward(&mut g, models, &pg, batch);
    let t = generator_objective(&mut g, models, &pd, x, fake, batch, weights, kind)?;
    let fake_val = g.value(fake).clone();
    let d = discriminator_objective(&mut g, models, &pd, batch, &fake_val, kind);
    Ok(GanLossReport {
        d_loss: scalar(&g, d),
        g_adv: scalar(&g, t.adv),
        g_fm: scalar(&g, t.fm),
        g_perc: scalar(&g, t.perc),
        lambda_fm: weights.lambda_fm,
        lambda_vgg: weights.lambda_vgg,
    })
}

/// Models plus both optimizers; alternates a D update and a G update.
#[derive(Debug, Clone)]
pub struct GanTrainer {
    pub models: GanModels<f32>,
    pub opt_g: Adam<f32>,
    pub opt_d: Adam<f32>,
    pub weights: LossWeights,
    pub kind: AdversarialLoss,
}

impl GanTrainer {
    pub fn new(models: GanModels<f32>, cfg: &PipelineConfig) -> Result<Self> {
        let g = &cfg.gan;
        let opt_g = Adam::new(models.gen.params(), g.lr_g as f32, g.beta1 as f32, g.beta2 as f32);
        let opt_d = Adam::new(models.disc.params(), g.lr_d as f32, g.beta1 as f32, g.beta2 as f32);
        Ok(Self {
            models,
            opt_g,
            opt_d,
            weights: LossWeights::new(cfg.lambda_fm, cfg.lambda_vgg)?,
            kind: g.adversarial,
        })
    }

    /// One D step then one G step against the updated D. Returns the losses
    /// and the generated frames (from before the G update).
    pub fn train_step(&mut self, batch: &GanBatch<f32>) -> Result<(GanLossReport, Tensor<f32>)> {
        batch.validate(self.models.gen.config().in_ch)?;
        let mut ga = Graph::new();
        let pg = self.models.gen.params().bind(&mut ga, true);
        let (x, fake) = generator_forward(&mut ga, &self.models, &pg, batch);
        let fake_val = ga.value(fake).clone();

        let mut gb = Graph::new();
        let pd = self.models.disc.params().bind(&mut gb, true);
        let d = discriminator_objective(&mut gb, &self.models, &pd, batch, &fake_val, self.kind);
        let d_loss = scalar(&gb, d);
        let mut dg = gb.backward(d);
        let d_grads = pd.gradients(self.models.disc.params(), &mut dg);
        drop(gb);
        self.opt_d.update(self.models.disc.params_mut(), &d_grads);

        let pd = self.models.disc.params().bind(&mut ga, false);
        let t = generator_objective(&mut ga, &self.models, &pd, x, fake, batch, self.weights, self.kind)?;
        let report = GanLossReport {
            d_loss,
            g_adv: scalar(&ga, t.adv),
            g_fm: scalar(&ga, t.fm),
            g_perc: scalar(&ga, t.perc),
            lambda_fm: self.weights.lambda_fm,
            lambda_vgg: self.weights.lambda_vgg,
        };
        if report.entries().iter().any(|(_, v)| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite GAN loss: {report:?}")));
        }
        let mut gg = ga.backward(t.total);
        let g_grads = pg.gradients(self.models.gen.params(), &mut gg);
        self.opt_g.update(self.models.gen.params_mut(), &g_grads);
        Ok((report, fake_val))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use anchorpipe_tensor::gradcheck::check_params;

    pub(crate) fn tiny_config(n_prior: usize) -> PipelineConfig {
        let mut cfg = PipelineConfig {
            n_prior,
            image_h: 8,
            image_w: 8,
            ..PipelineConfig::default()
        };
        cfg.gan.ngf = 2;
        cfg.gan.ndf = 2;
        cfg.gan.res_blocks = 1;
        cfg.gan.perceptual_widths = vec![2, 3];
        cfg.gan.perceptual_weights = vec![1.0, 0.5];
        cfg
    }

    pub(crate) fn tiny_batch(cfg: &PipelineConfig, b: usize, salt: f64) -> GanBatch<f64> {
        let c = channel_count(cfg.n_prior, cfg.gan.dedup_flm);
        let (h, w) = (cfg.image_h, cfg.image_w);
        let wave = |i: usize, k: f64| (i as f64 * k + salt).sin() * 0.9;
        GanBatch {
            stacks: Tensor::from_fn(&[b, c, h, w], |i| wave(i, 0.37).abs()),
            prior_frames: Tensor::from_fn(&[b, 3 * cfg.n_prior, h, w], |i| wave(i, 0.53)),
            real: Tensor::from_fn(&[b, 3, h, w], |i| wave(i, 0.71)),
        }
    }

    #[test]
    fn discriminator_sees_76_channels_with_two_priors() {
        let cfg = PipelineConfig::default();
        let m = GanModels::<f32>::new(&cfg).unwrap();
        assert_eq!(m.gen.config().in_ch, 67);
        assert_eq!(m.disc.config().in_ch, 76);
        assert_eq!(m.disc.config().scales, 2);
    }

    #[test]
    fn generator_objective_gradients() {
        for n in [0, 2] {
            let cfg = tiny_config(n);
            let models = GanModels::<f64>::new(&cfg).unwrap();
            let batch = tiny_batch(&cfg, 2, n as f64);
            let w = LossWeights::new(10.0, 10.0).unwrap();
            let (_, grads) = generator_loss_and_grads(&models, &batch, w, AdversarialLoss::Vanilla).unwrap();
            let mut probe = models.clone();
            let rep = check_params(models.gen.params(), &grads, 1e-5, Some(10), |ps| {
                probe.gen.params_mut().assign_from(ps).unwrap();
                combined_losses(&probe, &batch, w, AdversarialLoss::Vanilla).unwrap().g_total()
            });
            assert!(rep.passes(1e-4), "n={n}: {rep:?}");
        }
    }

    #[test]
    fn discriminator_objective_gradients() {
        let cfg = tiny_config(2);
        let models = GanModels::<f64>::new(&cfg).unwrap();
        let batch = tiny_batch(&cfg, 2, 0.4);
        for kind in [AdversarialLoss::Vanilla, AdversarialLoss::Lsgan] {
            let (_, grads) = discriminator_loss_and_grads(&models, &batch, kind).unwrap();
            let mut probe = models.clone();
            let rep = check_params(models.disc.params(), &grads, 1e-5, Some(10), |ps| {
                probe.disc.params_mut().assign_from(ps).unwrap();
                discriminator_loss_and_grads(&probe, &batch, kind).unwrap().0
            });
            assert!(rep.passes(1e-4), "{kind:?}: {rep:?}");
        }
    }

    #[test]
    fn g_total_is_linear_in_weights() {
        let cfg = tiny_config(1);
        let models = GanModels::<f64>::new(&cfg).unwrap();
        let batch = tiny_batch(&cfg, 1, 0.0);
        let at = |a: f64, b: f64| {
            combined_losses(&models, &batch, LossWeights::new(a, b).unwrap(), AdversarialLoss::Vanilla).unwrap()
        };
        let zero = at(0.0, 0.0);
        assert_eq!(zero.g_total(), zero.g_adv);
        let r1 = at(1.0, 3.0);
        let r2 = at(4.0, 3.0);
        assert!(((r2.g_total() - r1.g_total()) / 3.0 - r1.g_fm).abs() < 1e-12);
        let r3 = at(1.0, 7.0);
        assert!(((r3.g_total() - r1.g_total()) / 4.0 - r1.g_perc).abs() < 1e-12);
        assert_eq!(r1.entries().map(|e| e.0), ["d_loss", "g_adv", "g_fm", "g_perc"]);
    }

    #[test]
    fn adversarial_term_matches_offline_recomputation() {
        let cfg = tiny_config(2);
        let models = GanModels::<f64>::new(&cfg).unwrap();
        let batch = tiny_batch(&cfg, 1, 0.9);
        let rep = combined_losses(&models, &batch, LossWeights::new(0.0, 0.0).unwrap(), AdversarialLoss::Vanilla).unwrap();
        let fake = models.gen.forward_tensor(&batch.stacks).unwrap();
        let stack = batch.stacks.index_outer(0);
        let priors = batch.prior_frames.index_outer(0);
        let p0 = priors.narrow(0, 0, 3);
        let p1 = priors.narrow(0, 3, 3);
        let f = fake.index_outer(0);
        let r = batch.real.index_outer(0);
        let fo = models.disc.discriminate(&stack, &[&p0, &p1, &f], 2).unwrap();
        let ro = models.disc.discriminate(&stack, &[&p0, &p1, &r], 2).unwrap();
        let fl: Vec<Tensor<f64>> = fo.iter().map(|s| s.logits.clone()).collect();
        let rl: Vec<Tensor<f64>> = ro.iter().map(|s| s.logits.clone()).collect();
        let (d, g) = gan_loss(&rl, &fl, AdversarialLoss::Vanilla).unwrap();
        assert!((rep.g_adv - g).abs() < 1e-12);
        assert!((rep.d_loss - d).abs() < 1e-12);
    }

    #[test]
    fn discriminator_step_descends() {
        // Directional derivative along −∇ is negative, and a tiny step lowers
        // the loss.
        let cfg = tiny_config(2);
        let models = GanModels::<f64>::new(&cfg).unwrap();
        let batch = tiny_batch(&cfg, 2, 0.1);
        let (l0, grads) = discriminator_loss_and_grads(&models, &batch, AdversarialLoss::Vanilla).unwrap();
        let sq: f64 = grads.iter().flat_map(|t| t.data()).map(|v| v * v).sum();
        assert!(sq > 0.0);
        let mut moved = models.clone();
        for (t, gr) in moved.disc.params_mut().tensors_mut().iter_mut().zip(&grads) {
            *t = t.zip_map(gr, |a, b| a - 1e-4 * b);
        }
        let (l1, _) = discriminator_loss_and_grads(&moved, &batch, AdversarialLoss::Vanilla).unwrap();
        assert!(l1 < l0);
    }

    #[test]
    fn trainer_is_deterministic_and_reduces_perceptual_term() {
        let mut cfg = tiny_config(1);
        cfg.gan.lr_g = 2e-3;
        cfg.gan.lr_d = 2e-3;
        let batch = tiny_batch(&cfg, 2, 0.3).cast::<f32>();
        let run = || {
            let mut t = GanTrainer::new(GanModels::new(&cfg).unwrap(), &cfg).unwrap();
            let reps: Vec<GanLossReport> = (0..40).map(|_| t.train_step(&batch).unwrap().0).collect();
            (reps, t.models.gen.params().tensors().to_vec())
        };
        let (a, pa) = run();
        let (b, pb) = run();
        assert_eq!(a, b);
        assert_eq!(pa, pb);
        assert!(a.last().unwrap().g_perc < a[0].g_perc);
    }
}
