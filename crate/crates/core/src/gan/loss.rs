use anchorpipe_tensor::{softplus, Graph, Real, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::AdversarialLoss;
use crate::domain::FrameImage;
use crate::error::{Error, Result};
use crate::seq2au::{sum_vars, uniform};

use super::nets::SLOPE;

/// Discriminator adversarial loss, summed over scales. Vanilla form:
/// `mean softplus(−real) + mean softplus(fake)`.
pub fn d_adv_loss<T: Real>(g: &mut Graph<T>, real: &[Var], fake: &[Var], kind: AdversarialLoss) -> Var {
    let terms: Vec<Var> = real
        .iter()
        .zip(fake)
        .map(|(&r, &f)| match kind {
            AdversarialLoss::Vanilla => {
                let nr = g.scale(r, -T::one());
                let a = g.softplus(nr);
                let a = g.mean(a);
                let b = g.softplus(f);
                let b = g.mean(b);
                g.add(a, b)
            }
            AdversarialLoss::Lsgan => {
                let r1 = g.add_scalar(r, -T::one());
                let a = g.square(r1);
                let a = g.mean(a);
                let b = g.square(f);
                let b = g.mean(b);
                g.add(a, b)
            }
        })
        .collect();
    sum_vars(g, &terms)
}

/// Non-saturating generator loss `mean softplus(−fake)`, summed over scales.
pub fn g_adv_loss<T: Real>(g: &mut Graph<T>, fake: &[Var], kind: AdversarialLoss) -> Var {
    let terms: Vec<Var> = fake
        .iter()
        .map(|&f| match kind {
            AdversarialLoss::Vanilla => {
                let nf = g.scale(f, -T::one());
                let a = g.softplus(nf);
                g.mean(a)
            }
            AdversarialLoss::Lsgan => {
                let f1 = g.add_scalar(f, -T::one());
                let a = g.square(f1);
                g.mean(a)
            }
        })
        .collect();
    sum_vars(g, &terms)
}

/// `(d_loss, g_loss)` from concrete per-scale logits.
pub fn gan_loss<T: Real>(real: &[Tensor<T>], fake: &[Tensor<T>], kind: AdversarialLoss) -> Result<(f64, f64)> {
    if real.len() != fake.len() || real.is_empty() {
        return Err(Error::Shape(format!("{} real vs {} fake scales", real.len(), fake.len())));
    }
    if real.iter().chain(fake).any(|t| !t.all_finite()) {
        return Err(Error::InvalidInput("non-finite discriminator logits".into()));
    }
    let mean = |t: &Tensor<T>, f: &dyn Fn(f64) -> f64| {
        t.data().iter().map(|v| f(v.to_f64().unwrap())).sum::<f64>() / t.numel() as f64
    };
    let sp = |x: f64| softplus(x);
    let (mut d, mut g) = (0.0, 0.0);
    for (r, f) in real.iter().zip(fake) {
        match kind {
            AdversarialLoss::Vanilla => {
                d += mean(r, &|x| sp(-x)) + mean(f, &sp);
                g += mean(f, &|x| sp(-x));
            }
            AdversarialLoss::Lsgan => {
                d += mean(r, &|x| (x - 1.0).powi(2)) + mean(f, &|x| x * x);
                g += mean(f, &|x| (x - 1.0).powi(2));
            }
        }
    }
    Ok((d, g))
}

fn check_pyramids(real: &[Vec<[usize; 4]>], fake: &[Vec<[usize; 4]>]) -> Result<()> {
    if real != fake {
        return Err(Error::Shape(format!("feature pyramids differ: {real:?} vs {fake:?}")));
    }
    if real.iter().all(Vec::is_empty) {
        return Err(Error::EmptyInput("empty feature pyramid".into()));
    }
    Ok(())
}

fn shape4(s: &[usize]) -> [usize; 4] {
    let mut out = [1; 4];
    let off = 4 - s.len().min(4);
    out[off..].copy_from_slice(&s[s.len().saturating_sub(4)..]);
    out
}

/// Mean absolute feature difference, averaged over every (scale, layer).
/// Real features are detached.
pub fn fm_loss_graph<T: Real>(g: &mut Graph<T>, real: &[Vec<Var>], fake: &[Vec<Var>]) -> Result<Var> {
    let shapes = |p: &[Vec<Var>], g: &Graph<T>| -> Vec<Vec<[usize; 4]>> {
        p.iter().map(|l| l.iter().map(|&v| shape4(g.shape(v))).collect()).collect()
    };
    check_pyramids(&shapes(real, g), &shapes(fake, g))?;
    let mut terms = Vec::new();
    for (rs, fs) in real.iter().zip(fake) {
        for (&r, &f) in rs.iter().zip(fs) {
            let r = g.detach(r);
            let d = g.sub(f, r);
            let a = g.abs(d);
            terms.push(g.mean(a));
        }
    }
    let total = sum_vars(g, &terms);
    Ok(g.scale(total, T::lit(1.0 / terms.len() as f64)))
}

/// [`fm_loss_graph`] on concrete tensors.
pub fn fm_loss<T: Real>(real: &[Vec<Tensor<T>>], fake: &[Vec<Tensor<T>>]) -> Result<f64> {
    let mut g = Graph::new();
    let to_vars = |p: &[Vec<Tensor<T>>], g: &mut Graph<T>| -> Vec<Vec<Var>> {
        p.iter().map(|l| l.iter().map(|t| g.constant(t.clone())).collect()).collect()
    };
    let r = to_vars(real, &mut g);
    let f = to_vars(fake, &mut g);
    let l = fm_loss_graph(&mut g, &r, &f)?;
    Ok(g.value(l).item().to_f64().unwrap())
}

/// Frozen feature map for the perceptual term.
pub trait FeatureExtractor<T: Real> {
    /// Features of `x` (`[B, 3, H, W]`), shallow to deep.
    fn features(&self, g: &mut Graph<T>, x: Var) -> Vec<Var>;
    /// One nonnegative weight per returned layer.
    fn layer_weights(&self) -> &[f64];
}

/// Seeded fixed-weight conv pyramid: a 3×3 stride-1 conv followed by
/// stride-2 convs, each with leaky ReLU.
#[derive(Debug, Clone)]
pub struct RandomConvExtractor<T> {
    kernels: Vec<Tensor<T>>,
    weights: Vec<f64>,
}

impl<T: Real> RandomConvExtractor<T> {
    pub fn new(widths: &[usize], weights: &[f64], seed: u64) -> Result<Self> {
        if widths.is_empty() || widths.len() != weights.len() {
            return Err(Error::Config("perceptual widths and weights must be nonempty and equally long".into()));
        }
        if weights.iter().any(|w| *w < 0.0 || !w.is_finite()) {
            return Err(Error::Config("perceptual weights must be nonnegative".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = 3;
        let kernels = widths
            .iter()
            .map(|&w| {
                // Unit-variance-preserving scale for leaky ReLU stacks.
                let bound = (6.0 / (cin * 9) as f64).sqrt();
                let k = uniform(&mut rng, &[w, cin, 3, 3], bound);
                cin = w;
                k
            })
            .collect();
        Ok(Self {
            kernels,
            weights: weights.to_vec(),
        })
    }

    pub fn cast<U: Real>(&self) -> RandomConvExtractor<U> {
        RandomConvExtractor {
            kernels: self.kernels.iter().map(Tensor::cast).collect(),
            weights: self.weights.clone(),
        }
    }
}

impl<T: Real> FeatureExtractor<T> for RandomConvExtractor<T> {
    fn features(&self, g: &mut Graph<T>, x: Var) -> Vec<Var> {
        let mut h = x;
        self.kernels
            .iter()
            .enumerate()
            .map(|(i, k)| {
                let kv = g.constant(k.clone());
                let stride = if i == 0 { 1 } else { 2 };
                h = g.conv2d(h, kv, None, stride, 1);
                h = g.leaky_relu(h, T::lit(SLOPE));
                h
            })
            .collect()
    }

    fn layer_weights(&self) -> &[f64] {
        &self.weights
    }
}

/// The raw image as the only feature layer.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityExtractor;

impl<T: Real> FeatureExtractor<T> for IdentityExtractor {
    fn features(&self, _g: &mut Graph<T>, x: Var) -> Vec<Var> {
        vec![x]
    }

    fn layer_weights(&self) -> &[f64] {
        &[1.0]
    }
}

/// `Σ_l w_l · mean|φ_l(fake) − φ_l(real)|`; `real` is treated as a constant.
pub fn perceptual_loss_graph<T: Real>(
    g: &mut Graph<T>,
    fake: Var,
    real: Var,
    extractor: &dyn FeatureExtractor<T>,
) -> Result<Var> {
    if g.shape(fake) != g.shape(real) {
        return Err(Error::Shape(format!(
            "perceptual inputs {:?} vs {:?}",
            g.shape(fake),
            g.shape(real)
        )));
    }
    let real = g.detach(real);
    let ff = extractor.features(g, fake);
    let fr = extractor.features(g, real);
    let terms: Vec<Var> = ff
        .iter()
        .zip(&fr)
        .zip(extractor.layer_weights())
        .map(|((&a, &b), &w)| {
            let d = g.sub(a, b);
            let d = g.abs(d);
            let m = g.mean(d);
            g.scale(m, T::lit(w))
        })
        .collect();
    Ok(sum_vars(g, &terms))
}

/// [`perceptual_loss_graph`] on two frames.
pub fn perceptual_loss(fake: &FrameImage, real: &FrameImage, extractor: &dyn FeatureExtractor<f32>) -> Result<f64> {
    if (fake.height(), fake.width()) != (real.height(), real.width()) {
        return Err(Error::Shape(format!(
            "frames are {}x{} and {}x{}",
            fake.height(),
            fake.width(),
            real.height(),
            real.width()
        )));
    }
    let shape = [1, 3, fake.height(), fake.width()];
    let mut g = Graph::new();
    let a = g.constant(Tensor::new(&shape, fake.pixels().to_vec()));
    let b = g.constant(Tensor::new(&shape, real.pixels().to_vec()));
    let l = perceptual_loss_graph(&mut g, a, b, extractor)?;
    Ok(g.value(l).item() as f64)
}

/// λ1 (feature matching) and λ2 (perceptual) weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_fm: f64,
    pub lambda_vgg: f64,
}

impl LossWeights {
    pub fn new(lambda_fm: f64, lambda_vgg: f64) -> Result<Self> {
        if !(lambda_fm >= 0.0 && lambda_vgg >= 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be nonnegative (lambda_fm={lambda_fm}, lambda_vgg={lambda_vgg})"
            )));
        }
        Ok(Self { lambda_fm, lambda_vgg })
    }
}

/// Per-batch loss components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GanLossReport {
    pub d_loss: f64,
    pub g_adv: f64,
    pub g_fm: f64,
    pub g_perc: f64,
    pub lambda_fm: f64,
    pub lambda_vgg: f64,
}

impl GanLossReport {
    pub fn g_total(&self) -> f64 {
        self.g_adv + self.lambda_fm * self.g_fm + self.lambda_vgg * self.g_perc
    }

    pub fn d_total(&self) -> f64 {
        self.d_loss
    }

    /// Fixed-order `(name, value)` pairs for logging.
    pub fn entries(&self) -> [(&'static str, f64); 4] {
        [
            ("d_loss", self.d_loss),
            ("g_adv", self.g_adv),
            ("g_fm", self.g_fm),
            ("g_perc", self.g_perc),
        ]
    }
}
