use anchorpipe_tensor::{Bound, Graph, ParamId, ParamSet, Real, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cond::ConditioningStack;
use crate::domain::FrameImage;
use crate::error::{Error, Result};
use crate::seq2au::uniform;

pub(crate) const SLOPE: f64 = 0.2;

/// 2-D convolution layer with bias.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Conv {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

impl Conv {
    pub(crate) fn register<T: Real>(
        ps: &mut ParamSet<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
    ) -> Self {
        let bound = 1.0 / ((cin * k * k) as f64).sqrt();
        Self {
            w: ps.add(format!("{name}.w"), uniform(rng, &[cout, cin, k, k], bound)),
            b: ps.add(format!("{name}.b"), Tensor::zeros(&[cout])),
            stride,
            pad: k / 2,
        }
    }

    pub(crate) fn apply<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        g.conv2d(x, p[self.w], Some(p[self.b]), self.stride, self.pad)
    }
}

fn lrelu<T: Real>(g: &mut Graph<T>, x: Var) -> Var {
    g.leaky_relu(x, T::lit(SLOPE))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GeneratorConfig {
    pub in_ch: usize,
    pub ngf: usize,
    pub res_blocks: usize,
}

/// Encoder (two stride-2 convs), residual blocks at quarter resolution,
/// nearest-upsample decoder and a tanh RGB head.
#[derive(Debug, Clone)]
pub struct Generator<T> {
    cfg: GeneratorConfig,
    params: ParamSet<T>,
    conv_in: Conv,
    down: [Conv; 2],
    res: Vec<(Conv, Conv)>,
    up: [Conv; 2],
    conv_out: Conv,
}

impl<T: Real> Generator<T> {
    pub fn new(cfg: GeneratorConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let f = cfg.ngf;
        let conv_in = Conv::register(&mut ps, &mut rng, "g.in", cfg.in_ch, f, 3, 1);
        let down = [
            Conv::register(&mut ps, &mut rng, "g.down0", f, 2 * f, 3, 2),
            Conv::register(&mut ps, &mut rng, "g.down1", 2 * f, 4 * f, 3, 2),
        ];
        let res = (0..cfg.res_blocks)
            .map(|i| {
                (
                    Conv::register(&mut ps, &mut rng, &format!("g.res{i}.a"), 4 * f, 4 * f, 3, 1),
                    Conv::register(&mut ps, &mut rng, &format!("g.res{i}.b"), 4 * f, 4 * f, 3, 1),
                )
            })
            .collect();
        let up = [
            Conv::register(&mut ps, &mut rng, "g.up0", 4 * f, 2 * f, 3, 1),
            Conv::register(&mut ps, &mut rng, "g.up1", 2 * f, f, 3, 1),
        ];
        let conv_out = Conv::register(&mut ps, &mut rng, "g.out", f, 3, 3, 1);
        Self {
            cfg,
            params: ps,
            conv_in,
            down,
            res,
            up,
            conv_out,
        }
    }

    pub fn config(&self) -> GeneratorConfig {
        self.cfg
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn cast<U: Real>(&self) -> Generator<U> {
        Generator {
            cfg: self.cfg,
            params: self.params.cast(),
            conv_in: self.conv_in,
            down: self.down,
            res: self.res.clone(),
            up: self.up,
            conv_out: self.conv_out,
        }
    }

    /// `[B, C, H, W]` → `[B, 3, H, W]`.
    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        let mut h = self.conv_in.apply(g, p, x);
        h = lrelu(g, h);
        for c in &self.down {
            h = c.apply(g, p, h);
            h = lrelu(g, h);
        }
        for (a, b) in &self.res {
            let r = a.apply(g, p, h);
            let r = lrelu(g, r);
            let r = b.apply(g, p, r);
            h = g.add(h, r);
        }
        for c in &self.up {
            h = g.upsample2(h);
            h = c.apply(g, p, h);
            h = lrelu(g, h);
        }
        let out = self.conv_out.apply(g, p, h);
        g.tanh(out)
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1] != self.cfg.in_ch {
            return Err(Error::Shape(format!(
                "generator expects {} input channels, got shape {shape:?}",
                self.cfg.in_ch
            )));
        }
        if !shape[2].is_multiple_of(4) || !shape[3].is_multiple_of(4) {
            return Err(Error::Shape(format!("image size {}x{} is not a multiple of 4", shape[2], shape[3])));
        }
        Ok(())
    }

    /// Batched inference on `[B, C, H, W]`.
    pub fn forward_tensor(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x.shape())?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let y = self.forward(&mut g, &p, xv);
        Ok(g.value(y).clone())
    }
}

impl Generator<f32> {
    pub fn generate(&self, stack: &ConditioningStack) -> Result<FrameImage> {
        let c = stack.channels();
        let (h, w) = (c.shape()[1], c.shape()[2]);
        let x = c.clone().reshape(&[1, c.shape()[0], h, w]);
        let y = self.forward_tensor(&x)?;
        FrameImage::new(h, w, y.into_data())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DiscriminatorConfig {
    pub in_ch: usize,
    pub ndf: usize,
    pub scales: usize,
}

/// Patch discriminators at full and successively 2×-pooled resolution. Each
/// scale: three stride-2 convs (their activations are the feature pyramid)
/// and a stride-1 conv to one logit channel.
#[derive(Debug, Clone)]
pub struct Discriminator<T> {
    cfg: DiscriminatorConfig,
    params: ParamSet<T>,
    scales: Vec<[Conv; 4]>,
}

/// One scale's output.
#[derive(Debug, Clone, Copy)]
pub struct ScaleOutput {
    pub logits: Var,
    pub features: [Var; 3],
}

/// Concrete per-scale output.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleTensors<T> {
    pub logits: Tensor<T>,
    pub features: Vec<Tensor<T>>,
}

impl<T: Real> Discriminator<T> {
    pub fn new(cfg: DiscriminatorConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let f = cfg.ndf;
        let scales = (0..cfg.scales)
            .map(|s| {
                [
                    Conv::register(&mut ps, &mut rng, &format!("d{s}.c0"), cfg.in_ch, f, 3, 2),
                    Conv::register(&mut ps, &mut rng, &format!("d{s}.c1"), f, 2 * f, 3, 2),
                    Conv::register(&mut ps, &mut rng, &format!("d{s}.c2"), 2 * f, 4 * f, 3, 2),
                    Conv::register(&mut ps, &mut rng, &format!("d{s}.out"), 4 * f, 1, 3, 1),
                ]
            })
            .collect();
        Self { cfg, params: ps, scales }
    }

    pub fn config(&self) -> DiscriminatorConfig {
        self.cfg
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn cast<U: Real>(&self) -> Discriminator<U> {
        Discriminator {
            cfg: self.cfg,
            params: self.params.cast(),
            scales: self.scales.clone(),
        }
    }

    /// `x` is the stack concatenated with the frame window along channels.
    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Vec<ScaleOutput> {
        let mut input = x;
        let mut out = Vec::with_capacity(self.scales.len());
        for (s, convs) in self.scales.iter().enumerate() {
            if s > 0 {
                input = g.avg_pool2(input);
            }
            let mut h = input;
            let mut feats = [h; 3];
            for (i, c) in convs[..3].iter().enumerate() {
                h = c.apply(g, p, h);
                h = lrelu(g, h);
                feats[i] = h;
            }
            let logits = convs[3].apply(g, p, h);
            out.push(ScaleOutput { logits, features: feats });
        }
        out
    }

    /// Scores a stack together with an `n_prior + 1` frame window (oldest
    /// first, current last).
    pub fn discriminate(&self, stack: &Tensor<T>, window: &[&Tensor<T>], n_prior: usize) -> Result<Vec<ScaleTensors<T>>> {
        if window.len() != n_prior + 1 {
            return Err(Error::Shape(format!(
                "frame window holds {} frames, expected {}",
                window.len(),
                n_prior + 1
            )));
        }
        let mut parts = vec![stack];
        parts.extend_from_slice(window);
        let x = Tensor::concat(&parts, 0);
        if x.shape()[0] != self.cfg.in_ch {
            return Err(Error::Shape(format!(
                "discriminator expects {} channels, got {}",
                self.cfg.in_ch,
                x.shape()[0]
            )));
        }
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let xv = g.constant(x.reshape(&[1, c, h, w]));
        let outs = self.forward(&mut g, &p, xv);
        Ok(outs
            .iter()
            .map(|o| ScaleTensors {
                logits: g.value(o.logits).clone(),
                features: o.features.iter().map(|&f| g.value(f).clone()).collect(),
            })
            .collect())
    }
}
