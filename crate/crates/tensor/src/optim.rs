use crate::{ParamSet, Real, Tensor};

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &ParamSet<T>, lr: T, beta1: T, beta2: T) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            lr,
            beta1,
            beta2,
            eps: T::lit(1e-8),
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn with_defaults(params: &ParamSet<T>, lr: T) -> Self {
        Self::new(params, lr, T::lit(0.9), T::lit(0.999))
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor<T>], &[Tensor<T>]) {
        (&self.m, &self.v)
    }

    /// Restore optimizer state saved from an identically shaped parameter set.
    pub fn restore(&mut self, step: u64, m: Vec<Tensor<T>>, v: Vec<Tensor<T>>) -> Result<(), String> {
        if m.len() != self.m.len() || v.len() != self.v.len() {
            return Err("moment count mismatch".into());
        }
        for ((a, b), (c, d)) in self.m.iter().zip(&m).zip(self.v.iter().zip(&v)) {
            if a.shape() != b.shape() || c.shape() != d.shape() {
                return Err("moment shape mismatch".into());
            }
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }

    pub fn update(&mut self, params: &mut ParamSet<T>, grads: &[Tensor<T>]) {
        assert_eq!(grads.len(), params.len(), "one gradient per parameter");
        self.step += 1;
        let t = self.step as i32;
        let bc1 = T::one() - self.beta1.powi(t);
        let bc2 = T::one() - self.beta2.powi(t);
        let step_size = self.lr / bc1;
        let (b1, b2) = (self.beta1, self.beta2);
        for (((p, g), m), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            assert_eq!(p.shape(), g.shape(), "gradient shape mismatch");
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                *pi -= step_size * *mi / ((*vi / bc2).sqrt() + self.eps);
            }
        }
    }
}

/// Rescale gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut [Tensor<T>], max_norm: T) -> T {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|&x| x * x)
        .sum::<T>()
        .sqrt();
    if norm > max_norm && norm > T::zero() {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}
