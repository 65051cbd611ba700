//! Tape-based reverse-mode autodiff.
//!
//! A [`Graph`] records every operation eagerly: values are computed when the
//! op is added, and [`Graph::backward`] walks the tape in reverse. Nodes that
//! do not depend on any gradient-requiring leaf are never differentiated.

use crate::conv::{self, ConvGeom};
use crate::real::gemm;
use crate::tensor::numel;
use crate::{Real, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    /// `x · wᵀ + b` with `x: [B, I]`, `w: [O, I]`, `b: [O]`.
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    LeakyRelu(Var, T),
    Softplus(Var),
    Abs(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    AvgPool2(Var),
    Upsample2(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Constant copy of `v`'s current value; gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).map(|x| x + s);
        let rg = self.rg(a);
        self.push(value, Op::AddScalar(a), rg)
    }

    /// Fully connected layer: `x · wᵀ + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 2, "linear input must be [B, I], got {xs:?}");
        assert_eq!(ws.len(), 2, "linear weight must be [O, I], got {ws:?}");
        assert_eq!(xs[1], ws[1], "linear: input width {} vs weight {ws:?}", xs[1]);
        let (bsz, inp, out) = (xs[0], xs[1], ws[0]);
        let mut y = vec![T::zero(); bsz * out];
        if let Some(b) = b {
            let bv = self.value(b).data();
            assert_eq!(bv.len(), out, "linear bias length");
            for row in y.chunks_mut(out) {
                row.copy_from_slice(bv);
            }
        }
        gemm(
            bsz,
            inp,
            out,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            &mut y,
            b.is_some(),
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(Tensor::new(&[bsz, out], y), Op::Linear { x, w, b }, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(value, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.tanh());
        let rg = self.rg(a);
        self.push(value, Op::Tanh(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(T::zero()));
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let value = self
            .value(a)
            .map(|x| if x > T::zero() { x } else { x * slope });
        let rg = self.rg(a);
        self.push(value, Op::LeakyRelu(a, slope), rg)
    }

    /// `ln(1 + eˣ)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).map(softplus);
        let rg = self.rg(a);
        self.push(value, Op::Softplus(a), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.abs());
        let rg = self.rg(a);
        self.push(value, Op::Abs(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * x);
        let rg = self.rg(a);
        self.push(value, Op::Square(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).mean());
        let rg = self.rg(a);
        self.push(value, Op::Mean(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let value = self.value(a).clone().reshape(shape);
        let rg = self.rg(a);
        self.push(value, Op::Reshape(a), rg)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        let refs: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::concat(&refs, axis);
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        )
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let value = self.value(x).narrow(axis, start, len);
        let rg = self.rg(x);
        self.push(value, Op::Narrow { x, axis, start }, rg)
    }

    /// 2-D convolution over NCHW input with a `[O, C, k, k]` kernel.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 4, "conv2d input must be NCHW, got {xs:?}");
        assert_eq!(ws.len(), 4, "conv2d weight must be OCkk, got {ws:?}");
        assert_eq!(xs[1], ws[1], "conv2d: input has {} channels, kernel expects {}", xs[1], ws[1]);
        assert_eq!(ws[2], ws[3], "conv2d: square kernels only");
        assert!(xs[2] + 2 * pad >= ws[2] && xs[3] + 2 * pad >= ws[3], "conv2d: input smaller than kernel");
        let geom = ConvGeom {
            batch: xs[0],
            in_ch: xs[1],
            in_h: xs[2],
            in_w: xs[3],
            out_ch: ws[0],
            kernel: ws[2],
            stride,
            pad,
        };
        let (out, cols) = conv::conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let shape = [geom.batch, geom.out_ch, geom.out_h(), geom.out_w()];
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        // Patches are only needed for the weight gradient.
        let cols = if self.rg(w) { cols } else { Vec::new() };
        self.push(Tensor::new(&shape, out), Op::Conv2d { x, w, b, geom, cols }, rg)
    }

    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 4, "avg_pool2 expects NCHW");
        let out = conv::avg_pool2(s[0] * s[1], s[2], s[3], self.value(x).data());
        let rg = self.rg(x);
        self.push(Tensor::new(&[s[0], s[1], s[2] / 2, s[3] / 2], out), Op::AvgPool2(x), rg)
    }

    pub fn upsample2(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 4, "upsample2 expects NCHW");
        let out = conv::upsample2(s[0] * s[1], s[2], s[3], self.value(x).data());
        let rg = self.rg(x);
        self.push(Tensor::new(&[s[0], s[1], s[2] * 2, s[3] * 2], out), Op::Upsample2(x), rg)
    }

    /// Reverse pass from a single-element `root`.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        assert_eq!(self.value(root).numel(), 1, "backward root must be a scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(root) {
            return Gradients { grads };
        }
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), T::one()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            // Keep gradients of intermediate nodes readable for inspection.
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn backward_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match &node.op {
            Op::Leaf => {}
            &Op::Add(a, b) => {
                if self.rg(a) {
                    accumulate(grads, a, g.clone());
                }
                if self.rg(b) {
                    accumulate(grads, b, g.clone());
                }
            }
            &Op::Sub(a, b) => {
                if self.rg(a) {
                    accumulate(grads, a, g.clone());
                }
                if self.rg(b) {
                    accumulate(grads, b, g.map(|x| -x));
                }
            }
            &Op::Mul(a, b) => {
                if self.rg(a) {
                    accumulate(grads, a, g.zip_map(self.value(b), |x, y| x * y));
                }
                if self.rg(b) {
                    accumulate(grads, b, g.zip_map(self.value(a), |x, y| x * y));
                }
            }
            &Op::Scale(a, s) => accumulate(grads, a, g.map(|x| x * s)),
            &Op::AddScalar(a) => accumulate(grads, a, g.clone()),
            &Op::Linear { x, w, b } => {
                let xv = self.value(x);
                let wv = self.value(w);
                let (bsz, inp) = (xv.shape()[0], xv.shape()[1]);
                let out = wv.shape()[0];
                if self.rg(x) {
                    let mut dx = vec![T::zero(); bsz * inp];
                    gemm(bsz, out, inp, g.data(), false, wv.data(), false, &mut dx, false);
                    accumulate(grads, x, Tensor::new(&[bsz, inp], dx));
                }
                if self.rg(w) {
                    let mut dw = vec![T::zero(); out * inp];
                    gemm(out, bsz, inp, g.data(), true, xv.data(), false, &mut dw, false);
                    accumulate(grads, w, Tensor::new(&[out, inp], dw));
                }
                if let Some(b) = b.filter(|&b| self.rg(b)) {
                    let mut db = vec![T::zero(); out];
                    for row in g.data().chunks(out) {
                        for (d, &r) in db.iter_mut().zip(row) {
                            *d += r;
                        }
                    }
                    accumulate(grads, b, Tensor::new(&[out], db));
                }
            }
            &Op::Sigmoid(a) => {
                let d = g.zip_map(&node.value, |gi, s| gi * s * (T::one() - s));
                accumulate(grads, a, d);
            }
            &Op::Tanh(a) => {
                let d = g.zip_map(&node.value, |gi, t| gi * (T::one() - t * t));
                accumulate(grads, a, d);
            }
            &Op::Relu(a) => {
                let d = g.zip_map(self.value(a), |gi, x| if x > T::zero() { gi } else { T::zero() });
                accumulate(grads, a, d);
            }
            &Op::LeakyRelu(a, slope) => {
                let d = g.zip_map(self.value(a), |gi, x| if x > T::zero() { gi } else { gi * slope });
                accumulate(grads, a, d);
            }
            &Op::Softplus(a) => {
                let d = g.zip_map(self.value(a), |gi, x| gi * sigmoid(x));
                accumulate(grads, a, d);
            }
            &Op::Abs(a) => {
                let d = g.zip_map(self.value(a), |gi, x| {
                    if x > T::zero() {
                        gi
                    } else if x < T::zero() {
                        -gi
                    } else {
                        T::zero()
                    }
                });
                accumulate(grads, a, d);
            }
            &Op::Square(a) => {
                let two = T::lit(2.0);
                let d = g.zip_map(self.value(a), |gi, x| gi * two * x);
                accumulate(grads, a, d);
            }
            &Op::Sum(a) => {
                let gv = g.item();
                accumulate(grads, a, Tensor::full(self.shape(a), gv));
            }
            &Op::Mean(a) => {
                let n = T::from_usize(self.value(a).numel().max(1)).unwrap();
                let gv = g.item() / n;
                accumulate(grads, a, Tensor::full(self.shape(a), gv));
            }
            &Op::Reshape(a) => {
                let shape = self.shape(a).to_vec();
                accumulate(grads, a, g.clone().reshape(&shape));
            }
            Op::Concat { parts, axis } => {
                let mut start = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if self.rg(p) {
                        accumulate(grads, p, g.narrow(*axis, start, len));
                    }
                    start += len;
                }
            }
            &Op::Narrow { x, axis, start } => {
                let xs = self.shape(x);
                let outer = numel(&xs[..axis]);
                let inner = numel(&xs[axis + 1..]);
                let len = g.shape()[axis];
                let full = xs[axis] * inner;
                let mut d = vec![T::zero(); numel(xs)];
                for o in 0..outer {
                    let dst = o * full + start * inner;
                    d[dst..dst + len * inner]
                        .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                accumulate(grads, x, Tensor::new(xs, d));
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => {
                let (x, w) = (*x, *w);
                let need_b = b.is_some_and(|b| self.rg(b));
                let cg = conv::conv2d_backward(
                    geom,
                    cols,
                    self.value(w).data(),
                    g.data(),
                    self.rg(x),
                    self.rg(w),
                    need_b,
                );
                if let Some(dx) = cg.input {
                    let shape = self.shape(x).to_vec();
                    accumulate(grads, x, Tensor::new(&shape, dx));
                }
                if let Some(dw) = cg.weight {
                    let shape = self.shape(w).to_vec();
                    accumulate(grads, w, Tensor::new(&shape, dw));
                }
                if let (Some(db), Some(b)) = (cg.bias, *b) {
                    accumulate(grads, b, Tensor::new(&[geom.out_ch], db));
                }
            }
            &Op::AvgPool2(x) => {
                let s = self.shape(x).to_vec();
                let d = conv::avg_pool2_backward(s[0] * s[1], s[2], s[3], g.data());
                accumulate(grads, x, Tensor::new(&s, d));
            }
            &Op::Upsample2(x) => {
                let s = self.shape(x).to_vec();
                let d = conv::upsample2_backward(s[0] * s[1], s[2], s[3], g.data());
                accumulate(grads, x, Tensor::new(&s, d));
            }
        }
    }
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_mul_backward() {
        let mut g = Graph::<f64>::new();
        let a = g.param(Tensor::new(&[2], vec![1.0, 2.0]));
        let b = g.param(Tensor::new(&[2], vec![3.0, 4.0]));
        let p = g.mul(a, b);
        let s = g.add(p, a);
        let l = g.sum(s);
        assert_eq!(g.value(l).item(), 1.0 * 3.0 + 2.0 * 4.0 + 3.0);
        let gr = g.backward(l);
        assert_eq!(gr.get(a).unwrap().data(), &[4.0, 5.0]);
        assert_eq!(gr.get(b).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::scalar(2.0));
        let b = g.param(Tensor::scalar(5.0));
        let p = g.mul(a, b);
        let gr = g.backward(p);
        assert!(gr.get(a).is_none());
        assert_eq!(gr.get(b).unwrap().item(), 2.0);
    }

    #[test]
    fn softplus_is_stable_at_extremes() {
        assert_eq!(softplus(1000.0f64), 1000.0);
        assert!(softplus(-1000.0f64) >= 0.0 && softplus(-1000.0f64) < 1e-300);
        assert!((softplus(0.0f64) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(sigmoid(-1000.0f32), 0.0);
        assert_eq!(sigmoid(1000.0f32), 1.0);
    }

    #[test]
    fn detach_stops_gradient() {
        let mut g = Graph::<f64>::new();
        let a = g.param(Tensor::scalar(3.0));
        let sq = g.square(a);
        let d = g.detach(sq);
        let m = g.mul(d, a);
        let gr = g.backward(m);
        assert_eq!(gr.get(a).unwrap().item(), 9.0);
    }
}
