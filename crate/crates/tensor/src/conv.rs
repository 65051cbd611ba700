//! Spatial kernels over NCHW buffers: im2col convolution, 2× pooling and
//! nearest upsampling.

use crate::real::gemm;
use crate::Real;

/// Static geometry of one 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    /// Rows of the patch matrix: `in_ch · k · k`.
    pub fn patch_len(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    /// Columns of the patch matrix: `batch · out_h · out_w`.
    pub fn patch_cols(&self) -> usize {
        self.batch * self.out_h() * self.out_w()
    }
}

/// Unfold `input` (NCHW) into a `[C·k·k, N·Ho·Wo]` patch matrix.
pub fn im2col<T: Real>(g: &ConvGeom, input: &[T], cols: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    let ncols = g.batch * plane;
    debug_assert_eq!(cols.len(), g.patch_len() * ncols);
    let k = g.kernel;
    for c in 0..g.in_ch {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let row_buf = &mut cols[row * ncols..(row + 1) * ncols];
                for n in 0..g.batch {
                    let src = &input[((n * g.in_ch) + c) * g.in_h * g.in_w..][..g.in_h * g.in_w];
                    let dst = &mut row_buf[n * plane..(n + 1) * plane];
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        let drow = &mut dst[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= g.in_h as isize {
                            drow.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let srow = &src[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            *d = if ix < 0 || ix >= g.in_w as isize {
                                T::zero()
                            } else {
                                srow[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add a patch matrix back into NCHW.
pub fn col2im<T: Real>(g: &ConvGeom, cols: &[T], out: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    let ncols = g.batch * plane;
    let k = g.kernel;
    for c in 0..g.in_ch {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let row_buf = &cols[row * ncols..(row + 1) * ncols];
                for n in 0..g.batch {
                    let dst =
                        &mut out[((n * g.in_ch) + c) * g.in_h * g.in_w..][..g.in_h * g.in_w];
                    let src = &row_buf[n * plane..(n + 1) * plane];
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.in_h as isize {
                            continue;
                        }
                        let drow = &mut dst[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                        for (ox, &s) in src[oy * ow..(oy + 1) * ow].iter().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.in_w as isize {
                                drow[ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution. Returns the NCHW output and the patch matrix, which
/// the backward pass reuses.
pub fn conv2d_forward<T: Real>(
    g: &ConvGeom,
    input: &[T],
    weight: &[T],
    bias: Option<&[T]>,
) -> (Vec<T>, Vec<T>) {
    let (plen, ncols) = (g.patch_len(), g.patch_cols());
    let mut cols = vec![T::zero(); plen * ncols];
    im2col(g, input, &mut cols);
    let mut flat = vec![T::zero(); g.out_ch * ncols];
    gemm(g.out_ch, plen, ncols, weight, false, &cols, false, &mut flat, false);
    let plane = g.out_h() * g.out_w();
    let mut out = vec![T::zero(); g.batch * g.out_ch * plane];
    for o in 0..g.out_ch {
        let b = bias.map_or(T::zero(), |b| b[o]);
        for n in 0..g.batch {
            let src = &flat[o * ncols + n * plane..o * ncols + (n + 1) * plane];
            let dst = &mut out[(n * g.out_ch + o) * plane..(n * g.out_ch + o + 1) * plane];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s + b;
            }
        }
    }
    (out, cols)
}

/// Gradients of a convolution given the upstream gradient `dout` (NCHW).
/// Each requested gradient is returned; unrequested ones are skipped.
pub struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub fn conv2d_backward<T: Real>(
    g: &ConvGeom,
    cols: &[T],
    weight: &[T],
    dout: &[T],
    need_input: bool,
    need_weight: bool,
    need_bias: bool,
) -> ConvGrads<T> {
    let (plen, ncols) = (g.patch_len(), g.patch_cols());
    let plane = g.out_h() * g.out_w();
    // [N, O, P] -> [O, N·P]
    let mut dflat = vec![T::zero(); g.out_ch * ncols];
    for n in 0..g.batch {
        for o in 0..g.out_ch {
            let src = &dout[(n * g.out_ch + o) * plane..(n * g.out_ch + o + 1) * plane];
            dflat[o * ncols + n * plane..o * ncols + (n + 1) * plane].copy_from_slice(src);
        }
    }
    let bias = need_bias.then(|| {
        (0..g.out_ch)
            .map(|o| dflat[o * ncols..(o + 1) * ncols].iter().copied().sum())
            .collect()
    });
    let weight_grad = need_weight.then(|| {
        let mut dw = vec![T::zero(); g.out_ch * plen];
        gemm(g.out_ch, ncols, plen, &dflat, false, cols, true, &mut dw, false);
        dw
    });
    let input = need_input.then(|| {
        let mut dcols = vec![T::zero(); plen * ncols];
        gemm(plen, g.out_ch, ncols, weight, true, &dflat, false, &mut dcols, false);
        let mut dx = vec![T::zero(); g.batch * g.in_ch * g.in_h * g.in_w];
        col2im(g, &dcols, &mut dx);
        dx
    });
    ConvGrads {
        input,
        weight: weight_grad,
        bias,
    }
}

/// 2×2 average pooling with stride 2 over each NCHW plane. Odd trailing
/// rows/columns are dropped.
pub fn avg_pool2<T: Real>(planes: usize, h: usize, w: usize, input: &[T]) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::lit(0.25);
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &input[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                let s = src[2 * y * w + 2 * x]
                    + src[2 * y * w + 2 * x + 1]
                    + src[(2 * y + 1) * w + 2 * x]
                    + src[(2 * y + 1) * w + 2 * x + 1];
                dst[y * ow + x] = s * quarter;
            }
        }
    }
    out
}

pub fn avg_pool2_backward<T: Real>(planes: usize, h: usize, w: usize, dout: &[T]) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::lit(0.25);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let src = &dout[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            for x in 0..ow {
                let g = src[y * ow + x] * quarter;
                dst[2 * y * w + 2 * x] = g;
                dst[2 * y * w + 2 * x + 1] = g;
                dst[(2 * y + 1) * w + 2 * x] = g;
                dst[(2 * y + 1) * w + 2 * x + 1] = g;
            }
        }
    }
    dx
}

/// Nearest-neighbour 2× upsampling over each plane.
pub fn upsample2<T: Real>(planes: usize, h: usize, w: usize, input: &[T]) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &input[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                dst[y * ow + x] = src[(y / 2) * w + x / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward<T: Real>(planes: usize, h: usize, w: usize, dout: &[T]) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let src = &dout[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            for x in 0..ow {
                dst[(y / 2) * w + x / 2] += src[y * ow + x];
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution used as a reference.
    fn direct_conv(g: &ConvGeom, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
        let (oh, ow, k) = (g.out_h(), g.out_w(), g.kernel);
        let mut out = vec![0.0; g.batch * g.out_ch * oh * ow];
        for n in 0..g.batch {
            for o in 0..g.out_ch {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = b[o];
                        for c in 0..g.in_ch {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= g.in_h as isize || ix >= g.in_w as isize {
                                        continue;
                                    }
                                    s += x[((n * g.in_ch + c) * g.in_h + iy as usize) * g.in_w + ix as usize]
                                        * w[((o * g.in_ch + c) * k + ki) * k + kj];
                                }
                            }
                        }
                        out[((n * g.out_ch + o) * oh + oy) * ow + ox] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn im2col_conv_matches_direct_loops() {
        for (stride, pad, kernel) in [(1, 1, 3), (2, 1, 3), (2, 1, 4), (1, 0, 1)] {
            let g = ConvGeom {
                batch: 2,
                in_ch: 3,
                in_h: 7,
                in_w: 6,
                out_ch: 4,
                kernel,
                stride,
                pad,
            };
            let x: Vec<f64> = (0..2 * 3 * 7 * 6).map(|i| ((i * 7) % 13) as f64 - 6.0).collect();
            let w: Vec<f64> = (0..4 * g.patch_len()).map(|i| ((i * 5) % 11) as f64 * 0.1).collect();
            let b = vec![0.5, -0.5, 1.0, 0.0];
            let (out, _) = conv2d_forward(&g, &x, &w, Some(&b));
            let want = direct_conv(&g, &x, &w, &b);
            assert_eq!(out.len(), want.len());
            for (a, b) in out.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom {
            batch: 1,
            in_ch: 2,
            in_h: 5,
            in_w: 5,
            out_ch: 1,
            kernel: 3,
            stride: 2,
            pad: 1,
        };
        let x: Vec<f64> = (0..50).map(|i| (i as f64 * 0.3).sin()).collect();
        let y: Vec<f64> = (0..g.patch_len() * g.patch_cols())
            .map(|i| (i as f64 * 0.7).cos())
            .collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&g, &x, &mut cols);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im(&g, &y, &mut back);
        let rhs: f64 = back.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn pooling_and_upsampling_shapes() {
        let x: Vec<f32> = (0..16).map(|i| i as f32).collect();
        let p = avg_pool2(1, 4, 4, &x);
        assert_eq!(p, vec![2.5, 4.5, 10.5, 12.5]);
        let u = upsample2(1, 2, 2, &p);
        assert_eq!(u.len(), 16);
        assert_eq!(u[0], 2.5);
        assert_eq!(u[5], 2.5);
        assert_eq!(u[15], 12.5);
    }
}
