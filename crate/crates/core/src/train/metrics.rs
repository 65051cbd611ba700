//! Frame and sequence metrics on `[-1, 1]` images.

use crate::domain::FrameImage;
use crate::error::{Error, Result};

/// Squared peak-to-peak range of `[-1, 1]` pixels.
pub const PEAK_SQ: f64 = 4.0;
pub const SSIM_WINDOW: usize = 7;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn same_size(a: &FrameImage, b: &FrameImage) -> Result<()> {
    if a.height() == b.height() && a.width() == b.width() {
        Ok(())
    } else {
        Err(Error::Shape(format!(
            "frames {}x{} and {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )))
    }
}

pub fn mse(a: &FrameImage, b: &FrameImage) -> Result<f64> {
    same_size(a, b)?;
    let sum: f64 = a
        .pixels()
        .iter()
        .zip(b.pixels())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum();
    Ok(sum / a.pixels().len() as f64)
}

/// `10·log10(4 / mse)`; `+∞` for identical frames.
pub fn psnr(a: &FrameImage, b: &FrameImage) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 { f64::INFINITY } else { 10.0 * (PEAK_SQ / m).log10() })
}

/// Mean SSIM over all valid 7×7 windows and the three channels, with
/// uniform weights and sample (N−1) covariances.
pub fn ssim(a: &FrameImage, b: &FrameImage) -> Result<f64> {
    same_size(a, b)?;
    let (h, w, k) = (a.height(), a.width(), SSIM_WINDOW);
    if h < k || w < k {
        return Err(Error::Shape(format!("SSIM needs at least {k}x{k} frames, got {h}x{w}")));
    }
    let c1 = (K1 * 2.0).powi(2);
    let c2 = (K2 * 2.0).powi(2);
    let n = (k * k) as f64;
    let cov_norm = n / (n - 1.0);
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..3 {
        for y0 in 0..=h - k {
            for x0 in 0..=w - k {
                let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for y in y0..y0 + k {
                    for x in x0..x0 + k {
                        let p = a.at(c, y, x) as f64;
                        let q = b.at(c, y, x) as f64;
                        sx += p;
                        sy += q;
                        sxx += p * p;
                        syy += q * q;
                        sxy += p * q;
                    }
                }
                let (mx, my) = (sx / n, sy / n);
                let vx = cov_norm * (sxx / n - mx * mx);
                let vy = cov_norm * (syy / n - my * my);
                let vxy = cov_norm * (sxy / n - mx * my);
                let num = (2.0 * mx * my + c1) * (2.0 * vxy + c2);
                let den = (mx * mx + my * my + c1) * (vx + vy + c2);
                total += num / den;
                count += 1;
            }
        }
    }
    Ok((total / count as f64).clamp(-1.0, 1.0))
}

/// Mean absolute gap between generated and reference consecutive-frame
/// differences. Zero for sequences shorter than two frames.
pub fn temporal_l1(generated: &[FrameImage], reference: &[FrameImage]) -> Result<f64> {
    let n = generated.len().min(reference.len());
    if n < 2 {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for t in 1..n {
        same_size(&generated[t], &reference[t])?;
        let (g0, g1) = (generated[t - 1].pixels(), generated[t].pixels());
        let (r0, r1) = (reference[t - 1].pixels(), reference[t].pixels());
        for i in 0..g1.len() {
            let dg = g1[i] as f64 - g0[i] as f64;
            let dr = r1[i] as f64 - r0[i] as f64;
            sum += (dg - dr).abs();
        }
        count += g1.len();
    }
    Ok(sum / count as f64)
}

/// Report formatting: `inf` for infinite values, six decimals otherwise.
pub fn fmt_metric(x: f64) -> String {
    if x == f64::INFINITY {
        "inf".into()
    } else {
        format!("{x:.6}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(h: usize, w: usize, f: impl Fn(usize) -> f32) -> FrameImage {
        FrameImage::new(h, w, (0..3 * h * w).map(f).collect()).unwrap()
    }

    #[test]
    fn psnr_closed_form() {
        let a = FrameImage::filled(4, 4, 0.0);
        let b = FrameImage::filled(4, 4, 0.5);
        // mse 0.25 → 10·log10(16)
        assert!((psnr(&a, &b).unwrap() - 12.041199826559248).abs() < 1e-12);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        assert_eq!(fmt_metric(f64::INFINITY), "inf");
    }

    #[test]
    fn ssim_identity_and_bounds() {
        let a = frame(9, 10, |i| ((i * 37 % 23) as f32 / 11.5) - 1.0);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let b = frame(9, 10, |i| -(((i * 37 % 23) as f32 / 11.5) - 1.0));
        let s = ssim(&a, &b).unwrap();
        assert!((-1.0..1.0).contains(&s));
        assert!(matches!(ssim(&FrameImage::filled(6, 6, 0.0), &FrameImage::filled(6, 6, 0.0)), Err(Error::Shape(_))));
    }

    #[test]
    fn ssim_matches_reference_implementation() {
        // Values from an independent windowed SSIM (uniform 7×7, sample
        // covariance, data range 2) on the same deterministic pair.
        let a = frame(8, 9, |i| ((i * 7919 % 101) as f32 / 50.0) - 1.0);
        let b = frame(8, 9, |i| (((i * 7919 % 101) as f32 / 50.0) - 1.0) * 0.8 + ((i % 5) as f32) * 0.03);
        let s = ssim(&a, &b).unwrap();
        assert!((s - SSIM_REFERENCE).abs() < 1e-6, "{s}");
    }

    const SSIM_REFERENCE: f64 = 0.12887546092366964;

    #[test]
    fn temporal_gap() {
        let z = FrameImage::filled(2, 2, 0.0);
        let h = FrameImage::filled(2, 2, 0.5);
        assert_eq!(temporal_l1(&[z.clone(), h.clone()], &[z.clone(), h.clone()]).unwrap(), 0.0);
        assert_eq!(temporal_l1(&[z.clone(), z.clone()], &[z.clone(), h]).unwrap(), 0.5);
        assert_eq!(temporal_l1(std::slice::from_ref(&z), std::slice::from_ref(&z)).unwrap(), 0.0);
    }
}
