//! Image quality metrics.

use crate::error::{CliftError, Result};
use crate::imaging::Image;

pub const PSNR_CAP: f64 = 99.0;

fn check(a: &Image, b: &Image) -> Result<()> {
    if a.width != b.width || a.height != b.height {
        return Err(CliftError::Shape(format!(
            "{}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check(a, b)?;
    let s: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(s / a.data.len().max(1) as f64)
}

/// `10·log10(1 / MSE)` for images in `[0, 1]`, capped at 99 dB.
pub fn psnr(pred: &Image, truth: &Image) -> Result<f64> {
    let m = mse(pred, truth)?;
    if m < 1e-10 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP))
}

/// Normalized 1-D Gaussian of odd length `size`.
fn gaussian(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let w: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

const K1: f64 = 0.01;
const K2: f64 = 0.03;

/// Mean structural similarity with an 11×11 Gaussian window (σ = 1.5) over
/// valid window positions, averaged over channels. Images smaller than the
/// window use the largest odd window that fits.
pub fn ssim(pred: &Image, truth: &Image) -> Result<f64> {
    check(pred, truth)?;
    let (w, h) = (pred.width, pred.height);
    let mut size = 11.min(w).min(h);
    if size % 2 == 0 {
        size -= 1;
    }
    if size == 0 {
        return Err(CliftError::Shape("empty image".into()));
    }
    let g = gaussian(size, 1.5);
    let (c1, c2) = ((K1 * K1), (K2 * K2));
    let (ow, oh) = (w - size + 1, h - size + 1);
    let mut total = 0.0;
    for ch in 0..3 {
        let px = |img: &Image, x: usize, y: usize| img.data[(y * w + x) * 3 + ch] as f64;
        let mut acc = 0.0;
        for oy in 0..oh {
            for ox in 0..ow {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for j in 0..size {
                    for i in 0..size {
                        let wt = g[i] * g[j];
                        let a = px(pred, ox + i, oy + j);
                        let b = px(truth, ox + i, oy + j);
                        mx += wt * a;
                        my += wt * b;
                        sxx += wt * a * a;
                        syy += wt * b * b;
                        sxy += wt * a * b;
                    }
                }
                let (vx, vy, cxy) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                acc += ((2.0 * mx * my + c1) * (2.0 * cxy + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
            }
        }
        total += acc / (ow * oh) as f64;
    }
    Ok(total / 3.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_images() {
        let a = Image::from_fn(16, 16, |x, y| [x as f32 / 16.0, y as f32 / 16.0, 0.5]);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_error_psnr() {
        let a = Image::filled(8, 8, [0.2; 3]);
        let b = Image::filled(8, 8, [0.3; 3]);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-5);
    }

    #[test]
    fn shape_mismatch() {
        assert!(psnr(
            &Image::filled(8, 8, [0.0; 3]),
            &Image::filled(8, 16, [0.0; 3])
        )
        .is_err());
    }
}
