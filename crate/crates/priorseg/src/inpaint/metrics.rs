//! Reconstruction quality metrics for unit-range images.

use ndarray::{Array2, Array3, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// PSNR reported for a perfect reconstruction (MSE = 0); keeps reports
/// finite instead of printing infinity.
pub const PSNR_CAP_DB: f64 = 99.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct InpaintQualityReport {
    pub psnr_db: f64,
    pub mse: f64,
    pub ssim: f64,
}

/// MSE, PSNR (dynamic range 1) and mean SSIM (11x11 Gaussian window,
/// sigma 1.5, K1 = 0.01, K2 = 0.03) between two (C, H, W) images in [0, 1].
pub fn quality_metrics(a: &Array3<f32>, b: &Array3<f32>) -> Result<InpaintQualityReport> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    let (c, h, w) = a.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::ShapeMismatch(format!(
            "image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    for &v in a.iter().chain(b.iter()) {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Invariant(format!("metric input value {v} outside [0, 1]")));
        }
    }

    let n = a.len() as f64;
    let mse: f64 = a
        .iter()
        .zip(b.iter())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / n;
    let psnr_db = if mse == 0.0 { PSNR_CAP_DB } else { 10.0 * (1.0 / mse).log10() };

    let mut ssim_sum = 0.0;
    for ci in 0..c {
        ssim_sum += ssim_channel(
            &a.index_axis(ndarray::Axis(0), ci),
            &b.index_axis(ndarray::Axis(0), ci),
        );
    }
    Ok(InpaintQualityReport { psnr_db, mse, ssim: ssim_sum / c as f64 })
}

fn gaussian_kernel() -> Array2<f64> {
    let half = (SSIM_WINDOW / 2) as isize;
    let mut k = Array2::<f64>::zeros((SSIM_WINDOW, SSIM_WINDOW));
    let mut sum = 0.0;
    for i in -half..=half {
        for j in -half..=half {
            let v = (-((i * i + j * j) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            k[((i + half) as usize, (j + half) as usize)] = v;
            sum += v;
        }
    }
    k / sum
}

/// Mean SSIM over all fully-interior windows of one channel.
fn ssim_channel(a: &ArrayView2<f32>, b: &ArrayView2<f32>) -> f64 {
    let (h, w) = a.dim();
    let kernel = gaussian_kernel();
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let oh = h - SSIM_WINDOW + 1;
    let ow = w - SSIM_WINDOW + 1;
    let mut acc = 0.0;
    for oi in 0..oh {
        for oj in 0..ow {
            let mut mu_a = 0.0;
            let mut mu_b = 0.0;
            let mut aa = 0.0;
            let mut bb = 0.0;
            let mut ab = 0.0;
            for ki in 0..SSIM_WINDOW {
                for kj in 0..SSIM_WINDOW {
                    let g = kernel[(ki, kj)];
                    let x = a[(oi + ki, oj + kj)] as f64;
                    let y = b[(oi + ki, oj + kj)] as f64;
                    mu_a += g * x;
                    mu_b += g * y;
                    aa += g * (x * x);
                    bb += g * (y * y);
                    ab += g * (x * y);
                }
            }
            let var_a = aa - mu_a * mu_a;
            let var_b = bb - mu_b * mu_b;
            let mu_ab = mu_a * mu_b;
            let cov = ab - mu_ab;
            // Grouped so the expression is bitwise symmetric in (a, b).
            let num = (2.0 * mu_ab + c1) * (2.0 * cov + c2);
            let den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2);
            acc += num / den;
        }
    }
    acc / (oh * ow) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};

    #[test]
    fn identical_images_are_perfect() {
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(1);
        let a = Array3::from_shape_fn((3, 16, 16), |_| rng.gen_range(0.0f32..=1.0));
        let r = quality_metrics(&a, &a).unwrap();
        assert_eq!(r.mse, 0.0);
        assert_eq!(r.psnr_db, PSNR_CAP_DB);
        assert!((r.ssim - 1.0).abs() < 1e-9);
    }

    #[test]
    fn constant_offset_has_closed_form_psnr() {
        let a = Array3::from_elem((1, 16, 16), 0.4f32);
        let b = Array3::from_elem((1, 16, 16), 0.5f32);
        let r = quality_metrics(&a, &b).unwrap();
        assert!((r.mse - 0.01).abs() < 1e-7, "mse {}", r.mse);
        assert!((r.psnr_db - 20.0).abs() < 1e-4, "psnr {}", r.psnr_db);
    }

    #[test]
    fn zeros_vs_ones_is_zero_db() {
        let a = Array3::from_elem((1, 12, 12), 0.0f32);
        let b = Array3::from_elem((1, 12, 12), 1.0f32);
        let r = quality_metrics(&a, &b).unwrap();
        assert_eq!(r.mse, 1.0);
        assert!(r.psnr_db.abs() < 1e-9);
        assert!(r.ssim < 0.1, "ssim of opposite constants should be tiny, got {}", r.ssim);
    }

    #[test]
    fn ssim_is_symmetric() {
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(5);
        for _ in 0..5 {
            let a = Array3::from_shape_fn((2, 14, 18), |_| rng.gen_range(0.0f32..=1.0));
            let b = Array3::from_shape_fn((2, 14, 18), |_| rng.gen_range(0.0f32..=1.0));
            let r1 = quality_metrics(&a, &b).unwrap();
            let r2 = quality_metrics(&b, &a).unwrap();
            assert_eq!(r1.ssim, r2.ssim);
            assert_eq!(r1.mse, r2.mse);
        }
    }

    #[test]
    fn ssim_below_one_for_distinct_images() {
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(6);
        let a = Array3::from_shape_fn((1, 16, 16), |_| rng.gen_range(0.0f32..=1.0));
        let mut b = a.clone();
        b[(0, 8, 8)] = (b[(0, 8, 8)] + 0.5).min(1.0);
        let r = quality_metrics(&a, &b).unwrap();
        assert!(r.ssim < 1.0);
        assert!(r.psnr_db > 0.0);
    }

    #[test]
    fn tiny_images_are_rejected() {
        let a = Array3::from_elem((1, 8, 8), 0.5f32);
        assert!(quality_metrics(&a, &a).is_err());
    }

    #[test]
    fn out_of_range_rejected() {
        let a = Array3::from_elem((1, 16, 16), 0.5f32);
        let mut b = a.clone();
        b[(0, 0, 0)] = 1.5;
        assert!(quality_metrics(&a, &b).is_err());
    }
}
