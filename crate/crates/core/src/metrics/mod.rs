//! Image-quality metrics, the P-sample averaging gain law and a
//! closed-form linear-Gaussian posterior oracle.

pub mod gain;
pub mod oracle;

use crate::error::{Error, Result};
use crate::num::tensor::{ComplexTensor, Tensor};

pub use gain::{gain_curve, gain_theory, GainCurve, GainReference, GainTrial};
pub use oracle::{moment_distance, GaussianOracle, ToyDraw, ToyProblem};

fn psnr_from(peak_sq: f64, d: usize, err: f64) -> Result<f64> {
    if !(peak_sq > 0.0) {
        return Err(Error::InvalidParam("PSNR needs a nonzero reference".into()));
    }
    if err == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (d as f64 * peak_sq / err).log10())
}

/// Magnitude PSNR in dB, `10 log10(D max|t|^2 / ||e - t||^2)`; `+inf` when
/// the images are identical.
pub fn psnr(est: &Tensor, truth: &Tensor) -> Result<f64> {
    if est.shape() != truth.shape() {
        return Err(Error::Shape(format!(
            "{:?} vs {:?}",
            est.shape(),
            truth.shape()
        )));
    }
    let peak = truth.max_abs();
    let err = est.zip_map(truth, |a, b| a - b).sq_norm();
    psnr_from(peak * peak, truth.len(), err)
}

/// Complex PSNR: as [`psnr`] with the complex residual.
pub fn cpsnr(est: &ComplexTensor, truth: &ComplexTensor) -> Result<f64> {
    if est.shape() != truth.shape() {
        return Err(Error::Shape(format!(
            "{:?} vs {:?}",
            est.shape(),
            truth.shape()
        )));
    }
    let peak = truth.max_abs();
    let err = est.zip_map(truth, |a, b| a - b).sq_norm();
    psnr_from(peak * peak, truth.len(), err)
}

pub const SSIM_WINDOW: usize = 7;

/// Mean SSIM over all valid 7x7 windows with dynamic range `max(truth)`.
pub fn ssim(est: &Tensor, truth: &Tensor) -> Result<f64> {
    let l = truth
        .data()
        .iter()
        .fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    ssim_with_range(est, truth, if l > 0.0 { l } else { 1.0 })
}

/// Mean SSIM with an explicit dynamic range; symmetric in `a` and `b`.
pub fn ssim_with_range(a: &Tensor, b: &Tensor, range: f64) -> Result<f64> {
    if a.shape() != b.shape() || a.rank() != 2 {
        return Err(Error::Shape(format!(
            "SSIM needs equal 2-D images, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (h, w) = (a.shape()[0], a.shape()[1]);
    let k = SSIM_WINDOW;
    if h < k || w < k {
        return Err(Error::Shape(format!(
            "{h}x{w} image is smaller than the {k}x{k} SSIM window"
        )));
    }
    let c1 = (0.01 * range).powi(2);
    let c2 = (0.03 * range).powi(2);
    let np = (k * k) as f64;
    let cov_norm = np / (np - 1.0);
    let (ad, bd) = (a.data(), b.data());
    let mut total = 0.0;
    let mut count = 0usize;
    for r in 0..=h - k {
        for c in 0..=w - k {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in r..r + k {
                for j in c..c + k {
                    let (x, y) = (ad[i * w + j], bd[i * w + j]);
                    sa += x;
                    sb += y;
                    saa += x * x;
                    sbb += y * y;
                    sab += x * y;
                }
            }
            let (ma, mb) = (sa / np, sb / np);
            let va = cov_norm * (saa / np - ma * ma);
            let vb = cov_norm * (sbb / np - mb * mb);
            let vab = cov_norm * (sab / np - ma * mb);
            total += ((2.0 * ma * mb + c1) * (2.0 * vab + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}
