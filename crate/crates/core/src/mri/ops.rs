//! Linear measurement operators and coil combining.
//!
//! With `F` the unitary 2-D DFT and `P` the column selection, the forward
//! operator acts coil by coil as `A = F^H P^T P F`. It is an orthogonal
//! projector; its complement `I - A = F^H P~^T P~ F` keeps only the
//! unacquired columns.

use num_complex::Complex64;
use rand::Rng;

use crate::error::{Error, Result};
use crate::mri::mask::SamplingMask;
use crate::mri::stack::{CoilSensitivities, CoilStack, ComplexImage, StackRole};
use crate::num::fft::{fft2, ifft2};
use crate::num::tensor::{ComplexTensor, Tensor};

fn check_mask(width: usize, mask: &SamplingMask) -> Result<()> {
    if mask.width != width {
        return Err(Error::Shape(format!(
            "mask width {} does not match image width {}",
            mask.width, width
        )));
    }
    Ok(())
}

// Zero every k-space column whose flag equals `drop`.
fn mask_columns(k: &mut ComplexTensor, flags: &[bool], keep_selected: bool) {
    let w = flags.len();
    for row in k.data_mut().chunks_mut(w) {
        for (v, &sel) in row.iter_mut().zip(flags) {
            if sel != keep_selected {
                *v = Complex64::new(0.0, 0.0);
            }
        }
    }
}

fn project(x: &CoilStack, mask: &SamplingMask, keep_selected: bool) -> Result<ComplexTensor> {
    check_mask(x.width(), mask)?;
    let mut k = fft2(x.data())?;
    mask_columns(&mut k, &mask.freq_selected(), keep_selected);
    ifft2(&k)
}

/// Coil images `x_c = S_c i`.
pub fn coil_images(image: &ComplexImage, maps: &CoilSensitivities) -> Result<CoilStack> {
    let (_, h, w) = maps.dims();
    if image.shape() != [h, w] {
        return Err(Error::Shape(format!(
            "image {:?} vs maps {:?}",
            image.shape(),
            maps.dims()
        )));
    }
    let mut data = maps.maps().clone();
    for plane in data.data_mut().chunks_mut(h * w) {
        for (v, px) in plane.iter_mut().zip(image.data()) {
            *v *= px;
        }
    }
    CoilStack::new(data, StackRole::Truth)
}

/// Masked multi-coil k-space `k_c = P F (S_c i) + noise`.
///
/// Noise is circularly-symmetric complex Gaussian with `E|n|^2 =
/// noise_sd^2`, added on acquired columns only; unacquired entries are
/// exactly zero.
pub fn acquire<R: Rng + ?Sized>(
    image: &ComplexImage,
    maps: &CoilSensitivities,
    mask: &SamplingMask,
    noise_sd: f64,
    rng: &mut R,
) -> Result<CoilStack> {
    let (c, h, w) = maps.dims();
    if image.shape() != [h, w] {
        return Err(Error::Shape(format!(
            "image {:?} vs maps {:?}",
            image.shape(),
            maps.dims()
        )));
    }
    if !(noise_sd >= 0.0) {
        return Err(Error::InvalidParam(format!(
            "noise_sd {noise_sd} must be >= 0"
        )));
    }
    check_mask(w, mask)?;
    let coil_images = coil_images(image, maps)?.into_data();
    let mut k = fft2(&coil_images)?;
    let flags = mask.freq_selected();
    if noise_sd > 0.0 {
        let noise = ComplexTensor::randn(&[c, h, w], rng);
        for (v, n) in k.data_mut().iter_mut().zip(noise.data()) {
            *v += n * noise_sd;
        }
    }
    mask_columns(&mut k, &flags, true);
    CoilStack::new(k, StackRole::KSpace)
}

/// Zero-filled coil images `y_c = F^H P^T P k_c`.
pub fn zero_filled(k: &CoilStack, mask: &SamplingMask) -> Result<CoilStack> {
    check_mask(k.width(), mask)?;
    let mut masked = k.data().clone();
    mask_columns(&mut masked, &mask.freq_selected(), true);
    CoilStack::new(ifft2(&masked)?, StackRole::ZeroFilled)
}

/// Apply the forward operator `A` (projection onto acquired k-space).
pub fn apply_a(x: &CoilStack, mask: &SamplingMask) -> Result<CoilStack> {
    CoilStack::new(project(x, mask, true)?, x.role())
}

/// Nullspace component `u = (I - A) x`.
pub fn nullspace_project(x: &CoilStack, mask: &SamplingMask) -> Result<CoilStack> {
    CoilStack::new(project(x, mask, false)?, StackRole::Nullspace)
}

/// Largest deviation `max |A y - y|`.
pub fn measurement_residual(y: &CoilStack, mask: &SamplingMask) -> Result<f64> {
    Ok(apply_a(y, mask)?.data().max_abs_diff(y.data()))
}

/// Hard data consistency `x^ = (I - A) gen + y`.
///
/// `y` must lie in the range of `A`; deviations above `1e-4` (relative to
/// `max(1, max |y|)`) are rejected.
pub fn data_consistency(gen: &CoilStack, y: &CoilStack, mask: &SamplingMask) -> Result<CoilStack> {
    gen.same_dims(y)?;
    let dev = measurement_residual(y, mask)?;
    if dev > 1e-4 * y.data().max_abs().max(1.0) {
        return Err(Error::InconsistentMeasurement(dev));
    }
    let null = nullspace_project(gen, mask)?;
    Ok(null.add(y)?.with_role(StackRole::Estimate))
}

/// SENSE combine `i^ = sum_c conj(S_c) x_c`.
pub fn coil_combine_sense(x: &CoilStack, maps: &CoilSensitivities) -> Result<ComplexImage> {
    let (c, h, w) = x.dims();
    if maps.dims() != (c, h, w) {
        return Err(Error::Shape(format!(
            "stack {:?} vs maps {:?}",
            x.dims(),
            maps.dims()
        )));
    }
    let hw = h * w;
    let mut out = vec![Complex64::new(0.0, 0.0); hw];
    for (xs, ss) in x
        .data()
        .data()
        .chunks(hw)
        .zip(maps.maps().data().chunks(hw))
    {
        for ((o, xv), sv) in out.iter_mut().zip(xs).zip(ss) {
            *o += sv.conj() * xv;
        }
    }
    ComplexTensor::new(vec![h, w], out)
}

/// Root-sum-of-squares magnitude `sqrt(sum_c |x_c|^2)`, shape `[H, W]`.
pub fn coil_combine_rss(x: &CoilStack) -> Tensor {
    let (_, h, w) = x.dims();
    let hw = h * w;
    let mut out = vec![0.0; hw];
    for plane in x.data().data().chunks(hw) {
        for (o, v) in out.iter_mut().zip(plane) {
            *o += v.norm_sqr();
        }
    }
    out.iter_mut().for_each(|v| *v = v.sqrt());
    Tensor::new(vec![h, w], out).expect("rss shape")
}

/// Linear-interpolated percentile (`q` in `[0, 1]`) of a sample.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Divide by the 95th percentile of the RSS image of `y` (per sample).
pub fn normalize_stack(y: &CoilStack) -> Result<(CoilStack, f64)> {
    let rss = coil_combine_rss(y);
    let scale = percentile(rss.data(), 0.95);
    if !(scale > 0.0) || !scale.is_finite() {
        if rss.max_abs() == 0.0 {
            return Err(Error::Empty("cannot normalize an all-zero stack".into()));
        }
        // Sparse images can have a zero 95th percentile; fall back to the peak.
        let peak = rss.max_abs();
        return Ok((y.scale(1.0 / peak), peak));
    }
    Ok((y.scale(1.0 / scale), scale))
}

/// Undo [`normalize_stack`].
pub fn denormalize_stack(y: &CoilStack, scale: f64) -> CoilStack {
    y.scale(scale)
}

/// Real coordinates of the unacquired k-space, `W^H u = P~ F u`.
///
/// Ordering: coil, row, unacquired column (ascending DFT index), then
/// `(re, im)`.
pub fn gather_unmeasured(u: &CoilStack, mask: &SamplingMask) -> Result<Vec<f64>> {
    check_mask(u.width(), mask)?;
    let k = fft2(u.data())?;
    let flags = mask.freq_selected();
    let mut out = Vec::new();
    for row in k.data().chunks(u.width()) {
        for (v, &sel) in row.iter().zip(&flags) {
            if !sel {
                out.push(v.re);
                out.push(v.im);
            }
        }
    }
    Ok(out)
}

/// Map unacquired k-space coordinates back to coil images, `W k~`.
pub fn scatter_unmeasured(
    coeffs: &[f64],
    mask: &SamplingMask,
    coils: usize,
    h: usize,
    w: usize,
) -> Result<CoilStack> {
    check_mask(w, mask)?;
    let flags = mask.freq_selected();
    let free = flags.iter().filter(|&&s| !s).count();
    if coeffs.len() != 2 * coils * h * free {
        return Err(Error::Shape(format!(
            "expected {} unmeasured coordinates, got {}",
            2 * coils * h * free,
            coeffs.len()
        )));
    }
    let mut k = ComplexTensor::zeros(&[coils, h, w]);
    let mut it = coeffs.chunks(2);
    for row in k.data_mut().chunks_mut(w) {
        for (v, &sel) in row.iter_mut().zip(&flags) {
            if !sel {
                let p = it.next().expect("length checked");
                *v = Complex64::new(p[0], p[1]);
            }
        }
    }
    CoilStack::new(ifft2(&k)?, StackRole::Nullspace)
}

/// Number of real unacquired k-space coordinates, `2 C H (D - M)`.
pub fn unmeasured_dim(mask: &SamplingMask, coils: usize, h: usize) -> usize {
    2 * coils * h * (mask.width - mask.count())
}
