//! Radix-2 unitary 2-D DFT.
//!
//! Transforms act on the last two axes of a [`ComplexTensor`], so a coil
//! stack `[C, H, W]` is transformed coil by coil. Both directions carry the
//! `1/sqrt(H W)` factor, which makes them exact inverses and preserves the
//! Euclidean norm.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::num::tensor::ComplexTensor;

/// Unnormalized in-place radix-2 FFT. `inverse` flips the twiddle sign.
pub fn fft_inplace(buf: &mut [Complex64], inverse: bool) -> Result<()> {
    let n = buf.len();
    if n == 0 || !n.is_power_of_two() {
        return Err(Error::UnsupportedSize(n));
    }
    if n == 1 {
        return Ok(());
    }
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            buf.swap(i, j);
        }
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let ang = sign * 2.0 * PI / len as f64;
        let half = len / 2;
        let twiddles: Vec<Complex64> = (0..half)
            .map(|k| Complex64::from_polar(1.0, ang * k as f64))
            .collect();
        for start in (0..n).step_by(len) {
            for k in 0..half {
                let a = buf[start + k];
                let b = buf[start + k + half] * twiddles[k];
                buf[start + k] = a + b;
                buf[start + k + half] = a - b;
            }
        }
        len <<= 1;
    }
    Ok(())
}

fn transform2(x: &ComplexTensor, inverse: bool) -> Result<ComplexTensor> {
    let shape = x.shape();
    if shape.len() < 2 {
        return Err(Error::Shape(format!(
            "2-D FFT needs rank >= 2, got {:?}",
            shape
        )));
    }
    let h = shape[shape.len() - 2];
    let w = shape[shape.len() - 1];
    for d in [h, w] {
        if d == 0 || !d.is_power_of_two() {
            return Err(Error::UnsupportedSize(d));
        }
    }
    let mut out = x.clone();
    let scale = 1.0 / ((h * w) as f64).sqrt();
    let mut column = vec![Complex64::new(0.0, 0.0); h];
    for plane in out.data_mut().chunks_mut(h * w) {
        for row in plane.chunks_mut(w) {
            fft_inplace(row, inverse)?;
        }
        for c in 0..w {
            for r in 0..h {
                column[r] = plane[r * w + c];
            }
            fft_inplace(&mut column, inverse)?;
            for r in 0..h {
                plane[r * w + c] = column[r] * scale;
            }
        }
    }
    Ok(out)
}

/// Forward unitary 2-D DFT over the last two axes.
pub fn fft2(x: &ComplexTensor) -> Result<ComplexTensor> {
    transform2(x, false)
}

/// Inverse unitary 2-D DFT over the last two axes.
pub fn ifft2(x: &ComplexTensor) -> Result<ComplexTensor> {
    transform2(x, true)
}
