//! Synthetic phantoms and coil sensitivity profiles.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mri::stack::{CoilSensitivities, ComplexImage};
use crate::num::tensor::ComplexTensor;

fn check_pow2(d: usize) -> Result<()> {
    if d == 0 || !d.is_power_of_two() {
        return Err(Error::UnsupportedSize(d));
    }
    Ok(())
}

// Pixel centre in [-1, 1].
fn coord(i: usize, n: usize) -> f64 {
    (2.0 * i as f64 + 1.0) / n as f64 - 1.0
}

/// Random ellipse phantom with a smooth phase, magnitude in `[0, 1]`.
pub fn make_phantom(seed: u64, h: usize, w: usize) -> Result<ComplexImage> {
    check_pow2(h)?;
    check_pow2(w)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.gen_range(3..=8);
    let mut mag = vec![0.0f64; h * w];
    for _ in 0..count {
        let cx: f64 = rng.gen_range(-0.5..0.5);
        let cy: f64 = rng.gen_range(-0.5..0.5);
        let ax: f64 = rng.gen_range(0.15..0.6);
        let ay: f64 = rng.gen_range(0.15..0.6);
        let theta: f64 = rng.gen_range(0.0..PI);
        let intensity: f64 = rng.gen_range(0.2..1.0);
        let (st, ct) = theta.sin_cos();
        for r in 0..h {
            for c in 0..w {
                let dx = coord(c, w) - cx;
                let dy = coord(r, h) - cy;
                let u = (ct * dx + st * dy) / ax;
                let v = (-st * dx + ct * dy) / ay;
                if u * u + v * v <= 1.0 {
                    mag[r * w + c] += intensity;
                }
            }
        }
    }
    let peak = mag.iter().copied().fold(0.0, f64::max);
    if peak > 1.0 {
        mag.iter_mut().for_each(|m| *m /= peak);
    }
    let p0: f64 = rng.gen_range(-PI..PI);
    let px: f64 = rng.gen_range(-1.0..1.0);
    let py: f64 = rng.gen_range(-1.0..1.0);
    let pxy: f64 = rng.gen_range(-0.5..0.5);
    let data = (0..h * w)
        .map(|p| {
            let (x, y) = (coord(p % w, w), coord(p / w, h));
            Complex64::from_polar(mag[p], p0 + px * x + py * y + pxy * x * y)
        })
        .collect();
    ComplexTensor::new(vec![h, w], data)
}

/// Smooth Gaussian-bump coil profiles around the field of view, pixelwise
/// renormalized so that `sum_c |S_c|^2 = 1`.
pub fn make_coil_maps(coils: usize, h: usize, w: usize, seed: u64) -> Result<CoilSensitivities> {
    if coils == 0 {
        return Err(Error::InvalidParam("coil count must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hw = h * w;
    let mut raw = vec![Complex64::new(0.0, 0.0); coils * hw];
    for c in 0..coils {
        let angle = 2.0 * PI * c as f64 / coils as f64 + rng.gen_range(-0.3..0.3);
        let radius: f64 = rng.gen_range(0.9..1.4);
        let (cx, cy) = (radius * angle.cos(), radius * angle.sin());
        let width: f64 = rng.gen_range(0.7..1.2);
        let phase0: f64 = rng.gen_range(-PI..PI);
        let gx: f64 = rng.gen_range(-0.8..0.8);
        let gy: f64 = rng.gen_range(-0.8..0.8);
        for p in 0..hw {
            let (x, y) = (coord(p % w, w), coord(p / w, h));
            let d2 = (x - cx).powi(2) + (y - cy).powi(2);
            let m = (-d2 / (2.0 * width * width)).exp() + 1e-3;
            raw[c * hw + p] = Complex64::from_polar(m, phase0 + gx * x + gy * y);
        }
    }
    for p in 0..hw {
        let norm: f64 = (0..coils)
            .map(|c| raw[c * hw + p].norm_sqr())
            .sum::<f64>()
            .sqrt();
        for c in 0..coils {
            raw[c * hw + p] /= norm;
        }
    }
    CoilSensitivities::new(ComplexTensor::new(vec![coils, h, w], raw)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phantom_is_deterministic() {
        assert_eq!(
            make_phantom(7, 16, 16).unwrap(),
            make_phantom(7, 16, 16).unwrap()
        );
    }

    #[test]
    fn phantom_magnitude_bounded() {
        for seed in 0..100 {
            let p = make_phantom(seed, 16, 16).unwrap();
            assert!(p.max_abs() <= 1.0 + 1e-12, "seed {seed}");
            assert!(p.max_abs() > 0.0);
        }
    }

    #[test]
    fn different_seeds_differ() {
        let a = make_phantom(1, 32, 32).unwrap();
        let b = make_phantom(2, 32, 32).unwrap();
        assert!(a.max_abs_diff(&b) > 0.0);
    }

    #[test]
    fn phantom_rejects_non_power_of_two() {
        assert!(make_phantom(0, 12, 16).is_err());
    }

    #[test]
    fn single_coil_map_has_unit_modulus() {
        let s = make_coil_maps(1, 8, 8, 3).unwrap();
        for v in s.maps().data() {
            assert!((v.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn four_coils_are_normalized() {
        let s = make_coil_maps(4, 32, 32, 9).unwrap();
        assert!(s.normalization_error() < 1e-5);
    }

    #[test]
    fn coil_maps_are_deterministic() {
        assert_eq!(
            make_coil_maps(3, 8, 8, 5).unwrap(),
            make_coil_maps(3, 8, 8, 5).unwrap()
        );
        assert!(make_coil_maps(0, 8, 8, 5).is_err());
    }
}
