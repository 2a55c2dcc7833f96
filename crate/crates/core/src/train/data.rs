use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mri::dataset::SimSample;
use crate::mri::mask::SamplingMask;
use crate::mri::ops::{apply_a, normalize_stack};
use crate::mri::stack::{CoilStack, StackRole};
use crate::num::tensor::{ComplexTensor, Tensor};

/// One training example in real channel layout `[2C, H, W]`.
#[derive(Clone, Debug)]
pub struct TrainPair {
    /// Normalized zero-filled input.
    pub y: Tensor,
    /// Flow target: nullspace component, or full image for the ablation.
    pub target: Tensor,
    pub mask: SamplingMask,
    /// Normalization divisor applied to this example.
    pub scale: f64,
}

/// An in-memory training set with a common shape.
#[derive(Clone, Debug)]
pub struct TrainSet {
    pairs: Vec<TrainPair>,
    shape: [usize; 3],
}

impl TrainSet {
    pub fn new(pairs: Vec<TrainPair>) -> Result<Self> {
        let first = pairs
            .first()
            .ok_or_else(|| Error::Empty("training set has no examples".into()))?;
        let s = first.y.shape();
        if s.len() != 3 {
            return Err(Error::Shape(format!(
                "expected [2C, H, W] examples, got {s:?}"
            )));
        }
        let shape = [s[0], s[1], s[2]];
        for p in &pairs {
            if p.y.shape() != shape || p.target.shape() != shape {
                return Err(Error::Shape(format!(
                    "example shapes {:?}/{:?} differ from {shape:?}",
                    p.y.shape(),
                    p.target.shape()
                )));
            }
        }
        Ok(Self { pairs, shape })
    }

    /// Normalize each simulated sample by its own 95th percentile and pick
    /// the nullspace (`nullspace_learning`) or full-image target.
    pub fn from_samples(samples: &[SimSample], nullspace_learning: bool) -> Result<Self> {
        let pairs = samples
            .iter()
            .map(|s| {
                let (y, scale) = normalize_stack(&s.y)?;
                let target = if nullspace_learning { &s.u } else { &s.truth };
                Ok(TrainPair {
                    y: y.to_channels(),
                    target: target.scale(1.0 / scale).to_channels(),
                    mask: s.mask.clone(),
                    scale,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(pairs)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn pairs(&self) -> &[TrainPair] {
        &self.pairs
    }

    pub fn subset(&self, idx: &[usize]) -> TrainSet {
        TrainSet {
            pairs: idx.iter().map(|&i| self.pairs[i].clone()).collect(),
            shape: self.shape,
        }
    }

    /// Check that every target lies in the nullspace of its mask.
    pub fn check_nullspace_targets(&self) -> Result<()> {
        for (i, p) in self.pairs.iter().enumerate() {
            let u = CoilStack::from_channels(&p.target, StackRole::Nullspace)?;
            let leak = apply_a(&u, &p.mask)?.data().max_abs();
            if leak > 1e-6 * u.data().max_abs().max(1.0) {
                return Err(Error::Mismatch(format!(
                    "target {i} is not a nullspace projection (leak {leak:e})"
                )));
            }
        }
        Ok(())
    }

    /// Stack examples `idx` into `(y, target)` batches `[B, 2C, H, W]`.
    /// With `dither_sd > 0` each target gets `A xi` added, `xi` white with
    /// that standard deviation per real component, drawn from `rng`.
    pub fn batch<R: Rng + ?Sized>(
        &self,
        idx: &[usize],
        dither_sd: f64,
        rng: &mut R,
    ) -> Result<(Tensor, Tensor)> {
        let ys: Vec<&Tensor> = idx.iter().map(|&i| &self.pairs[i].y).collect();
        let mut targets = Vec::with_capacity(idx.len());
        for &i in idx {
            let p = &self.pairs[i];
            if dither_sd > 0.0 {
                targets.push(
                    p.target
                        .zip_map(&range_noise(p, dither_sd, rng)?, |a, b| a + b),
                );
            } else {
                targets.push(p.target.clone());
            }
        }
        let trefs: Vec<&Tensor> = targets.iter().collect();
        Ok((Tensor::stack(&ys)?, Tensor::stack(&trefs)?))
    }
}

// `A xi` in channel layout for one example.
fn range_noise<R: Rng + ?Sized>(p: &TrainPair, sd: f64, rng: &mut R) -> Result<Tensor> {
    let [c2, h, w] = [p.y.shape()[0], p.y.shape()[1], p.y.shape()[2]];
    let xi =
        ComplexTensor::randn(&[c2 / 2, h, w], rng).map(|v| v * (sd * std::f64::consts::SQRT_2));
    let a = apply_a(&CoilStack::new(xi, StackRole::Estimate)?, &p.mask)?;
    Ok(a.to_channels())
}

/// Deterministic generator for stream `(seed, a, b)`.
pub fn stream(seed: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(a.wrapping_mul(0x1_0000_0001).wrapping_add(b));
    r
}

/// Seeded train/validation split; validation gets `ceil(frac * n)` examples
/// (at least one when `n >= 2`).
pub fn split_indices(n: usize, frac: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream(seed, 7, 0));
    let mut nv = (frac * n as f64).ceil() as usize;
    if n >= 2 {
        nv = nv.clamp(1, n - 1);
    } else {
        nv = 0;
    }
    let val = idx[..nv].to_vec();
    let mut train = idx[nv..].to_vec();
    train.sort_unstable();
    let mut val = val;
    val.sort_unstable();
    (train, val)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mri::dataset::{simulate, SimConfig};

    fn set(nullspace: bool) -> TrainSet {
        let cfg = SimConfig {
            height: 8,
            width: 8,
            coils: 2,
            acs: 2,
            n_samples: 4,
            ..SimConfig::default()
        };
        TrainSet::from_samples(&simulate(&cfg).unwrap(), nullspace).unwrap()
    }

    #[test]
    fn nullspace_targets_pass_check() {
        let s = set(true);
        s.check_nullspace_targets().unwrap();
        assert!(set(false).check_nullspace_targets().is_err());
    }

    #[test]
    fn dither_stays_in_range_space() {
        let s = set(true);
        let (_, t0) = s.batch(&[1], 0.0, &mut stream(0, 0, 0)).unwrap();
        let (_, t1) = s.batch(&[1], 0.1, &mut stream(0, 0, 0)).unwrap();
        let d = t1.zip_map(&t0, |a, b| a - b);
        assert!(d.max_abs() > 0.0);
        let dn = CoilStack::from_channels(&d.batch_slice(0, 1), StackRole::Estimate).unwrap();
        let null = crate::mri::ops::nullspace_project(&dn, &s.pairs()[1].mask).unwrap();
        assert!(null.data().max_abs() < 1e-12);
        // Per real component variance of A xi is sd^2 times the sampled fraction.
        let frac = s.pairs()[1].mask.count() as f64 / 8.0;
        let mut acc = 0.0;
        let trials = 200;
        for k in 0..trials {
            let (_, t) = s.batch(&[1], 0.1, &mut stream(1, k, 0)).unwrap();
            acc += t.zip_map(&t0, |a, b| a - b).sq_norm();
        }
        let per = acc / (trials as f64 * t0.len() as f64);
        assert!((per / (0.01 * frac) - 1.0).abs() < 0.05, "{per}");
    }

    #[test]
    fn split_is_seeded_and_disjoint() {
        let (t, v) = split_indices(50, 0.1, 3);
        assert_eq!(v.len(), 5);
        assert_eq!(t.len(), 45);
        assert!(v.iter().all(|i| !t.contains(i)));
        assert_eq!(split_indices(50, 0.1, 3), (t, v));
        assert_eq!(split_indices(1, 0.1, 0).1.len(), 0);
    }
}
