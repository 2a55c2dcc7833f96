//! Simulated multi-coil datasets and their on-disk layout.
//!
//! A dataset directory holds one subdirectory per sample (`sample_00000`,
//! ...) with `truth.fnt`, `y.fnt`, `u.fnt`, `maps.fnt` and `mask.json`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mri::mask::{MaskKind, SamplingMask};
use crate::mri::ops::{acquire, apply_a, coil_images, nullspace_project, zero_filled};
use crate::mri::stack::{CoilSensitivities, CoilStack, ComplexImage, StackRole};
use crate::mri::synth::{make_coil_maps, make_phantom};
use crate::num::io::{load, save_complex, DType};
use crate::num::tensor::ComplexTensor;

/// Parameters of the acquisition simulation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub height: usize,
    pub width: usize,
    pub coils: usize,
    pub acceleration: f64,
    pub acs: usize,
    pub noise_sd: f64,
    pub n_samples: usize,
    pub seed: u64,
    #[serde(default)]
    pub mask_kind: MaskKind,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            coils: 2,
            acceleration: 4.0,
            acs: 4,
            noise_sd: 0.0,
            n_samples: 100,
            seed: 0,
            mask_kind: MaskKind::GoldenRatio,
        }
    }
}

impl SimConfig {
    /// The mask shared by every sample of the dataset.
    pub fn mask(&self) -> Result<SamplingMask> {
        SamplingMask::build(
            self.mask_kind,
            self.width,
            self.acceleration,
            self.acs,
            self.seed,
        )
    }
}

/// One simulated acquisition.
#[derive(Clone, Debug)]
pub struct SimSample {
    pub image: ComplexImage,
    pub maps: CoilSensitivities,
    pub mask: SamplingMask,
    /// Fully sampled coil images `x`.
    pub truth: CoilStack,
    /// Zero-filled measurement `y`.
    pub y: CoilStack,
    /// Nullspace component `u = (I - A) x`.
    pub u: CoilStack,
}

/// Simulate sample `index` of a dataset. Seeds are derived from
/// `(cfg.seed, index)` so samples can be generated independently.
pub fn simulate_sample(cfg: &SimConfig, mask: &SamplingMask, index: usize) -> Result<SimSample> {
    let base = cfg.seed.wrapping_mul(1_000_003).wrapping_add(index as u64);
    let image = make_phantom(base, cfg.height, cfg.width)?;
    let maps = make_coil_maps(cfg.coils, cfg.height, cfg.width, base ^ 0x5eed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(base ^ 0x0157);
    let k = acquire(&image, &maps, mask, cfg.noise_sd, &mut rng)?;
    let y = zero_filled(&k, mask)?;
    let truth = coil_images(&image, &maps)?;
    let u = nullspace_project(&truth, mask)?;
    Ok(SimSample {
        image,
        maps,
        mask: mask.clone(),
        truth,
        y,
        u,
    })
}

/// Simulate the whole dataset in memory.
pub fn simulate(cfg: &SimConfig) -> Result<Vec<SimSample>> {
    let mask = cfg.mask()?;
    (0..cfg.n_samples)
        .map(|i| simulate_sample(cfg, &mask, i))
        .collect()
}

pub fn sample_dir_name(index: usize) -> String {
    format!("sample_{index:05}")
}

fn save_stack(dir: &Path, s: &CoilStack) -> Result<()> {
    save_complex(&dir.join(s.role().file_name()), s.data(), DType::Complex64)
}

fn load_stack(dir: &Path, role: StackRole) -> Result<CoilStack> {
    let t = load(&dir.join(role.file_name()))?.into_complex()?;
    CoilStack::new(t, role)
}

/// Write one sample directory.
pub fn write_sample(dir: &Path, s: &SimSample) -> Result<()> {
    fs::create_dir_all(dir)?;
    save_stack(dir, &s.truth)?;
    save_stack(dir, &s.y)?;
    save_stack(dir, &s.u)?;
    save_complex(&dir.join("maps.fnt"), s.maps.maps(), DType::Complex64)?;
    fs::write(
        dir.join("mask.json"),
        serde_json::to_string_pretty(&s.mask)?,
    )?;
    Ok(())
}

/// A sample read back from disk.
#[derive(Clone, Debug)]
pub struct StoredSample {
    pub truth: CoilStack,
    pub y: CoilStack,
    pub u: CoilStack,
    pub maps: CoilSensitivities,
    pub mask: SamplingMask,
}

/// Read one sample directory, checking that `u` lies in the nullspace.
pub fn read_sample(dir: &Path) -> Result<StoredSample> {
    let mask: SamplingMask = serde_json::from_str(&fs::read_to_string(dir.join("mask.json"))?)?;
    mask.validate()?;
    let truth = load_stack(dir, StackRole::Truth)?;
    let y = load_stack(dir, StackRole::ZeroFilled)?;
    let u = load_stack(dir, StackRole::Nullspace)?;
    let maps = CoilSensitivities::new(load(&dir.join("maps.fnt"))?.into_complex()?)?;
    truth.same_dims(&y)?;
    truth.same_dims(&u)?;
    // Stored in single precision: tolerate its roundoff, then project it
    // away so measured and unmeasured parts are exactly complementary.
    let u_leak = apply_a(&u, &mask)?.data().max_abs();
    let y_leak = nullspace_project(&y, &mask)?.data().max_abs();
    let tol = 1e-4 * u.data().max_abs().max(y.data().max_abs()).max(1.0);
    if u_leak > tol || y_leak > tol {
        return Err(Error::Format(format!(
            "{}: measured/nullspace split is inconsistent ({u_leak:e}, {y_leak:e})",
            dir.display()
        )));
    }
    let y = apply_a(&y, &mask)?;
    let u = nullspace_project(&u, &mask)?;
    Ok(StoredSample {
        truth,
        y,
        u,
        maps,
        mask,
    })
}

/// Sorted sample subdirectories of a dataset directory.
pub fn list_samples(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.is_dir()
                && p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("sample_"))
        })
        .collect();
    dirs.sort();
    Ok(dirs)
}

/// Convert a stored sample into the in-memory form (the phantom itself is
/// recovered by SENSE combining the truth stack).
pub fn stored_to_sim(s: StoredSample) -> Result<SimSample> {
    let image = crate::mri::ops::coil_combine_sense(&s.truth, &s.maps)?;
    Ok(SimSample {
        image,
        maps: s.maps,
        mask: s.mask,
        truth: s.truth,
        y: s.y,
        u: s.u,
    })
}

pub fn empty_stack_like(s: &CoilStack, role: StackRole) -> CoilStack {
    let (c, h, w) = s.dims();
    CoilStack::new(ComplexTensor::zeros(&[c, h, w]), role).expect("rank 3")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mri::ops::measurement_residual;

    fn small() -> SimConfig {
        SimConfig {
            height: 16,
            width: 16,
            coils: 2,
            n_samples: 3,
            ..SimConfig::default()
        }
    }

    #[test]
    fn simulated_sample_is_consistent() {
        let cfg = small();
        let mask = cfg.mask().unwrap();
        let s = simulate_sample(&cfg, &mask, 1).unwrap();
        assert!(measurement_residual(&s.y, &mask).unwrap() < 1e-12);
        assert!(apply_a(&s.u, &mask).unwrap().data().max_abs() < 1e-12);
        let back = s.u.add(&s.y).unwrap();
        assert!(back.data().max_abs_diff(s.truth.data()) < 1e-12);
    }

    #[test]
    fn write_read_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small();
        let samples = simulate(&cfg).unwrap();
        for (i, s) in samples.iter().enumerate() {
            write_sample(&dir.path().join(sample_dir_name(i)), s).unwrap();
        }
        let listed = list_samples(dir.path()).unwrap();
        assert_eq!(listed.len(), 3);
        let back = read_sample(&listed[2]).unwrap();
        assert_eq!(back.mask, samples[2].mask);
        assert!(back.y.data().max_abs_diff(samples[2].y.data()) < 1e-6);
        assert_eq!(back.u.role(), StackRole::Nullspace);
    }

    #[test]
    fn leaking_target_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small();
        let mut s = simulate(&cfg).unwrap().remove(0);
        s.u = s.truth.clone().with_role(StackRole::Nullspace);
        write_sample(dir.path(), &s).unwrap();
        assert!(read_sample(dir.path()).is_err());
    }
}
