//! Cartesian column sampling masks.
//!
//! Column indices are in centred (fft-shifted) order: index `D/2` is the
//! zero frequency. [`SamplingMask::freq_selected`] translates to the
//! unshifted layout produced by [`crate::num::fft2`].

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Strategy for the non-ACS columns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    /// Golden-ratio offset sequence.
    #[default]
    GoldenRatio,
    /// Evenly spaced columns.
    Equispaced,
    /// Uniformly random columns.
    Random,
}

/// Which k-space columns are acquired.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingMask {
    /// Number of columns `D` (image width).
    pub width: usize,
    /// Selected columns in centred order, ascending.
    pub selected: Vec<usize>,
    /// ACS block `[start, end)` in centred order.
    pub acs: (usize, usize),
    /// Nominal acceleration `R`.
    pub acceleration: f64,
}

fn target_count(width: usize, acceleration: f64, acs_width: usize) -> Result<usize> {
    if width == 0 {
        return Err(Error::InfeasibleMask("width must be positive".into()));
    }
    if !(acceleration >= 1.0) {
        return Err(Error::InfeasibleMask(format!(
            "acceleration {acceleration} must be >= 1"
        )));
    }
    let m = (width as f64 / acceleration).round() as usize;
    if m == 0 || acs_width > m || m > width {
        return Err(Error::InfeasibleMask(format!(
            "need acs {acs_width} <= round(D/R) = {m} <= D = {width}, and round(D/R) > 0"
        )));
    }
    Ok(m)
}

fn acs_block(width: usize, acs_width: usize) -> (usize, usize) {
    let start = width / 2 - acs_width / 2;
    (start, start + acs_width)
}

impl SamplingMask {
    /// Golden-ratio offset mask: centred ACS plus columns
    /// `floor(frac(j g + offset) D)`, `g = (sqrt 5 - 1) / 2`, for
    /// `j = 0, 1, ...`, skipping columns already taken.
    pub fn golden_ratio(
        width: usize,
        acceleration: f64,
        acs_width: usize,
        seed_offset: f64,
    ) -> Result<Self> {
        let m = target_count(width, acceleration, acs_width)?;
        let acs = acs_block(width, acs_width);
        let mut taken = vec![false; width];
        taken[acs.0..acs.1].iter_mut().for_each(|t| *t = true);
        let mut count = acs_width;
        let g = (5f64.sqrt() - 1.0) / 2.0;
        let mut j = 0u64;
        // The sequence is equidistributed, so every column is eventually hit.
        let limit = 1000 * width as u64 + 1000;
        while count < m {
            if j > limit {
                return Err(Error::InfeasibleMask(
                    "golden-ratio fill did not terminate".into(),
                ));
            }
            let f = (j as f64 * g + seed_offset).rem_euclid(1.0);
            let col = ((f * width as f64).floor() as usize).min(width - 1);
            if !taken[col] {
                taken[col] = true;
                count += 1;
            }
            j += 1;
        }
        Ok(Self::from_flags(width, &taken, acs, acceleration))
    }

    /// ACS plus evenly spaced columns.
    pub fn equispaced(width: usize, acceleration: f64, acs_width: usize) -> Result<Self> {
        let m = target_count(width, acceleration, acs_width)?;
        let acs = acs_block(width, acs_width);
        let mut taken = vec![false; width];
        taken[acs.0..acs.1].iter_mut().for_each(|t| *t = true);
        let mut count = acs_width;
        let mut step = (width as f64 / acceleration).max(1.0);
        while count < m {
            let mut c = 0.0;
            while c < width as f64 && count < m {
                let col = c as usize;
                if !taken[col] {
                    taken[col] = true;
                    count += 1;
                }
                c += step;
            }
            step = (step / 2.0).max(1.0);
        }
        Ok(Self::from_flags(width, &taken, acs, acceleration))
    }

    /// ACS plus uniformly random columns.
    pub fn random(width: usize, acceleration: f64, acs_width: usize, seed: u64) -> Result<Self> {
        let m = target_count(width, acceleration, acs_width)?;
        let acs = acs_block(width, acs_width);
        let mut taken = vec![false; width];
        taken[acs.0..acs.1].iter_mut().for_each(|t| *t = true);
        let mut free: Vec<usize> = (0..width).filter(|&c| !taken[c]).collect();
        free.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        for &c in free.iter().take(m - acs_width) {
            taken[c] = true;
        }
        Ok(Self::from_flags(width, &taken, acs, acceleration))
    }

    pub fn build(
        kind: MaskKind,
        width: usize,
        acceleration: f64,
        acs_width: usize,
        seed: u64,
    ) -> Result<Self> {
        match kind {
            MaskKind::GoldenRatio => {
                // Map the seed to an offset in [0, 1).
                let offset = (seed as f64 * 0.754_877_666_246_692_7).fract();
                Self::golden_ratio(width, acceleration, acs_width, offset)
            }
            MaskKind::Equispaced => Self::equispaced(width, acceleration, acs_width),
            MaskKind::Random => Self::random(width, acceleration, acs_width, seed),
        }
    }

    /// Every column acquired.
    pub fn full(width: usize) -> Self {
        Self {
            width,
            selected: (0..width).collect(),
            acs: (0, width),
            acceleration: 1.0,
        }
    }

    fn from_flags(width: usize, taken: &[bool], acs: (usize, usize), acceleration: f64) -> Self {
        Self {
            width,
            selected: (0..width).filter(|&c| taken[c]).collect(),
            acs,
            acceleration,
        }
    }

    /// Number of acquired columns `M`.
    pub fn count(&self) -> usize {
        self.selected.len()
    }

    /// Achieved acceleration `D / M`.
    pub fn effective_acceleration(&self) -> f64 {
        self.width as f64 / self.count() as f64
    }

    /// Per-column flags in centred order.
    pub fn centered_flags(&self) -> Vec<bool> {
        let mut f = vec![false; self.width];
        for &c in &self.selected {
            f[c] = true;
        }
        f
    }

    /// Per-column flags in unshifted DFT order.
    pub fn freq_selected(&self) -> Vec<bool> {
        let centred = self.centered_flags();
        (0..self.width)
            .map(|f| centred[(f + self.width / 2) % self.width])
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.selected.iter().any(|&c| c >= self.width) {
            return Err(Error::InfeasibleMask("column index out of range".into()));
        }
        let flags = self.centered_flags();
        if !(self.acs.0..self.acs.1).all(|c| c < self.width && flags[c]) {
            return Err(Error::InfeasibleMask("ACS block not fully selected".into()));
        }
        Ok(())
    }
}
