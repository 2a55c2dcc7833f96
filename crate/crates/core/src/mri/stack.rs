use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::num::tensor::{ComplexTensor, Tensor};

/// A single complex image `[H, W]`.
pub type ComplexImage = ComplexTensor;

/// What a [`CoilStack`] holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StackRole {
    /// Ground-truth coil images `x`.
    Truth,
    /// Zero-filled coil images `y`.
    ZeroFilled,
    /// Nullspace component `u`.
    Nullspace,
    /// Masked k-space `k`.
    KSpace,
    /// A reconstruction or posterior sample.
    Estimate,
}

impl StackRole {
    /// Canonical file name inside a sample directory.
    pub fn file_name(self) -> &'static str {
        match self {
            StackRole::Truth => "truth.fnt",
            StackRole::ZeroFilled => "y.fnt",
            StackRole::Nullspace => "u.fnt",
            StackRole::KSpace => "k.fnt",
            StackRole::Estimate => "estimate.fnt",
        }
    }

    pub fn from_file_name(name: &str) -> Option<Self> {
        [
            StackRole::Truth,
            StackRole::ZeroFilled,
            StackRole::Nullspace,
            StackRole::KSpace,
            StackRole::Estimate,
        ]
        .into_iter()
        .find(|r| r.file_name() == name)
    }
}

/// `C` complex coil images of a common size, stored `[C, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CoilStack {
    data: ComplexTensor,
    role: StackRole,
}

impl CoilStack {
    pub fn new(data: ComplexTensor, role: StackRole) -> Result<Self> {
        if data.shape().len() != 3 {
            return Err(Error::Shape(format!(
                "coil stack must be [C, H, W], got {:?}",
                data.shape()
            )));
        }
        Ok(Self { data, role })
    }

    pub fn zeros(coils: usize, h: usize, w: usize, role: StackRole) -> Self {
        Self {
            data: ComplexTensor::zeros(&[coils, h, w]),
            role,
        }
    }

    pub fn role(&self) -> StackRole {
        self.role
    }

    pub fn with_role(mut self, role: StackRole) -> Self {
        self.role = role;
        self
    }

    pub fn data(&self) -> &ComplexTensor {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut ComplexTensor {
        &mut self.data
    }

    pub fn into_data(self) -> ComplexTensor {
        self.data
    }

    pub fn coils(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.coils(), self.height(), self.width())
    }

    pub fn same_dims(&self, other: &CoilStack) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::Shape(format!(
                "coil stacks {:?} and {:?} differ",
                self.dims(),
                other.dims()
            )));
        }
        Ok(())
    }

    /// Real view with `2C` channels: channel `2c` is `Re x_c`, `2c + 1` is
    /// `Im x_c`.
    pub fn to_channels(&self) -> Tensor {
        let (c, h, w) = self.dims();
        let hw = h * w;
        let mut out = vec![0.0; 2 * c * hw];
        for (ci, plane) in self.data.data().chunks(hw).enumerate() {
            for (p, v) in plane.iter().enumerate() {
                out[(2 * ci) * hw + p] = v.re;
                out[(2 * ci + 1) * hw + p] = v.im;
            }
        }
        Tensor::new(vec![2 * c, h, w], out).expect("channel layout")
    }

    /// Inverse of [`CoilStack::to_channels`]; accepts `[2C, H, W]` or a
    /// batch-1 `[1, 2C, H, W]`.
    pub fn from_channels(t: &Tensor, role: StackRole) -> Result<Self> {
        let s = t.shape();
        let (c2, h, w) = match s.len() {
            3 => (s[0], s[1], s[2]),
            4 if s[0] == 1 => (s[1], s[2], s[3]),
            _ => {
                return Err(Error::Shape(format!(
                    "expected [2C, H, W] channels, got {s:?}"
                )))
            }
        };
        if c2 % 2 != 0 {
            return Err(Error::Shape(format!("odd channel count {c2}")));
        }
        let hw = h * w;
        let d = t.data();
        let data = (0..c2 / 2)
            .flat_map(|ci| {
                (0..hw).map(move |p| {
                    num_complex::Complex64::new(d[(2 * ci) * hw + p], d[(2 * ci + 1) * hw + p])
                })
            })
            .collect();
        Self::new(ComplexTensor::new(vec![c2 / 2, h, w], data)?, role)
    }

    pub fn scale(&self, f: f64) -> Self {
        Self {
            data: self.data.map(|v| v * f),
            role: self.role,
        }
    }

    pub fn add(&self, other: &CoilStack) -> Result<Self> {
        self.same_dims(other)?;
        Ok(Self {
            data: self.data.zip_map(&other.data, |a, b| a + b),
            role: self.role,
        })
    }

    pub fn sub(&self, other: &CoilStack) -> Result<Self> {
        self.same_dims(other)?;
        Ok(Self {
            data: self.data.zip_map(&other.data, |a, b| a - b),
            role: self.role,
        })
    }
}

/// Coil sensitivity maps `S_c`, stored `[C, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CoilSensitivities {
    maps: ComplexTensor,
}

impl CoilSensitivities {
    pub fn new(maps: ComplexTensor) -> Result<Self> {
        if maps.shape().len() != 3 {
            return Err(Error::Shape(format!(
                "sensitivities must be [C, H, W], got {:?}",
                maps.shape()
            )));
        }
        Ok(Self { maps })
    }

    pub fn maps(&self) -> &ComplexTensor {
        &self.maps
    }

    pub fn coils(&self) -> usize {
        self.maps.shape()[0]
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.maps.shape();
        (s[0], s[1], s[2])
    }

    /// Identity sensitivities for `C = 1`.
    pub fn single_coil(h: usize, w: usize) -> Self {
        let maps = ComplexTensor::new(
            vec![1, h, w],
            vec![num_complex::Complex64::new(1.0, 0.0); h * w],
        )
        .expect("unit map");
        Self { maps }
    }

    /// Largest pixelwise deviation of `sum_c |S_c|^2` from one.
    pub fn normalization_error(&self) -> f64 {
        let (c, h, w) = self.dims();
        let hw = h * w;
        let d = self.maps.data();
        (0..hw)
            .map(|p| {
                let s: f64 = (0..c).map(|ci| d[ci * hw + p].norm_sqr()).sum();
                (s - 1.0).abs()
            })
            .fold(0.0, f64::max)
    }
}
