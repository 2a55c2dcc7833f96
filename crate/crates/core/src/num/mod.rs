//! Numerical substrate: tensors, unitary FFT, reverse-mode autodiff, Adam,
//! orthogonal initialization and the binary tensor format.

pub mod adam;
pub mod fft;
pub mod io;
pub mod ortho;
pub mod tape;
pub mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use fft::{fft2, ifft2};
pub use ortho::rand_orthogonal;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{ComplexTensor, Tensor};
