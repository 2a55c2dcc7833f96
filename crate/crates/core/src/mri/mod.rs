//! Multi-coil MRI acquisition model: phantoms, coil maps, masks and the
//! linear operators around the forward projector `A`.

pub mod dataset;
pub mod mask;
pub mod ops;
pub mod pgm;
pub mod stack;
pub mod synth;

pub use mask::{MaskKind, SamplingMask};
pub use ops::{
    acquire, apply_a, coil_combine_rss, coil_combine_sense, coil_images, data_consistency,
    denormalize_stack, gather_unmeasured, measurement_residual, normalize_stack, nullspace_project,
    scatter_unmeasured, unmeasured_dim, zero_filled,
};
pub use stack::{CoilSensitivities, CoilStack, ComplexImage, StackRole};
pub use synth::{make_coil_maps, make_phantom};
