pub mod error;
pub mod flow;
pub mod metrics;
pub mod mri;
pub mod num;
pub mod posterior;
pub mod train;

pub use error::{Error, Result};
