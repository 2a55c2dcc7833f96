//! Conditional normalizing flow over real `2C`-channel coil images and its
//! conditioning network.

pub mod checkpoint;
pub mod condnet;
pub mod layers;
pub mod model;
pub mod params;


pub use checkpoint::{load_model, save_model, Manifest};
pub use condnet::{CondNet, CondNetSpec};
pub use layers::LayerSpec;
pub use model::{FlowModel, FlowSpec};
pub use params::{Bound, ParamStore, Pid};
