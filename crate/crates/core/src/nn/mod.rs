//! Minimal CPU autodiff for partial-convolution networks.

mod adam;
pub mod checkpoint;
mod conv;
mod graph;
mod params;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use conv::ConvGeom;
pub use graph::{Graph, NodeId, PartialConv};
pub use params::{xavier_uniform, Param, ParamId, ParamStore};
pub use tensor::{Real, Tensor};
