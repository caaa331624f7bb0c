//! Numeric substrate: tensors, a reverse-mode tape, 1-D convolution kernels
//! and the RMSProp optimizer with weight clipping.

pub mod layers;
pub mod optim;
pub mod params;
pub mod tape;
mod tensor;

pub use layers::{conv1d_forward, upsample_linear, Activation, ConvLayerSpec};
pub use optim::{clip_params, RmsProp};
pub use params::{Layer, LayerKind, NetworkParams, ParamBinding};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
