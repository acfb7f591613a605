//! Hand-differentiated layers and the fixed classifier stack.

pub mod layers;
pub mod network;

pub use layers::DropoutMode;
pub use network::{
    ForwardCache, Gradients, LayerSpec, Mode, Network, NetworkConfig, NormStats, Params, INPUT_HEIGHT,
    INPUT_WIDTH, PARAM_NAMES,
};
