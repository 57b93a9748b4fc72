//! Convolutional network: tensor kernels, the segmentation model and checkpoints.

pub mod checkpoint;
pub mod network;
pub mod ops;
pub mod scalar;

pub use network::{
    architecture, receptive_halo, stack_halo, volume_tensor, ForwardTrace, Gradients, Layer, LayerGrad, LayerKind,
    NetworkConfig, NetworkParams,
};
pub use ops::Tensor;
pub use scalar::Scalar;
