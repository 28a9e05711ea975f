//! A small differentiable compute core and the segmentation network built on it.

pub mod checkpoint;
pub mod network;
pub mod ops;
pub mod tensor;
pub mod train;

pub use network::{image_to_tensor, NetworkConfig, NetworkModel, Param, TrainingMeta};
pub use tensor::Tensor;
pub use train::{train, TrainConfig, TrainReport, TrainingSample};
