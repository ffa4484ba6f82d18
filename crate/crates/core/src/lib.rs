//! Spatial-information-guided convolution (S-Conv) and a toy RGBD segmentation network.
//!
//! The crate is organised bottom-up: [`tensor`] and [`ops`] hold the dense container and
//! primitive differentiable kernels, [`sconv`] the guided convolution itself, [`net`] the
//! segmentation model, and [`train`], [`metrics`], [`data`], [`geometry`] the harness around it.

pub mod error;
pub mod ops;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{DType, LabelMap, Real, Tensor};
pub mod layers;
pub mod sconv;
pub mod gradcheck;
pub mod geometry;
pub mod metrics;
pub mod net;
pub mod data;
pub mod train;
pub mod bench;
