//! Primitive differentiable operations. Each forward has a matching hand-written backward.

pub mod activation;
pub mod conv;
pub mod linear;
pub mod loss;
pub mod norm;
pub mod sample;

use std::collections::BTreeMap;

use crate::tensor::Tensor;

pub use activation::{activation, activation_backward, relu, sigmoid, Activation};
pub use conv::{
    conv2d_backward, conv2d_backward_batch, conv2d_forward, conv2d_forward_batch, ConvCache,
    ConvGeometry, ConvGrads,
};
pub use linear::{fully_connected, fully_connected_backward, LinearGrads};
pub use loss::{softmax_cross_entropy, softmax_cross_entropy_batch, LossOutput};
pub use norm::{channel_norm_backward, channel_norm_forward, NormCache};
pub use sample::{
    bilinear_resize, bilinear_resize_backward, bilinear_sample, bilinear_sample_backward,
    SampleGrads, Tap,
};

/// A forward value together with gradients keyed by the name of what they differentiate.
#[derive(Debug, Clone)]
pub struct GradPair<T> {
    pub value: Tensor<T>,
    pub grads: BTreeMap<String, Tensor<T>>,
}
