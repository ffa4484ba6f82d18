use crate::error::Result;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn relu<T: Real>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        T::zero()
    }
}

pub fn activation<T: Real>(kind: Activation, input: &Tensor<T>) -> Tensor<T> {
    match kind {
        Activation::Relu => input.map(relu),
        Activation::Sigmoid => input.map(sigmoid),
    }
}

/// Gradient with respect to the input given the forward input and upstream gradient.
///
/// The ReLU derivative at exactly zero is taken as 0.
pub fn activation_backward<T: Real>(kind: Activation, input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    input.check_same_shape(grad_out)?;
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| match kind {
            Activation::Relu => {
                if x > T::zero() {
                    g
                } else {
                    T::zero()
                }
            }
            Activation::Sigmoid => {
                let s = sigmoid(x);
                g * s * (T::one() - s)
            }
        })
        .collect();
    Tensor::from_vec(input.shape(), data)
}
