use crate::error::{dim_err, Result};
use crate::tensor::{gemm, Real, Tensor, Transpose};

#[derive(Debug, Clone)]
pub struct LinearGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

fn check<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<(usize, usize)> {
    let (m, n) = match *weight.shape() {
        [m, n] => (m, n),
        _ => return Err(dim_err!("fc weight must be [M,N], got {:?}", weight.shape())),
    };
    if input.shape() != [n] {
        return Err(dim_err!("fc input {:?} does not match weight {:?}", input.shape(), weight.shape()));
    }
    if bias.shape() != [m] {
        return Err(dim_err!("fc bias {:?} does not match {m} outputs", bias.shape()));
    }
    Ok((m, n))
}

/// `y = W x + b` for `x: [N]`, `W: [M, N]`, `b: [M]`.
pub fn fully_connected<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n) = check(input, weight, bias)?;
    let mut out = bias.data().to_vec();
    gemm(
        Transpose::No,
        Transpose::No,
        m,
        1,
        n,
        T::one(),
        weight.data(),
        input.data(),
        T::one(),
        &mut out,
    );
    Tensor::from_vec(&[m], out)
}

pub fn fully_connected_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<LinearGrads<T>> {
    let (m, n) = check(input, weight, bias)?;
    if grad_out.shape() != [m] {
        return Err(dim_err!("fc grad {:?} does not match {m} outputs", grad_out.shape()));
    }
    let g = grad_out.data();
    let x = input.data();
    let gw = Tensor::from_fn(&[m, n], |i| g[i / n] * x[i % n]);
    let mut gx = vec![T::zero(); n];
    gemm(
        Transpose::Yes,
        Transpose::No,
        n,
        1,
        m,
        T::one(),
        weight.data(),
        g,
        T::zero(),
        &mut gx,
    );
    Ok(LinearGrads {
        input: Tensor::from_vec(&[n], gx)?,
        weight: gw,
        bias: grad_out.clone(),
    })
}
