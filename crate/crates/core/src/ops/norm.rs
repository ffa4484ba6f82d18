//! Per-sample, per-channel normalisation with a learned scale and shift.
//!
//! Statistics come from each sample's own spatial extent, so the layer behaves identically in
//! train and eval mode and does not depend on the batch composition.

use crate::error::{dim_err, Result};
use crate::tensor::{Real, Tensor};

pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct NormCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
}

pub fn channel_norm_forward<T: Real>(
    x: &Tensor<T>,
    scale: &Tensor<T>,
    shift: &Tensor<T>,
) -> Result<(Tensor<T>, NormCache<T>)> {
    let (n, c, h, w) = x.nchw()?;
    if scale.shape() != [c] || shift.shape() != [c] {
        return Err(dim_err!("norm params do not match {c} channels"));
    }
    let hw = h * w;
    let inv_hw = T::one() / T::lit(hw as f64);
    let eps = T::lit(NORM_EPS);
    let mut xhat = Tensor::zeros(x.shape());
    let mut y = Tensor::zeros(x.shape());
    let mut inv_std = Vec::with_capacity(n * c);
    for nc in 0..n * c {
        let ch = nc % c;
        let src = &x.data()[nc * hw..(nc + 1) * hw];
        let mean = src.iter().copied().sum::<T>() * inv_hw;
        let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_hw;
        let is = T::one() / (var + eps).sqrt();
        inv_std.push(is);
        let (g, b) = (scale.data()[ch], shift.data()[ch]);
        let xh = &mut xhat.data_mut()[nc * hw..(nc + 1) * hw];
        for (d, &v) in xh.iter_mut().zip(src) {
            *d = (v - mean) * is;
        }
        for (o, &v) in y.data_mut()[nc * hw..(nc + 1) * hw].iter_mut().zip(xh.iter()) {
            *o = g * v + b;
        }
    }
    Ok((y, NormCache { xhat, inv_std }))
}

/// Returns `(dx, dscale, dshift)`.
pub fn channel_norm_backward<T: Real>(
    cache: &NormCache<T>,
    scale: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = grad_out.nchw()?;
    cache.xhat.check_same_shape(grad_out)?;
    let hw = h * w;
    let inv_hw = T::one() / T::lit(hw as f64);
    let mut gx = Tensor::zeros(grad_out.shape());
    let mut gs = Tensor::zeros(&[c]);
    let mut gb = Tensor::zeros(&[c]);
    for nc in 0..n * c {
        let ch = nc % c;
        let g = &grad_out.data()[nc * hw..(nc + 1) * hw];
        let xh = &cache.xhat.data()[nc * hw..(nc + 1) * hw];
        let sum_g: T = g.iter().copied().sum();
        let sum_gx: T = g.iter().zip(xh).map(|(&a, &b)| a * b).sum();
        gs.data_mut()[ch] += sum_gx;
        gb.data_mut()[ch] += sum_g;
        let k = scale.data()[ch] * cache.inv_std[nc];
        let mg = sum_g * inv_hw;
        let mgx = sum_gx * inv_hw;
        for ((d, &gi), &xi) in gx.data_mut()[nc * hw..(nc + 1) * hw].iter_mut().zip(g).zip(xh) {
            *d = k * (gi - mg - xi * mgx);
        }
    }
    Ok((gx, gs, gb))
}
