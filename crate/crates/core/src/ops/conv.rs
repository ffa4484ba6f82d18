//! 2D convolution lowered to im2col + GEMM.
//!
//! Batched kernels take `[N, C, H, W]`; the single-sample entry points wrap them with `N = 1`.
//! Column matrices are `[C_in * K, N * P]` with row `c * K + tap` and column `n * P + pixel`,
//! which matches the flattened weight layout `[C_out, C_in, k_h, k_w]`.

use crate::error::{dim_err, Error, Result};
use crate::tensor::{gemm, Real, Tensor, Transpose};

/// Kernel extent, stride, padding and dilation of a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConvGeometry {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvGeometry {
    pub fn new(kh: usize, kw: usize, stride: usize, padding: usize, dilation: usize) -> Result<Self> {
        if kh == 0 || kw == 0 || stride == 0 || dilation == 0 {
            return Err(Error::Config(format!(
                "invalid conv geometry k={kh}x{kw} stride={stride} dilation={dilation}"
            )));
        }
        Ok(ConvGeometry {
            kh,
            kw,
            stride,
            padding,
            dilation,
        })
    }

    /// Square kernel with unit dilation.
    pub fn square(k: usize, stride: usize, padding: usize) -> Self {
        ConvGeometry {
            kh: k,
            kw: k,
            stride,
            padding,
            dilation: 1,
        }
    }

    /// Number of kernel taps `K = k_h * k_w`.
    #[inline]
    pub fn taps(&self) -> usize {
        self.kh * self.kw
    }

    /// Tap offsets relative to the kernel centre, row-major, as `[dy, dx]`.
    ///
    /// For a 3x3 kernel this is `[-1,-1], [-1,0], ..., [1,1]`.
    pub fn grid(&self) -> Vec<[isize; 2]> {
        let cy = (self.kh as isize - 1) / 2;
        let cx = (self.kw as isize - 1) / 2;
        let dil = self.dilation as isize;
        (0..self.kh as isize)
            .flat_map(|i| (0..self.kw as isize).map(move |j| [(i - cy) * dil, (j - cx) * dil]))
            .collect()
    }

    /// Output extents `floor((h + 2p - dil*(k-1) - 1)/s) + 1`.
    pub fn output_extent(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let eff_h = self.dilation * (self.kh - 1) + 1;
        let eff_w = self.dilation * (self.kw - 1) + 1;
        let ph = h + 2 * self.padding;
        let pw = w + 2 * self.padding;
        if ph < eff_h || pw < eff_w {
            return Err(dim_err!(
                "input {h}x{w} with padding {} too small for {}x{} kernel (dilation {})",
                self.padding,
                self.kh,
                self.kw,
                self.dilation
            ));
        }
        Ok(((ph - eff_h) / self.stride + 1, (pw - eff_w) / self.stride + 1))
    }

    /// Input-space position sampled by `tap` for the output pixel `(oy, ox)`, before any offset.
    #[inline]
    pub fn tap_origin(&self, oy: usize, ox: usize, tap: usize) -> (isize, isize) {
        let ki = tap / self.kw;
        let kj = tap % self.kw;
        (
            (oy * self.stride) as isize - self.padding as isize + (ki * self.dilation) as isize,
            (ox * self.stride) as isize - self.padding as isize + (kj * self.dilation) as isize,
        )
    }
}

/// Everything the backward pass needs from a convolution forward.
#[derive(Debug, Clone)]
pub struct ConvCache<T> {
    pub geom: ConvGeometry,
    pub input_shape: [usize; 4],
    pub out_hw: (usize, usize),
    pub cols: Vec<T>,
    pub has_bias: bool,
}

#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

/// Writes the columns of one sample into `cols` (row stride `ld`, column offset `col0`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn im2col<T: Real>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    geom: &ConvGeometry,
    oh: usize,
    ow: usize,
    cols: &mut [T],
    ld: usize,
    col0: usize,
) {
    let k = geom.taps();
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for tap in 0..k {
            let row = &mut cols[(ch * k + tap) * ld + col0..(ch * k + tap) * ld + col0 + oh * ow];
            for oy in 0..oh {
                let (iy, ix0) = geom.tap_origin(oy, 0, tap);
                let dst = &mut row[oy * ow..(oy + 1) * ow];
                if iy < 0 || iy >= h as isize {
                    dst.fill(T::zero());
                    continue;
                }
                let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                for (ox, d) in dst.iter_mut().enumerate() {
                    let ix = ix0 + (ox * geom.stride) as isize;
                    *d = if ix >= 0 && ix < w as isize {
                        src[ix as usize]
                    } else {
                        T::zero()
                    };
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates column gradients back into one sample's image gradient.
#[allow(clippy::too_many_arguments)]
pub(crate) fn col2im<T: Real>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    geom: &ConvGeometry,
    oh: usize,
    ow: usize,
    ld: usize,
    col0: usize,
    gx: &mut [T],
) {
    let k = geom.taps();
    for ch in 0..c {
        let plane = &mut gx[ch * h * w..(ch + 1) * h * w];
        for tap in 0..k {
            let row = &cols[(ch * k + tap) * ld + col0..(ch * k + tap) * ld + col0 + oh * ow];
            for oy in 0..oh {
                let (iy, ix0) = geom.tap_origin(oy, 0, tap);
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                for (ox, &g) in row[oy * ow..(oy + 1) * ow].iter().enumerate() {
                    let ix = ix0 + (ox * geom.stride) as isize;
                    if ix >= 0 && ix < w as isize {
                        dst[ix as usize] += g;
                    }
                }
            }
        }
    }
}

/// `[C, N, P]` (GEMM output) to `[N, C, P]` (activation layout).
pub(crate) fn cnp_to_ncp<T: Real>(src: &[T], c: usize, n: usize, p: usize) -> Vec<T> {
    if n == 1 {
        return src.to_vec();
    }
    let mut out = vec![T::zero(); c * n * p];
    for ci in 0..c {
        for ni in 0..n {
            out[(ni * c + ci) * p..(ni * c + ci + 1) * p]
                .copy_from_slice(&src[(ci * n + ni) * p..(ci * n + ni + 1) * p]);
        }
    }
    out
}

/// `[N, C, P]` to `[C, N, P]`.
pub(crate) fn ncp_to_cnp<T: Real>(src: &[T], n: usize, c: usize, p: usize) -> Vec<T> {
    if n == 1 {
        return src.to_vec();
    }
    let mut out = vec![T::zero(); c * n * p];
    for ni in 0..n {
        for ci in 0..c {
            out[(ci * n + ni) * p..(ci * n + ni + 1) * p]
                .copy_from_slice(&src[(ni * c + ci) * p..(ni * c + ci + 1) * p]);
        }
    }
    out
}

pub(crate) fn check_weight<T: Real>(
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    c_in: usize,
    geom: &ConvGeometry,
) -> Result<usize> {
    let (c_out, wc, kh, kw) = weight.nchw()?;
    if wc != c_in || kh != geom.kh || kw != geom.kw {
        return Err(dim_err!(
            "weight {:?} incompatible with {} input channels and {}x{} kernel",
            weight.shape(),
            c_in,
            geom.kh,
            geom.kw
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [c_out] {
            return Err(dim_err!("bias {:?} does not match {} output channels", b.shape(), c_out));
        }
    }
    Ok(c_out)
}

/// Multiplies flattened weights with a column matrix and adds bias; returns `[N, C_out, oh, ow]`.
pub(crate) fn apply_columns<T: Real>(
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    cols: &[T],
    n: usize,
    oh: usize,
    ow: usize,
) -> Tensor<T> {
    let c_out = weight.dim(0);
    let ck = weight.len() / c_out;
    let np = n * oh * ow;
    let mut out = vec![T::zero(); c_out * np];
    gemm(
        Transpose::No,
        Transpose::No,
        c_out,
        np,
        ck,
        T::one(),
        weight.data(),
        cols,
        T::zero(),
        &mut out,
    );
    if let Some(b) = bias {
        for (row, &bv) in out.chunks_exact_mut(np).zip(b.data()) {
            row.iter_mut().for_each(|v| *v += bv);
        }
    }
    Tensor::from_vec(&[n, c_out, oh, ow], cnp_to_ncp(&out, c_out, n, oh * ow)).unwrap()
}

/// Gradients of `Y = W * cols + b` given `dY` in `[N, C_out, P]` layout.
///
/// Returns `(dW, db, dcols)`.
pub(crate) fn columns_backward<T: Real>(
    weight: &Tensor<T>,
    cols: &[T],
    grad_out: &Tensor<T>,
    want_bias: bool,
) -> (Tensor<T>, Option<Tensor<T>>, Vec<T>) {
    let (n, c_out, oh, ow) = grad_out.nchw().expect("rank-4 grad");
    let p = oh * ow;
    let np = n * p;
    let ck = weight.len() / c_out;
    let gy = ncp_to_cnp(grad_out.data(), n, c_out, p);
    let mut gw = Tensor::zeros(weight.shape());
    gemm(
        Transpose::No,
        Transpose::Yes,
        c_out,
        ck,
        np,
        T::one(),
        &gy,
        cols,
        T::zero(),
        gw.data_mut(),
    );
    let gb = want_bias.then(|| {
        Tensor::from_vec(&[c_out], gy.chunks_exact(np).map(|r| r.iter().copied().sum()).collect())
            .unwrap()
    });
    let mut gcols = vec![T::zero(); ck * np];
    gemm(
        Transpose::Yes,
        Transpose::No,
        ck,
        np,
        c_out,
        T::one(),
        weight.data(),
        &gy,
        T::zero(),
        &mut gcols,
    );
    (gw, gb, gcols)
}

/// Batched forward over `[N, C_in, H, W]`.
pub fn conv2d_forward_batch<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geom: &ConvGeometry,
) -> Result<(Tensor<T>, ConvCache<T>)> {
    let (n, c, h, w) = input.nchw()?;
    check_weight(weight, bias, c, geom)?;
    input.ensure_finite("conv2d input")?;
    let (oh, ow) = geom.output_extent(h, w)?;
    let k = geom.taps();
    let p = oh * ow;
    let ld = n * p;
    let mut cols = vec![T::zero(); c * k * ld];
    for ni in 0..n {
        im2col(
            &input.data()[ni * c * h * w..(ni + 1) * c * h * w],
            c,
            h,
            w,
            geom,
            oh,
            ow,
            &mut cols,
            ld,
            ni * p,
        );
    }
    let out = apply_columns(weight, bias, &cols, n, oh, ow);
    Ok((
        out,
        ConvCache {
            geom: *geom,
            input_shape: [n, c, h, w],
            out_hw: (oh, ow),
            cols,
            has_bias: bias.is_some(),
        },
    ))
}

pub fn conv2d_backward_batch<T: Real>(
    cache: &ConvCache<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let [n, c, h, w] = cache.input_shape;
    let (oh, ow) = cache.out_hw;
    let c_out = weight.dim(0);
    if grad_out.shape() != [n, c_out, oh, ow] {
        return Err(dim_err!(
            "grad_output {:?} does not match forward output [{n}, {c_out}, {oh}, {ow}]",
            grad_out.shape()
        ));
    }
    if cache.cols.is_empty() {
        return Err(Error::State("conv2d backward called without a forward cache".into()));
    }
    let (gw, gb, gcols) = columns_backward(weight, &cache.cols, grad_out, cache.has_bias);
    let p = oh * ow;
    let mut gx = Tensor::zeros(&[n, c, h, w]);
    for ni in 0..n {
        col2im(
            &gcols,
            c,
            h,
            w,
            &cache.geom,
            oh,
            ow,
            n * p,
            ni * p,
            &mut gx.data_mut()[ni * c * h * w..(ni + 1) * c * h * w],
        );
    }
    Ok(ConvGrads {
        input: gx,
        weight: gw,
        bias: gb,
    })
}

/// `Y(p) = sum_i W_i . X(p + d_i)` over `[C_in, h, w]` with zero padding.
pub fn conv2d_forward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geom: &ConvGeometry,
) -> Result<(Tensor<T>, ConvCache<T>)> {
    input.chw()?;
    let (out, cache) = conv2d_forward_batch(&input.clone().unsqueeze0(), weight, bias, geom)?;
    Ok((out.squeeze0()?, cache))
}

/// Single-sample backward; `grad_output` is `[C_out, h', w']`.
pub fn conv2d_backward<T: Real>(
    cache: &ConvCache<T>,
    weight: &Tensor<T>,
    grad_output: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    grad_output.chw()?;
    let g = conv2d_backward_batch(cache, weight, &grad_output.clone().unsqueeze0())?;
    Ok(ConvGrads {
        input: g.input.squeeze0()?,
        weight: g.weight,
        bias: g.bias,
    })
}
