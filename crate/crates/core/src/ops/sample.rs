//! Bilinear point sampling (zero outside the map) and bilinear resizing (align-corners false).

use crate::error::{dim_err, Result};
use crate::tensor::{Real, Tensor};

/// The four-neighbour stencil of a fractional position `(y, x)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tap<T> {
    pub y0: isize,
    pub x0: isize,
    pub ly: T,
    pub lx: T,
}

impl<T: Real> Tap<T> {
    #[inline]
    pub fn at(y: T, x: T) -> Self {
        let fy = y.floor();
        let fx = x.floor();
        Tap {
            y0: fy.to_isize().unwrap_or(isize::MIN / 2),
            x0: fx.to_isize().unwrap_or(isize::MIN / 2),
            ly: y - fy,
            lx: x - fx,
        }
    }

    /// Exact integer position; weights are `(1, 0, 0, 0)`.
    #[inline]
    pub fn integer(y: isize, x: isize) -> Self {
        Tap {
            y0: y,
            x0: x,
            ly: T::zero(),
            lx: T::zero(),
        }
    }

    #[inline]
    fn corner(plane: &[T], h: usize, w: usize, y: isize, x: isize) -> T {
        if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
            plane[y as usize * w + x as usize]
        } else {
            T::zero()
        }
    }

    /// Interpolated value of one `h x w` plane; corners outside the plane read zero.
    #[inline]
    pub fn sample(&self, plane: &[T], h: usize, w: usize) -> T {
        let (y0, x0) = (self.y0, self.x0);
        if y0 >= 0 && x0 >= 0 && (y0 as usize) + 1 < h && (x0 as usize) + 1 < w {
            let i = y0 as usize * w + x0 as usize;
            let (a, b, c, d) = (plane[i], plane[i + 1], plane[i + w], plane[i + w + 1]);
            let hy = T::one() - self.ly;
            let hx = T::one() - self.lx;
            return hy * hx * a + hy * self.lx * b + self.ly * hx * c + self.ly * self.lx * d;
        }
        if y0 < -1 || x0 < -1 || y0 >= h as isize || x0 >= w as isize {
            return T::zero();
        }
        let hy = T::one() - self.ly;
        let hx = T::one() - self.lx;
        hy * hx * Self::corner(plane, h, w, y0, x0)
            + hy * self.lx * Self::corner(plane, h, w, y0, x0 + 1)
            + self.ly * hx * Self::corner(plane, h, w, y0 + 1, x0)
            + self.ly * self.lx * Self::corner(plane, h, w, y0 + 1, x0 + 1)
    }

    /// Partial derivatives `(d/dy, d/dx)` of [`Tap::sample`] with respect to the position.
    #[inline]
    pub fn position_grad(&self, plane: &[T], h: usize, w: usize) -> (T, T) {
        let (y0, x0) = (self.y0, self.x0);
        if y0 < -1 || x0 < -1 || y0 >= h as isize || x0 >= w as isize {
            return (T::zero(), T::zero());
        }
        let a = Self::corner(plane, h, w, y0, x0);
        let b = Self::corner(plane, h, w, y0, x0 + 1);
        let c = Self::corner(plane, h, w, y0 + 1, x0);
        let d = Self::corner(plane, h, w, y0 + 1, x0 + 1);
        let hy = T::one() - self.ly;
        let hx = T::one() - self.lx;
        (hx * (c - a) + self.lx * (d - b), hy * (b - a) + self.ly * (d - c))
    }

    /// Accumulates `g * d(sample)/d(plane)` into `grad_plane`.
    #[inline]
    pub fn scatter(&self, g: T, grad_plane: &mut [T], h: usize, w: usize) {
        let (y0, x0) = (self.y0, self.x0);
        let hy = T::one() - self.ly;
        let hx = T::one() - self.lx;
        let mut put = |y: isize, x: isize, wt: T| {
            if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                grad_plane[y as usize * w + x as usize] += g * wt;
            }
        };
        put(y0, x0, hy * hx);
        put(y0, x0 + 1, hy * self.lx);
        put(y0 + 1, x0, self.ly * hx);
        put(y0 + 1, x0 + 1, self.ly * self.lx);
    }
}

/// Samples every channel of `[C, h, w]` at column `x`, row `y`.
pub fn bilinear_sample<T: Real>(map: &Tensor<T>, x: T, y: T) -> Result<Tensor<T>> {
    let (c, h, w) = map.chw()?;
    let tap = Tap::at(y, x);
    let data = map.data();
    Ok(Tensor::from_fn(&[c], |ch| {
        tap.sample(&data[ch * h * w..(ch + 1) * h * w], h, w)
    }))
}

#[derive(Debug, Clone)]
pub struct SampleGrads<T> {
    pub map: Tensor<T>,
    pub x: T,
    pub y: T,
}

/// Backward of [`bilinear_sample`] for an upstream gradient over the `C` outputs.
pub fn bilinear_sample_backward<T: Real>(
    map: &Tensor<T>,
    x: T,
    y: T,
    grad_out: &Tensor<T>,
) -> Result<SampleGrads<T>> {
    let (c, h, w) = map.chw()?;
    if grad_out.shape() != [c] {
        return Err(dim_err!("grad {:?} does not match {c} channels", grad_out.shape()));
    }
    let tap = Tap::at(y, x);
    let mut gmap = Tensor::zeros(map.shape());
    let (mut gx, mut gy) = (T::zero(), T::zero());
    for ch in 0..c {
        let g = grad_out.data()[ch];
        let plane = &map.data()[ch * h * w..(ch + 1) * h * w];
        let (dy, dx) = tap.position_grad(plane, h, w);
        gy += g * dy;
        gx += g * dx;
        tap.scatter(g, &mut gmap.data_mut()[ch * h * w..(ch + 1) * h * w], h, w);
    }
    Ok(SampleGrads {
        map: gmap,
        x: gx,
        y: gy,
    })
}

/// Per-axis interpolation table for resizing `src` samples onto `dst` samples.
fn axis_table<T: Real>(src: usize, dst: usize) -> Vec<(usize, usize, T)> {
    let scale = T::lit(src as f64 / dst as f64);
    let half = T::lit(0.5);
    (0..dst)
        .map(|i| {
            let s = ((T::lit(i as f64) + half) * scale - half).max(T::zero());
            let i0 = s.floor().to_usize().unwrap_or(0).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, s - T::lit(i0 as f64))
        })
        .collect()
}

fn check_target(h2: usize, w2: usize) -> Result<()> {
    if h2 == 0 || w2 == 0 {
        return Err(dim_err!("resize target {h2}x{w2} has a zero extent"));
    }
    Ok(())
}

/// Resizes the trailing two axes of a rank-3 or rank-4 tensor.
pub fn bilinear_resize<T: Real>(map: &Tensor<T>, h2: usize, w2: usize) -> Result<Tensor<T>> {
    check_target(h2, w2)?;
    let rank = map.rank();
    if rank < 2 {
        return Err(dim_err!("resize needs at least 2 axes, got {:?}", map.shape()));
    }
    let h = map.dim(rank - 2);
    let w = map.dim(rank - 1);
    if h == 0 || w == 0 {
        return Err(dim_err!("cannot resize empty map {:?}", map.shape()));
    }
    if (h, w) == (h2, w2) {
        return Ok(map.clone());
    }
    let planes = map.len() / (h * w);
    let ty = axis_table::<T>(h, h2);
    let tx = axis_table::<T>(w, w2);
    let mut out = Vec::with_capacity(planes * h2 * w2);
    for p in 0..planes {
        let src = &map.data()[p * h * w..(p + 1) * h * w];
        for &(y0, y1, ly) in &ty {
            let hy = T::one() - ly;
            for &(x0, x1, lx) in &tx {
                let hx = T::one() - lx;
                out.push(
                    hy * (hx * src[y0 * w + x0] + lx * src[y0 * w + x1])
                        + ly * (hx * src[y1 * w + x0] + lx * src[y1 * w + x1]),
                );
            }
        }
    }
    let mut shape = map.shape().to_vec();
    shape[rank - 2] = h2;
    shape[rank - 1] = w2;
    Tensor::from_vec(&shape, out)
}

/// Adjoint of [`bilinear_resize`]: maps a gradient at `h2 x w2` back to `h x w`.
pub fn bilinear_resize_backward<T: Real>(grad: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    check_target(h, w)?;
    let rank = grad.rank();
    if rank < 2 {
        return Err(dim_err!("resize grad needs at least 2 axes, got {:?}", grad.shape()));
    }
    let h2 = grad.dim(rank - 2);
    let w2 = grad.dim(rank - 1);
    if (h, w) == (h2, w2) {
        return Ok(grad.clone());
    }
    let planes = grad.len() / (h2 * w2);
    let ty = axis_table::<T>(h, h2);
    let tx = axis_table::<T>(w, w2);
    let mut out = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let g = &grad.data()[p * h2 * w2..(p + 1) * h2 * w2];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for (i, &(y0, y1, ly)) in ty.iter().enumerate() {
            let hy = T::one() - ly;
            for (j, &(x0, x1, lx)) in tx.iter().enumerate() {
                let hx = T::one() - lx;
                let v = g[i * w2 + j];
                dst[y0 * w + x0] += v * hy * hx;
                dst[y0 * w + x1] += v * hy * lx;
                dst[y1 * w + x0] += v * ly * hx;
                dst[y1 * w + x1] += v * ly * lx;
            }
        }
    }
    let mut shape = grad.shape().to_vec();
    shape[rank - 2] = h;
    shape[rank - 1] = w;
    Tensor::from_vec(&shape, out)
}
