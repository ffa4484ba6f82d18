//! Spatial-information-guided convolution.
//!
//! A raw spatial map `S` (depth, HHA or 3D coordinates) is projected to 64 channels by
//! [`SpatialProjector`]. Each guided convolution then
//!
//! 1. predicts a fractional `(dy, dx)` offset per kernel tap and output position from the
//!    projected map with a single convolution that mirrors the host kernel geometry,
//! 2. samples the projected map at the shifted taps (`64 * K` values per position),
//! 3. turns those samples into one sigmoid mask value per tap with two position-wise
//!    fully connected layers, and
//! 4. evaluates `Y(p) = sum_i m_i(p) W_i X(p + d_i + dd_i(p))` with bilinear sampling of `X`.
//!
//! Offsets and masks are shared across all input and output channels.

mod op;
mod projector;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result};
use crate::ops::{self, ConvGeometry, Tap};
use crate::tensor::{Real, Tensor};

pub use op::{
    sconv_backward, sconv_forward, SConvGrads, SConvMode, SConvState, F_HIDDEN_DEFAULT,
};
pub use projector::{spatial_project, SpatialProjector};

/// Channel count of the projected spatial features.
pub const PROJECTED_CHANNELS: usize = 64;

/// What the raw spatial input encodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpatialSource {
    Depth,
    Hha,
    Coords,
    RgbFeature(usize),
}

impl SpatialSource {
    pub fn channels(self) -> usize {
        match self {
            SpatialSource::Depth => 1,
            SpatialSource::Hha | SpatialSource::Coords => 3,
            SpatialSource::RgbFeature(c) => c,
        }
    }
}

impl std::str::FromStr for SpatialSource {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "depth" => Ok(SpatialSource::Depth),
            "hha" => Ok(SpatialSource::Hha),
            "coords" => Ok(SpatialSource::Coords),
            other => Err(crate::Error::Config(format!("unknown spatial source `{other}`"))),
        }
    }
}

/// Projected spatial features `[N, 64, h, w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedSpatial<T> {
    features: Tensor<T>,
    pub source: SpatialSource,
}

impl<T: Real> ProjectedSpatial<T> {
    /// Accepts `[64, h, w]` or `[N, 64, h, w]`.
    pub fn new(features: Tensor<T>, source: SpatialSource) -> Result<Self> {
        let features = match features.rank() {
            3 => features.unsqueeze0(),
            4 => features,
            _ => return Err(dim_err!("projected spatial must be rank 3 or 4, got {:?}", features.shape())),
        };
        if features.dim(1) != PROJECTED_CHANNELS {
            return Err(dim_err!(
                "projected spatial needs {PROJECTED_CHANNELS} channels, got {}",
                features.dim(1)
            ));
        }
        Ok(ProjectedSpatial { features, source })
    }

    pub fn features(&self) -> &Tensor<T> {
        &self.features
    }

    pub fn into_features(self) -> Tensor<T> {
        self.features
    }

    pub fn batch(&self) -> usize {
        self.features.dim(0)
    }

    pub fn extent(&self) -> (usize, usize) {
        (self.features.dim(2), self.features.dim(3))
    }

    /// The `[64, h, w]` map of sample `n`.
    pub fn sample(&self, n: usize) -> Tensor<T> {
        self.features.index0(n)
    }
}

/// Bilinearly resizes projected features to `h2 x w2`; a no-op when the extent already matches.
pub fn resize_spatial<T: Real>(sp: &ProjectedSpatial<T>, h2: usize, w2: usize) -> Result<ProjectedSpatial<T>> {
    Ok(ProjectedSpatial {
        features: ops::bilinear_resize(&sp.features, h2, w2)?,
        source: sp.source,
    })
}

/// Per-position kernel offsets stored as `[N, 2K, h', w']`; channel `2i` is `dy_i`, `2i+1` is `dx_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetField<T> {
    raw: Tensor<T>,
}

impl<T: Real> OffsetField<T> {
    pub fn from_raw(raw: Tensor<T>) -> Result<Self> {
        let raw = if raw.rank() == 3 { raw.unsqueeze0() } else { raw };
        let (_, c2, _, _) = raw.nchw()?;
        if c2 % 2 != 0 {
            return Err(dim_err!("offset map needs an even channel count, got {c2}"));
        }
        raw.ensure_finite("offsets")?;
        Ok(OffsetField { raw })
    }

    pub fn zeros(n: usize, taps: usize, oh: usize, ow: usize) -> Self {
        OffsetField {
            raw: Tensor::zeros(&[n, 2 * taps, oh, ow]),
        }
    }

    pub fn raw(&self) -> &Tensor<T> {
        &self.raw
    }

    pub fn taps(&self) -> usize {
        self.raw.dim(1) / 2
    }

    pub fn extent(&self) -> (usize, usize) {
        (self.raw.dim(2), self.raw.dim(3))
    }

    /// `(dy, dx)` for sample `n`, tap `i`, output pixel `(y, x)`.
    #[inline]
    pub fn get(&self, n: usize, i: usize, y: usize, x: usize) -> (T, T) {
        let (_, c2, oh, ow) = self.raw.nchw().unwrap();
        let base = (n * c2 + 2 * i) * oh * ow + y * ow + x;
        (self.raw.data()[base], self.raw.data()[base + oh * ow])
    }

    /// Reshaped view `[N, K, h', w', 2]` with the last axis `(dy, dx)`.
    pub fn reshaped(&self) -> Tensor<T> {
        let (n, c2, oh, ow) = self.raw.nchw().unwrap();
        let k = c2 / 2;
        Tensor::from_fn(&[n, k, oh, ow, 2], |idx| {
            let comp = idx % 2;
            let pix = (idx / 2) % (oh * ow);
            let i = (idx / 2 / (oh * ow)) % k;
            let ni = idx / 2 / (oh * ow) / k;
            self.raw.data()[(ni * c2 + 2 * i + comp) * oh * ow + pix]
        })
    }

    /// `sum_i ||dd_i(p)||_2` over the taps, as `[h', w']` for sample `n`.
    pub fn magnitude_sum(&self, n: usize) -> Tensor<T> {
        let (_, c2, oh, ow) = self.raw.nchw().unwrap();
        let p = oh * ow;
        let base = &self.raw.data()[n * c2 * p..(n + 1) * c2 * p];
        Tensor::from_fn(&[oh, ow], |pix| {
            (0..c2 / 2)
                .map(|i| {
                    let dy = base[2 * i * p + pix];
                    let dx = base[(2 * i + 1) * p + pix];
                    (dy * dy + dx * dx).sqrt()
                })
                .sum()
        })
    }
}

/// Predicts offsets from projected features with one convolution `64 -> 2K` in host geometry.
pub fn generate_offsets<T: Real>(
    sp: &ProjectedSpatial<T>,
    eta_weight: &Tensor<T>,
    eta_bias: &Tensor<T>,
    geom: &ConvGeometry,
) -> Result<OffsetField<T>> {
    if eta_weight.dim(0) != 2 * geom.taps() {
        return Err(dim_err!(
            "offset generator has {} outputs; host kernel needs {}",
            eta_weight.dim(0),
            2 * geom.taps()
        ));
    }
    let (raw, _) = ops::conv2d_forward_batch(sp.features(), eta_weight, Some(eta_bias), geom)?;
    OffsetField::from_raw(raw)
}

/// Sampling stencils for every (sample, tap, output pixel), indexed `(n * K + i) * P + p`.
pub(crate) fn compute_taps<T: Real>(
    geom: &ConvGeometry,
    n: usize,
    oh: usize,
    ow: usize,
    offsets: Option<&OffsetField<T>>,
) -> Vec<Tap<T>> {
    let k = geom.taps();
    let p = oh * ow;
    let mut taps = Vec::with_capacity(n * k * p);
    for ni in 0..n {
        for i in 0..k {
            for oy in 0..oh {
                for ox in 0..ow {
                    let (by, bx) = geom.tap_origin(oy, ox, i);
                    taps.push(match offsets {
                        None => Tap::integer(by, bx),
                        Some(off) => {
                            let (dy, dx) = off.get(ni, i, oy, ox);
                            Tap::at(T::lit(by as f64) + dy, T::lit(bx as f64) + dx)
                        }
                    });
                }
            }
        }
    }
    taps
}

/// Samples `[N, C, h, w]` at every stencil into a column matrix with `N * P` columns.
///
/// With `tap_major` the row is `i * C + c` (gathered-spatial layout), otherwise `c * K + i`
/// (convolution column layout).
pub(crate) fn sample_columns<T: Real>(
    x: &Tensor<T>,
    taps: &[Tap<T>],
    k: usize,
    p: usize,
    tap_major: bool,
) -> Vec<T> {
    let (n, c, h, w) = x.nchw().unwrap();
    let np = n * p;
    let mut cols = vec![T::zero(); c * k * np];
    for ni in 0..n {
        for ch in 0..c {
            let plane = &x.data()[(ni * c + ch) * h * w..(ni * c + ch + 1) * h * w];
            for i in 0..k {
                let row = if tap_major { i * c + ch } else { ch * k + i };
                let dst = &mut cols[row * np + ni * p..row * np + (ni + 1) * p];
                let src = &taps[(ni * k + i) * p..(ni * k + i + 1) * p];
                for (d, t) in dst.iter_mut().zip(src) {
                    *d = t.sample(plane, h, w);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`sample_columns`]: scatters column gradients into the map gradient and
/// accumulates position gradients (`gpos_y`, `gpos_x`, indexed like the stencils).
#[allow(clippy::too_many_arguments)]
pub(crate) fn sample_columns_backward<T: Real>(
    x: &Tensor<T>,
    taps: &[Tap<T>],
    k: usize,
    p: usize,
    tap_major: bool,
    gcols: &[T],
    gx: &mut Tensor<T>,
    mut gpos: Option<(&mut [T], &mut [T])>,
) {
    let (n, c, h, w) = x.nchw().unwrap();
    let np = n * p;
    for ni in 0..n {
        for ch in 0..c {
            let off = (ni * c + ch) * h * w;
            let plane = &x.data()[off..off + h * w];
            let gplane = &mut gx.data_mut()[off..off + h * w];
            for i in 0..k {
                let row = if tap_major { i * c + ch } else { ch * k + i };
                let g = &gcols[row * np + ni * p..row * np + (ni + 1) * p];
                let tb = (ni * k + i) * p;
                for (j, &gv) in g.iter().enumerate() {
                    if gv == T::zero() {
                        continue;
                    }
                    let t = &taps[tb + j];
                    t.scatter(gv, gplane, h, w);
                    if let Some((gy, gxp)) = gpos.as_mut() {
                        let (dy, dx) = t.position_grad(plane, h, w);
                        gy[tb + j] += gv * dy;
                        gxp[tb + j] += gv * dx;
                    }
                }
            }
        }
    }
}

/// Projected features sampled at the shifted taps: `64 * K` values per output position.
///
/// Stored as a column matrix `[K * 64, N * h' * w']` whose row `i * 64 + c` is channel `c` of
/// tap `i` (taps in kernel-grid order).
#[derive(Debug, Clone, PartialEq)]
pub struct GatheredSpatial<T> {
    pub n: usize,
    pub oh: usize,
    pub ow: usize,
    pub taps: usize,
    pub channels: usize,
    pub(crate) cols: Vec<T>,
}

impl<T: Real> GatheredSpatial<T> {
    pub fn len_per_position(&self) -> usize {
        self.taps * self.channels
    }

    pub fn columns(&self) -> &[T] {
        &self.cols
    }

    /// The `64 * K` vector gathered for output pixel `(y, x)` of sample `n`.
    pub fn vector_at(&self, n: usize, y: usize, x: usize) -> Vec<T> {
        let np = self.n * self.oh * self.ow;
        let col = n * self.oh * self.ow + y * self.ow + x;
        (0..self.len_per_position()).map(|r| self.cols[r * np + col]).collect()
    }

    /// `[N, h', w', 64K]` layout.
    pub fn to_tensor(&self) -> Tensor<T> {
        let d = self.len_per_position();
        let p = self.oh * self.ow;
        let np = self.n * p;
        Tensor::from_fn(&[self.n, self.oh, self.ow, d], |idx| {
            let r = idx % d;
            let col = idx / d;
            self.cols[r * np + col]
        })
    }
}

/// Samples projected features at `p + d_i + dd_i(p)` for every output position and tap.
pub fn gather_spatial<T: Real>(
    sp: &ProjectedSpatial<T>,
    geom: &ConvGeometry,
    offsets: &OffsetField<T>,
) -> Result<GatheredSpatial<T>> {
    let (h, w) = sp.extent();
    let (oh, ow) = geom.output_extent(h, w)?;
    if offsets.extent() != (oh, ow) || offsets.taps() != geom.taps() || offsets.raw().dim(0) != sp.batch() {
        return Err(dim_err!(
            "offsets {:?} inconsistent with {}x{} output and {} taps",
            offsets.raw().shape(),
            oh,
            ow,
            geom.taps()
        ));
    }
    let n = sp.batch();
    let taps = compute_taps(geom, n, oh, ow, Some(offsets));
    Ok(GatheredSpatial {
        n,
        oh,
        ow,
        taps: geom.taps(),
        channels: PROJECTED_CHANNELS,
        cols: sample_columns(sp.features(), &taps, geom.taps(), oh * ow, true),
    })
}

/// Sigmoid weight modulation `[N, K, h', w']`, one value per tap and output position.
#[derive(Debug, Clone, PartialEq)]
pub struct ModulationField<T> {
    pub mask: Tensor<T>,
}

pub(crate) struct MaskInternals<T> {
    /// `[hidden, NP]` post-ReLU activations.
    pub hidden: Vec<T>,
    /// `[K, NP]` sigmoid outputs.
    pub mask: Vec<T>,
}

pub(crate) fn mask_forward<T: Real>(
    gathered: &[T],
    np: usize,
    f0_w: &Tensor<T>,
    f0_b: &Tensor<T>,
    f1_w: &Tensor<T>,
    f1_b: &Tensor<T>,
) -> MaskInternals<T> {
    use crate::tensor::{gemm, Transpose};
    let hid = f0_w.dim(0);
    let d = f0_w.dim(1);
    let k = f1_w.dim(0);
    let mut hidden = vec![T::zero(); hid * np];
    for (row, &b) in hidden.chunks_exact_mut(np).zip(f0_b.data()) {
        row.fill(b);
    }
    gemm(Transpose::No, Transpose::No, hid, np, d, T::one(), f0_w.data(), gathered, T::one(), &mut hidden);
    hidden.iter_mut().for_each(|v| *v = ops::relu(*v));
    let mut z = vec![T::zero(); k * np];
    for (row, &b) in z.chunks_exact_mut(np).zip(f1_b.data()) {
        row.fill(b);
    }
    gemm(Transpose::No, Transpose::No, k, np, hid, T::one(), f1_w.data(), &hidden, T::one(), &mut z);
    // Saturated logits would round to exactly 0 or 1; keep the mask inside the open interval.
    let (lo, hi) = (T::min_positive_value(), T::one() - T::epsilon());
    z.iter_mut().for_each(|v| *v = ops::sigmoid(*v).max(lo).min(hi));
    MaskInternals { hidden, mask: z }
}

/// Position-wise `FC(64K -> hidden) + ReLU + FC(hidden -> K)` followed by a sigmoid.
pub fn generate_weight_mask<T: Real>(
    gathered: &GatheredSpatial<T>,
    f0_w: &Tensor<T>,
    f0_b: &Tensor<T>,
    f1_w: &Tensor<T>,
    f1_b: &Tensor<T>,
) -> Result<ModulationField<T>> {
    let d = gathered.len_per_position();
    let hid = f0_w.dim(0);
    if f0_w.shape() != [hid, d] || f0_b.shape() != [hid] {
        return Err(dim_err!("first mask layer {:?} does not accept {d} inputs", f0_w.shape()));
    }
    if f1_w.shape() != [gathered.taps, hid] || f1_b.shape() != [gathered.taps] {
        return Err(dim_err!(
            "second mask layer {:?} must map {hid} -> {} taps",
            f1_w.shape(),
            gathered.taps
        ));
    }
    let p = gathered.oh * gathered.ow;
    let np = gathered.n * p;
    let m = mask_forward(&gathered.cols, np, f0_w, f0_b, f1_w, f1_b);
    let data = ops::conv::cnp_to_ncp(&m.mask, gathered.taps, gathered.n, p);
    Ok(ModulationField {
        mask: Tensor::from_vec(&[gathered.n, gathered.taps, gathered.oh, gathered.ow], data)?,
    })
}
