//! Depth sanitising and the spatial encodings fed to the projector: raw depth, back-projected
//! 3D coordinates, and a simplified HHA (disparity, height, normal-to-gravity angle).
//!
//! Camera frame: `X` right, `Y` down, `Z` forward, so `Y = (v - cy) z / fy`. Gravity therefore
//! defaults to `+Y`. The HHA here estimates the ground as the lowest observed point and takes
//! gravity as given; it approximates, and does not reproduce, the iterative gravity-alignment
//! recipe usually used to build HHA images.

use std::collections::VecDeque;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::sconv::SpatialSource;
use crate::tensor::{Real, Tensor};

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite() && cx.is_finite() && cy.is_finite()) {
            return Err(Error::Data(format!("invalid intrinsics fx={fx} fy={fy} cx={cx} cy={cy}")));
        }
        Ok(CameraIntrinsics { fx, fy, cx, cy })
    }

    /// Parses four whitespace-separated reals `fx fy cx cy`.
    pub fn parse(text: &str) -> Result<Self> {
        let vals: Vec<f64> = text
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|e| Error::Data(format!("intrinsics value `{t}`: {e}"))))
            .collect::<Result<_>>()?;
        match vals[..] {
            [fx, fy, cx, cy] => Self::new(fx, fy, cx, cy),
            _ => Err(Error::Data(format!("intrinsics need 4 values, got {}", vals.len()))),
        }
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, format!("{} {} {} {}\n", self.fx, self.fy, self.cx, self.cy))
            .map_err(|e| Error::io(path, e))
    }

    /// Intrinsics after scaling the image by `s` about the origin.
    pub fn scaled(&self, s: f64) -> Self {
        CameraIntrinsics {
            fx: self.fx * s,
            fy: self.fy * s,
            cx: (self.cx + 0.5) * s - 0.5,
            cy: (self.cy + 0.5) * s - 0.5,
        }
    }

    /// Intrinsics after cropping at `(top, left)`; negative values mean padding.
    pub fn cropped(&self, top: f64, left: f64) -> Self {
        CameraIntrinsics {
            cx: self.cx - left,
            cy: self.cy - top,
            ..*self
        }
    }

    /// Intrinsics after a horizontal flip of a `width`-wide image.
    pub fn flipped(&self, width: usize) -> Self {
        CameraIntrinsics {
            cx: width as f64 - 1.0 - self.cx,
            ..*self
        }
    }
}

/// Metric depth `[h, w]`; zero or non-finite entries are holes.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub height: usize,
    pub width: usize,
    pub meters: Vec<f64>,
}

impl DepthMap {
    pub fn new(height: usize, width: usize, meters: Vec<f64>) -> Result<Self> {
        if meters.len() != height * width {
            return Err(dim_err!("depth {height}x{width} needs {} values, got {}", height * width, meters.len()));
        }
        Ok(DepthMap { height, width, meters })
    }

    #[inline]
    pub fn is_valid_value(v: f64) -> bool {
        v.is_finite() && v > 0.0
    }

    pub fn validity(&self) -> Vec<bool> {
        self.meters.iter().map(|&v| Self::is_valid_value(v)).collect()
    }

    pub fn is_fully_valid(&self) -> bool {
        self.meters.iter().all(|&v| Self::is_valid_value(v))
    }

    /// `[1, h, w]` tensor of the raw values.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_fn(&[1, self.height, self.width], |i| T::lit(self.meters[i]))
    }

    fn require_valid(&self) -> Result<()> {
        if let Some(i) = self.meters.iter().position(|&v| !Self::is_valid_value(v)) {
            return Err(Error::Data(format!(
                "depth at ({}, {}) is {}; sanitize holes first",
                i / self.width,
                i % self.width,
                self.meters[i]
            )));
        }
        Ok(())
    }
}

/// Fills every hole with the value of the nearest valid pixel (4-connected breadth-first
/// distance; ties go to the neighbour reached first in up, left, right, down order).
pub fn sanitize_depth(raw: &DepthMap) -> Result<DepthMap> {
    let (h, w) = (raw.height, raw.width);
    let mut out = raw.meters.clone();
    let mut filled = raw.validity();
    if !filled.iter().any(|&v| v) {
        return Err(Error::Data("depth map has no valid pixel".into()));
    }
    let mut queue: VecDeque<usize> = (0..h * w).filter(|&i| filled[i]).collect();
    while let Some(i) = queue.pop_front() {
        let (y, x) = (i / w, i % w);
        let neighbours = [
            (y > 0).then(|| i - w),
            (x > 0).then(|| i - 1),
            (x + 1 < w).then(|| i + 1),
            (y + 1 < h).then(|| i + w),
        ];
        for j in neighbours.into_iter().flatten() {
            if !filled[j] {
                filled[j] = true;
                out[j] = out[i];
                queue.push_back(j);
            }
        }
    }
    DepthMap::new(h, w, out)
}

/// Pinhole back-projection `[X, Y, Z]` as `[3, h, w]`.
pub fn depth_to_coords(d: &DepthMap, k: &CameraIntrinsics) -> Result<Tensor<f64>> {
    d.require_valid()?;
    let (h, w) = (d.height, d.width);
    let p = h * w;
    Ok(Tensor::from_fn(&[3, h, w], |i| {
        let c = i / p;
        let pix = i % p;
        let (v, u) = ((pix / w) as f64, (pix % w) as f64);
        let z = d.meters[pix];
        match c {
            0 => (u - k.cx) * z / k.fx,
            1 => (v - k.cy) * z / k.fy,
            _ => z,
        }
    }))
}

fn unit(v: [f64; 3]) -> Option<[f64; 3]> {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    (n > 0.0 && n.is_finite()).then(|| [v[0] / n, v[1] / n, v[2] / n])
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

/// Unit surface normals `[3, h, w]` from central differences of the back-projected points,
/// oriented towards the camera. Border pixels (and degenerate interior ones) copy the normal of
/// the nearest interior pixel.
pub fn surface_normals(d: &DepthMap, k: &CameraIntrinsics) -> Result<Tensor<f64>> {
    let (h, w) = (d.height, d.width);
    if h < 3 || w < 3 {
        return Err(dim_err!("normals need at least 3x3 pixels, got {h}x{w}"));
    }
    let pts = depth_to_coords(d, k)?;
    let p = h * w;
    let at = |y: usize, x: usize| {
        let i = y * w + x;
        [pts.data()[i], pts.data()[p + i], pts.data()[2 * p + i]]
    };
    let mut normals: Vec<Option<[f64; 3]>> = vec![None; p];
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let (l, r, u, dn) = (at(y, x - 1), at(y, x + 1), at(y - 1, x), at(y + 1, x));
            let du = [r[0] - l[0], r[1] - l[1], r[2] - l[2]];
            let dv = [dn[0] - u[0], dn[1] - u[1], dn[2] - u[2]];
            normals[y * w + x] = unit(cross(du, dv)).map(|n| {
                let c = at(y, x);
                if n[0] * c[0] + n[1] * c[1] + n[2] * c[2] > 0.0 {
                    [-n[0], -n[1], -n[2]]
                } else {
                    n
                }
            });
        }
    }
    let fallback = [0.0, 0.0, -1.0];
    let mut out = Tensor::zeros(&[3, h, w]);
    for y in 0..h {
        for x in 0..w {
            let (iy, ix) = (y.clamp(1, h - 2), x.clamp(1, w - 2));
            let n = normals[iy * w + ix].unwrap_or(fallback);
            for (c, &v) in n.iter().enumerate() {
                out.data_mut()[c * p + y * w + x] = v;
            }
        }
    }
    Ok(out)
}

/// Camera-frame gravity used when none is supplied: straight down the image.
pub const DEFAULT_GRAVITY: [f64; 3] = [0.0, 1.0, 0.0];

/// Unnormalised HHA channels: disparity `1/z` (1/m), height above the lowest point (m), and
/// the angle between the camera-facing normal and gravity (radians).
pub fn hha_raw(d: &DepthMap, k: &CameraIntrinsics, gravity: [f64; 3]) -> Result<Tensor<f64>> {
    let g = unit(gravity).ok_or_else(|| Error::Data(format!("gravity {gravity:?} has no direction")))?;
    let pts = depth_to_coords(d, k)?;
    let normals = surface_normals(d, k)?;
    let (h, w) = (d.height, d.width);
    let p = h * w;
    let up_height = |i: usize| -(g[0] * pts.data()[i] + g[1] * pts.data()[p + i] + g[2] * pts.data()[2 * p + i]);
    let lowest = (0..p).map(up_height).fold(f64::INFINITY, f64::min);
    Ok(Tensor::from_fn(&[3, h, w], |i| {
        let c = i / p;
        let pix = i % p;
        match c {
            0 => 1.0 / d.meters[pix],
            1 => up_height(pix) - lowest,
            _ => {
                let n = [normals.data()[pix], normals.data()[p + pix], normals.data()[2 * p + pix]];
                (n[0] * g[0] + n[1] * g[1] + n[2] * g[2]).clamp(-1.0, 1.0).acos()
            }
        }
    }))
}

/// HHA with every channel affinely mapped to `[0, 1]` over the image (constant channels map to 0).
pub fn depth_to_hha(d: &DepthMap, k: &CameraIntrinsics, gravity: [f64; 3]) -> Result<Tensor<f64>> {
    let mut t = hha_raw(d, k, gravity)?;
    let p = d.height * d.width;
    for plane in t.data_mut().chunks_exact_mut(p) {
        let lo = plane.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = plane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let range = hi - lo;
        for v in plane.iter_mut() {
            *v = if range > 1e-12 { ((*v - lo) / range).clamp(0.0, 1.0) } else { 0.0 };
        }
    }
    Ok(t)
}

/// Per-channel statistics removed by [`normalize_spatial`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Channels whose standard deviation falls below this are treated as constant.
pub const NORMALIZE_EPS: f64 = 1e-8;

/// Per-channel zero-mean, unit-variance map of a `[C, h, w]` tensor over the image.
///
/// Constant channels become zero and record `std = 1`, so [`denormalize_spatial`] inverts.
pub fn normalize_spatial<T: Real>(s: &Tensor<T>) -> Result<(Tensor<T>, SpatialStats)> {
    let (c, h, w) = s.chw()?;
    let p = h * w;
    let mut out = s.clone();
    let mut stats = SpatialStats {
        mean: Vec::with_capacity(c),
        std: Vec::with_capacity(c),
    };
    for plane in out.data_mut().chunks_exact_mut(p) {
        let mean = plane.iter().map(|v| v.as_f64()).sum::<f64>() / p as f64;
        let var = plane.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / p as f64;
        let std = var.sqrt();
        if std < NORMALIZE_EPS {
            plane.fill(T::zero());
            stats.mean.push(mean);
            stats.std.push(1.0);
        } else {
            for v in plane.iter_mut() {
                *v = T::lit((v.as_f64() - mean) / std);
            }
            stats.mean.push(mean);
            stats.std.push(std);
        }
    }
    Ok((out, stats))
}

pub fn denormalize_spatial<T: Real>(s: &Tensor<T>, stats: &SpatialStats) -> Result<Tensor<T>> {
    let (c, h, w) = s.chw()?;
    if stats.mean.len() != c || stats.std.len() != c {
        return Err(dim_err!("stats for {} channels applied to {c}", stats.mean.len()));
    }
    let p = h * w;
    Ok(Tensor::from_fn(s.shape(), |i| {
        let ch = i / p;
        T::lit(s.data()[i].as_f64() * stats.std[ch] + stats.mean[ch])
    }))
}

/// Encodes sanitised depth as the network's raw spatial input `[c', h, w]`.
pub fn encode_spatial(
    depth: &DepthMap,
    source: SpatialSource,
    k: &CameraIntrinsics,
    normalize: bool,
) -> Result<Tensor<f64>> {
    let t = match source {
        SpatialSource::Depth => {
            depth.require_valid()?;
            depth.to_tensor()
        }
        SpatialSource::Coords => depth_to_coords(depth, k)?,
        SpatialSource::Hha => depth_to_hha(depth, k, DEFAULT_GRAVITY)?,
        SpatialSource::RgbFeature(_) => {
            return Err(Error::Config("feature-map guidance is not derived from depth".into()))
        }
    };
    if normalize {
        Ok(normalize_spatial(&t)?.0)
    } else {
        Ok(t)
    }
}
