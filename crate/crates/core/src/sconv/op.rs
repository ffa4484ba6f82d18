use std::collections::BTreeMap;

use rand::Rng;

use super::{
    compute_taps, mask_forward, sample_columns, sample_columns_backward,
    OffsetField, ProjectedSpatial, PROJECTED_CHANNELS,
};
use crate::error::{dim_err, Error, Result};
use crate::layers::{he_uniform, join, Param, Parameterized};
use crate::ops::conv::{apply_columns, check_weight, columns_backward};
use crate::ops::{self, ConvCache, ConvGeometry, GradPair, Tap};
use crate::tensor::{gemm, Real, Tensor, Transpose};

/// Hidden width of the mask network used by the toy presets.
pub const F_HIDDEN_DEFAULT: usize = 16;

/// `Learned` runs the full guided convolution. `Degenerate` pins offsets to zero and the mask
/// to one, which reduces the operator to a plain convolution with the host weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SConvMode {
    #[default]
    Learned,
    Degenerate,
}

struct Cache<T> {
    x: Tensor<T>,
    sp: Tensor<T>,
    out_hw: (usize, usize),
    taps: Vec<Tap<T>>,
    eta: Option<ConvCache<T>>,
    gathered: Vec<T>,
    hidden: Vec<T>,
    mask: Vec<T>,
    /// Unmodulated samples of `x`; only kept in learned mode.
    vals: Vec<T>,
    /// Modulated columns fed to the GEMM.
    cols: Vec<T>,
}

/// Parameters and forward caches of one guided convolution.
pub struct SConvState<T> {
    pub geom: ConvGeometry,
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub eta_w: Param<T>,
    pub eta_b: Param<T>,
    pub f0_w: Param<T>,
    pub f0_b: Param<T>,
    pub f1_w: Param<T>,
    pub f1_b: Param<T>,
    pub mode: SConvMode,
    cache: Option<Cache<T>>,
    last_offsets: Option<OffsetField<T>>,
    last_output: Option<Tensor<T>>,
}

/// Gradients of every input and parameter group of a guided convolution.
#[derive(Debug, Clone)]
pub struct SConvGrads<T> {
    pub input: Tensor<T>,
    pub spatial: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub eta_w: Tensor<T>,
    pub eta_b: Tensor<T>,
    pub f0_w: Tensor<T>,
    pub f0_b: Tensor<T>,
    pub f1_w: Tensor<T>,
    pub f1_b: Tensor<T>,
}

impl<T: Real> SConvState<T> {
    /// Host weights are He-uniform; the offset generator and the last mask layer start at zero,
    /// so a fresh operator samples the regular grid with a uniform 0.5 mask.
    pub fn new<R: Rng>(
        prefix: &str,
        c_in: usize,
        c_out: usize,
        geom: ConvGeometry,
        f_hidden: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let k = geom.taps();
        let d = PROJECTED_CHANNELS * k;
        SConvState {
            geom,
            weight: Param::new(
                join(prefix, "w"),
                he_uniform(&[c_out, c_in, geom.kh, geom.kw], c_in * k, rng),
            ),
            bias: bias.then(|| Param::new(join(prefix, "b"), Tensor::zeros(&[c_out]))),
            eta_w: Param::new(
                join(prefix, "eta.w"),
                Tensor::zeros(&[2 * k, PROJECTED_CHANNELS, geom.kh, geom.kw]),
            ),
            eta_b: Param::new(join(prefix, "eta.b"), Tensor::zeros(&[2 * k])),
            f0_w: Param::new(join(prefix, "f.0.w"), he_uniform(&[f_hidden, d], d, rng)),
            f0_b: Param::new(join(prefix, "f.0.b"), Tensor::zeros(&[f_hidden])),
            f1_w: Param::new(join(prefix, "f.1.w"), Tensor::zeros(&[k, f_hidden])),
            f1_b: Param::new(join(prefix, "f.1.b"), Tensor::zeros(&[k])),
            mode: SConvMode::Learned,
            cache: None,
            last_offsets: None,
            last_output: None,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.dim(1)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.dim(0)
    }

    pub fn f_hidden(&self) -> usize {
        self.f0_w.value.dim(0)
    }

    /// Offsets of the most recent forward pass (zeros in degenerate mode).
    pub fn last_offsets(&self) -> Option<&OffsetField<T>> {
        self.last_offsets.as_ref()
    }

    /// `C_out * C_in * K (+ C_out)`.
    pub fn host_param_count(c_in: usize, c_out: usize, geom: &ConvGeometry, bias: bool) -> usize {
        c_out * c_in * geom.taps() + if bias { c_out } else { 0 }
    }

    /// `64 * 2K * K + 2K`.
    pub fn eta_param_count(geom: &ConvGeometry) -> usize {
        let k = geom.taps();
        PROJECTED_CHANNELS * 2 * k * k + 2 * k
    }

    /// `(64K * hidden + hidden) + (hidden * K + K)`.
    pub fn f_param_count(geom: &ConvGeometry, hidden: usize) -> usize {
        let k = geom.taps();
        let d = PROJECTED_CHANNELS * k;
        d * hidden + hidden + hidden * k + k
    }

    /// Parameters beyond the host convolution (offset generator plus mask network).
    pub fn extra_param_count(&self) -> usize {
        self.eta_w.numel() + self.eta_b.numel() + self.f0_w.numel() + self.f0_b.numel() + self.f1_w.numel() + self.f1_b.numel()
    }

    /// Batched forward over `x: [N, C_in, h, w]` with projected features at the same extent.
    pub fn forward(&mut self, x: &Tensor<T>, sp: &ProjectedSpatial<T>, keep_cache: bool) -> Result<Tensor<T>> {
        let (n, c, h, w) = x.nchw()?;
        check_weight(&self.weight.value, self.bias.as_ref().map(|b| &b.value), c, &self.geom)?;
        if sp.extent() != (h, w) || sp.batch() != n {
            return Err(dim_err!(
                "projected spatial {:?} must match input batch {n} and extent {h}x{w}",
                sp.features().shape()
            ));
        }
        x.ensure_finite("sconv input")?;
        let (oh, ow) = self.geom.output_extent(h, w)?;
        let k = self.geom.taps();
        let p = oh * ow;
        let np = n * p;

        let cache = match self.mode {
            SConvMode::Degenerate => {
                let taps = compute_taps::<T>(&self.geom, n, oh, ow, None);
                let cols = sample_columns(x, &taps, k, p, false);
                self.last_offsets = Some(OffsetField::zeros(n, k, oh, ow));
                Cache {
                    x: x.clone(),
                    sp: sp.features().clone(),
                    out_hw: (oh, ow),
                    taps,
                    eta: None,
                    gathered: Vec::new(),
                    hidden: Vec::new(),
                    mask: vec![T::one(); k * np],
                    vals: Vec::new(),
                    cols,
                }
            }
            SConvMode::Learned => {
                let (raw, eta_cache) = ops::conv2d_forward_batch(
                    sp.features(),
                    &self.eta_w.value,
                    Some(&self.eta_b.value),
                    &self.geom,
                )?;
                let offsets = OffsetField::from_raw(raw)?;
                let taps = compute_taps(&self.geom, n, oh, ow, Some(&offsets));
                let gathered = sample_columns(sp.features(), &taps, k, p, true);
                let m = mask_forward(
                    &gathered,
                    np,
                    &self.f0_w.value,
                    &self.f0_b.value,
                    &self.f1_w.value,
                    &self.f1_b.value,
                );
                let vals = sample_columns(x, &taps, k, p, false);
                let mut cols = vals.clone();
                for (row_idx, row) in cols.chunks_exact_mut(np).enumerate() {
                    let mrow = &m.mask[(row_idx % k) * np..(row_idx % k + 1) * np];
                    for (v, &mv) in row.iter_mut().zip(mrow) {
                        *v *= mv;
                    }
                }
                self.last_offsets = Some(offsets);
                Cache {
                    x: x.clone(),
                    sp: sp.features().clone(),
                    out_hw: (oh, ow),
                    taps,
                    eta: Some(eta_cache),
                    gathered,
                    hidden: m.hidden,
                    mask: m.mask,
                    vals,
                    cols,
                }
            }
        };
        let y = apply_columns(
            &self.weight.value,
            self.bias.as_ref().map(|b| &b.value),
            &cache.cols,
            n,
            oh,
            ow,
        );
        self.cache = keep_cache.then_some(cache);
        Ok(y)
    }

    /// The modulation field `[N, K, h', w']` of the cached forward pass.
    pub fn cached_mask(&self) -> Option<Tensor<T>> {
        let c = self.cache.as_ref()?;
        let n = c.x.dim(0);
        let (oh, ow) = c.out_hw;
        let k = self.geom.taps();
        Tensor::from_vec(&[n, k, oh, ow], ops::conv::cnp_to_ncp(&c.mask, k, n, oh * ow)).ok()
    }

    /// Analytic gradients for `grad_out: [N, C_out, h', w']`; consumes the forward cache.
    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<SConvGrads<T>> {
        let c = self
            .cache
            .take()
            .ok_or_else(|| Error::State(format!("{}: backward without forward cache", self.weight.name)))?;
        let n = c.x.dim(0);
        let (oh, ow) = c.out_hw;
        if grad_out.shape() != [n, self.out_channels(), oh, ow] {
            return Err(dim_err!(
                "grad_output {:?} does not match forward output [{n}, {}, {oh}, {ow}]",
                grad_out.shape(),
                self.out_channels()
            ));
        }
        let k = self.geom.taps();
        let p = oh * ow;
        let np = n * p;
        let (gw, gb, gcols) = columns_backward(&self.weight.value, &c.cols, grad_out, self.bias.is_some());
        let mut gx = Tensor::zeros(c.x.shape());
        let mut gsp = Tensor::zeros(c.sp.shape());
        let zeros_like = |p: &Param<T>| Tensor::zeros(p.value.shape());

        if self.mode == SConvMode::Degenerate {
            sample_columns_backward(&c.x, &c.taps, k, p, false, &gcols, &mut gx, None);
            return Ok(SConvGrads {
                input: gx,
                spatial: gsp,
                weight: gw,
                bias: gb,
                eta_w: zeros_like(&self.eta_w),
                eta_b: zeros_like(&self.eta_b),
                f0_w: zeros_like(&self.f0_w),
                f0_b: zeros_like(&self.f0_b),
                f1_w: zeros_like(&self.f1_w),
                f1_b: zeros_like(&self.f1_b),
            });
        }

        // Split dcols into the mask gradient and the gradient on the raw samples.
        let mut gmask = vec![T::zero(); k * np];
        let mut gvals = gcols;
        for (row_idx, row) in gvals.chunks_exact_mut(np).enumerate() {
            let i = row_idx % k;
            let mrow = &c.mask[i * np..(i + 1) * np];
            let vrow = &c.vals[row_idx * np..(row_idx + 1) * np];
            let gm = &mut gmask[i * np..(i + 1) * np];
            for j in 0..np {
                gm[j] += row[j] * vrow[j];
                row[j] *= mrow[j];
            }
        }
        let mut gpos_y = vec![T::zero(); n * k * p];
        let mut gpos_x = vec![T::zero(); n * k * p];
        sample_columns_backward(
            &c.x,
            &c.taps,
            k,
            p,
            false,
            &gvals,
            &mut gx,
            Some((&mut gpos_y, &mut gpos_x)),
        );

        // Sigmoid and the two position-wise layers.
        let hid = self.f_hidden();
        let d = PROJECTED_CHANNELS * k;
        let gz: Vec<T> = gmask
            .iter()
            .zip(&c.mask)
            .map(|(&g, &m)| g * m * (T::one() - m))
            .collect();
        let mut gf1_w = Tensor::zeros(&[k, hid]);
        gemm(Transpose::No, Transpose::Yes, k, hid, np, T::one(), &gz, &c.hidden, T::zero(), gf1_w.data_mut());
        let gf1_b = row_sums(&gz, k, np);
        let mut ghidden = vec![T::zero(); hid * np];
        gemm(Transpose::Yes, Transpose::No, hid, np, k, T::one(), self.f1_w.value.data(), &gz, T::zero(), &mut ghidden);
        for (g, &hv) in ghidden.iter_mut().zip(&c.hidden) {
            if hv <= T::zero() {
                *g = T::zero();
            }
        }
        let mut gf0_w = Tensor::zeros(&[hid, d]);
        gemm(Transpose::No, Transpose::Yes, hid, d, np, T::one(), &ghidden, &c.gathered, T::zero(), gf0_w.data_mut());
        let gf0_b = row_sums(&ghidden, hid, np);
        let mut ggathered = vec![T::zero(); d * np];
        gemm(Transpose::Yes, Transpose::No, d, np, hid, T::one(), self.f0_w.value.data(), &ghidden, T::zero(), &mut ggathered);
        sample_columns_backward(
            &c.sp,
            &c.taps,
            k,
            p,
            true,
            &ggathered,
            &mut gsp,
            Some((&mut gpos_y, &mut gpos_x)),
        );

        // Position gradients are offset gradients; route them through the offset generator.
        let mut goff = vec![T::zero(); n * 2 * k * p];
        for ni in 0..n {
            for i in 0..k {
                let src = (ni * k + i) * p;
                let dy = (ni * 2 * k + 2 * i) * p;
                let dx = dy + p;
                goff[dy..dy + p].copy_from_slice(&gpos_y[src..src + p]);
                goff[dx..dx + p].copy_from_slice(&gpos_x[src..src + p]);
            }
        }
        let goff = Tensor::from_vec(&[n, 2 * k, oh, ow], goff)?;
        let eta_cache = c
            .eta
            .as_ref()
            .ok_or_else(|| Error::State("missing offset-generator cache".into()))?;
        let eta = ops::conv2d_backward_batch(eta_cache, &self.eta_w.value, &goff)?;
        gsp.add_assign(&eta.input)?;

        Ok(SConvGrads {
            input: gx,
            spatial: gsp,
            weight: gw,
            bias: gb,
            eta_w: eta.weight,
            eta_b: eta.bias.expect("offset generator has a bias"),
            f0_w: gf0_w,
            f0_b: Tensor::from_vec(&[hid], gf0_b)?,
            f1_w: gf1_w,
            f1_b: Tensor::from_vec(&[k], gf1_b)?,
        })
    }

    /// Runs [`SConvState::backward`], adds parameter gradients into the params, and returns
    /// `(d input, d projected spatial)`.
    pub fn backward_accumulate(&mut self, grad_out: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let g = self.backward(grad_out)?;
        self.weight.grad.add_assign(&g.weight)?;
        if let (Some(b), Some(gb)) = (self.bias.as_mut(), g.bias.as_ref()) {
            b.grad.add_assign(gb)?;
        }
        self.eta_w.grad.add_assign(&g.eta_w)?;
        self.eta_b.grad.add_assign(&g.eta_b)?;
        self.f0_w.grad.add_assign(&g.f0_w)?;
        self.f0_b.grad.add_assign(&g.f0_b)?;
        self.f1_w.grad.add_assign(&g.f1_w)?;
        self.f1_b.grad.add_assign(&g.f1_b)?;
        Ok((g.input, g.spatial))
    }
}

fn row_sums<T: Real>(m: &[T], rows: usize, cols: usize) -> Vec<T> {
    (0..rows).map(|r| m[r * cols..(r + 1) * cols].iter().copied().sum()).collect()
}

impl<T: Real> Parameterized<T> for SConvState<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.weight);
        if let Some(b) = &self.bias {
            f(b);
        }
        for p in [&self.eta_w, &self.eta_b, &self.f0_w, &self.f0_b, &self.f1_w, &self.f1_b] {
            f(p);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
        for p in [
            &mut self.eta_w,
            &mut self.eta_b,
            &mut self.f0_w,
            &mut self.f0_b,
            &mut self.f1_w,
            &mut self.f1_b,
        ] {
            f(p);
        }
    }
}

/// Single-sample forward: `x: [C_in, h, w]`, projected features `[64, h, w]`.
pub fn sconv_forward<T: Real>(
    x: &Tensor<T>,
    state: &mut SConvState<T>,
    sp: &ProjectedSpatial<T>,
) -> Result<Tensor<T>> {
    x.chw()?;
    let y = state
        .forward(&x.clone().unsqueeze0(), sp, true)?
        .squeeze0()?;
    state.last_output = Some(y.clone());
    Ok(y)
}

/// Single-sample backward returning named gradients:
/// `x`, `spatial`, `w`, `b`, `eta.w`, `eta.b`, `f.0.w`, `f.0.b`, `f.1.w`, `f.1.b`.
pub fn sconv_backward<T: Real>(state: &mut SConvState<T>, grad_output: &Tensor<T>) -> Result<GradPair<T>> {
    grad_output.chw()?;
    let value = state
        .last_output
        .take()
        .ok_or_else(|| Error::State("sconv_backward without a prior sconv_forward".into()))?;
    let g = state.backward(&grad_output.clone().unsqueeze0())?;
    let mut grads = BTreeMap::new();
    grads.insert("x".to_string(), g.input.squeeze0()?);
    grads.insert("spatial".to_string(), g.spatial.squeeze0()?);
    grads.insert("w".to_string(), g.weight);
    if let Some(b) = g.bias {
        grads.insert("b".to_string(), b);
    }
    grads.insert("eta.w".to_string(), g.eta_w);
    grads.insert("eta.b".to_string(), g.eta_b);
    grads.insert("f.0.w".to_string(), g.f0_w);
    grads.insert("f.0.b".to_string(), g.f0_b);
    grads.insert("f.1.w".to_string(), g.f1_w);
    grads.insert("f.1.b".to_string(), g.f1_b);
    Ok(GradPair { value, grads })
}
