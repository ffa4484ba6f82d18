//! Stateful layers with named parameters and forward caches.
//!
//! Layers own their parameters and accumulate gradients into them on `backward`; there is no
//! tape. Callers run `backward` in exact reverse order of `forward`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::ops::{self, ConvCache, ConvGeometry, NormCache};
use crate::tensor::{Real, Tensor};

/// A learnable tensor, its accumulated gradient, and whether weight decay applies to it.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub decay: bool,
}

impl<T: Real> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Param {
            name: name.into(),
            value,
            grad,
            decay: true,
        }
    }

    pub fn no_decay(mut self) -> Self {
        self.decay = false;
        self
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }
}

/// Anything that owns [`Param`]s.
pub trait Parameterized<T: Real> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.numel());
        n
    }

    fn zero_grads(&mut self) {
        self.visit_params_mut(&mut |p| p.zero_grad());
    }
}

/// He-uniform initialisation: `U(-b, b)` with `b = sqrt(6 / fan_in)`.
pub fn he_uniform<T: Real, R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::lit(rng.gen_range(-bound..bound)))
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub geom: ConvGeometry,
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    cache: Option<ConvCache<T>>,
}

impl<T: Real> Conv2d<T> {
    pub fn new<R: Rng>(
        prefix: &str,
        c_in: usize,
        c_out: usize,
        geom: ConvGeometry,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = c_in * geom.taps();
        let weight = Param::new(
            join(prefix, "w"),
            he_uniform(&[c_out, c_in, geom.kh, geom.kw], fan_in, rng),
        );
        let bias = bias.then(|| Param::new(join(prefix, "b"), Tensor::zeros(&[c_out])));
        Conv2d {
            geom,
            weight,
            bias,
            cache: None,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.dim(1)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.dim(0)
    }

    pub fn forward(&mut self, x: &Tensor<T>, keep_cache: bool) -> Result<Tensor<T>> {
        let (y, cache) = ops::conv2d_forward_batch(
            x,
            &self.weight.value,
            self.bias.as_ref().map(|b| &b.value),
            &self.geom,
        )?;
        self.cache = keep_cache.then_some(cache);
        Ok(y)
    }

    pub fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::State(format!("{}: backward without forward cache", self.weight.name)))?;
        let g = ops::conv2d_backward_batch(&cache, &self.weight.value, grad)?;
        self.weight.grad.add_assign(&g.weight)?;
        if let (Some(b), Some(gb)) = (self.bias.as_mut(), g.bias.as_ref()) {
            b.grad.add_assign(gb)?;
        }
        Ok(g.input)
    }
}

impl<T: Real> Parameterized<T> for Conv2d<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.weight);
        if let Some(b) = &self.bias {
            f(b);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }
}

/// Per-sample channel normalisation with learned scale (ones) and shift (zeros).
#[derive(Debug, Clone)]
pub struct ChannelNorm<T> {
    pub scale: Param<T>,
    pub shift: Param<T>,
    cache: Option<NormCache<T>>,
}

impl<T: Real> ChannelNorm<T> {
    pub fn new(prefix: &str, channels: usize) -> Self {
        ChannelNorm {
            scale: Param::new(join(prefix, "scale"), Tensor::ones(&[channels])).no_decay(),
            shift: Param::new(join(prefix, "shift"), Tensor::zeros(&[channels])).no_decay(),
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, keep_cache: bool) -> Result<Tensor<T>> {
        let (y, cache) = ops::channel_norm_forward(x, &self.scale.value, &self.shift.value)?;
        self.cache = keep_cache.then_some(cache);
        Ok(y)
    }

    pub fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::State(format!("{}: backward without forward cache", self.scale.name)))?;
        let (gx, gs, gb) = ops::channel_norm_backward(&cache, &self.scale.value, grad)?;
        self.scale.grad.add_assign(&gs)?;
        self.shift.grad.add_assign(&gb)?;
        Ok(gx)
    }
}

impl<T: Real> Parameterized<T> for ChannelNorm<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.scale);
        f(&self.shift);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.scale);
        f(&mut self.shift);
    }
}

/// ReLU that remembers which outputs were positive.
#[derive(Debug, Clone, Default)]
pub struct Relu {
    mask: Option<Vec<bool>>,
}

impl Relu {
    pub fn forward<T: Real>(&mut self, mut x: Tensor<T>, keep_cache: bool) -> Tensor<T> {
        let mut mask = keep_cache.then(|| Vec::with_capacity(x.len()));
        for v in x.data_mut() {
            let pos = *v > T::zero();
            if !pos {
                *v = T::zero();
            }
            if let Some(m) = mask.as_mut() {
                m.push(pos);
            }
        }
        self.mask = mask;
        x
    }

    pub fn backward<T: Real>(&mut self, mut grad: Tensor<T>) -> Result<Tensor<T>> {
        let mask = self
            .mask
            .take()
            .ok_or_else(|| Error::State("relu backward without forward cache".into()))?;
        for (g, keep) in grad.data_mut().iter_mut().zip(mask) {
            if !keep {
                *g = T::zero();
            }
        }
        Ok(grad)
    }
}
