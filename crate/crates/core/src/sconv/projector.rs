use rand::Rng;

use super::{ProjectedSpatial, SpatialSource, PROJECTED_CHANNELS};
use crate::error::{dim_err, Result};
use crate::layers::{join, Conv2d, Param, Parameterized, Relu};
use crate::ops::ConvGeometry;
use crate::tensor::{Real, Tensor};

/// Spatial projector: three 3x3 convolutions `c' -> 64 -> 64 -> 64`, each followed by ReLU.
#[derive(Debug, Clone)]
pub struct SpatialProjector<T> {
    pub source: SpatialSource,
    pub convs: [Conv2d<T>; 3],
    relus: [Relu; 3],
}

impl<T: Real> SpatialProjector<T> {
    pub fn new<R: Rng>(prefix: &str, source: SpatialSource, rng: &mut R) -> Self {
        let g = ConvGeometry::square(3, 1, 1);
        let c = PROJECTED_CHANNELS;
        SpatialProjector {
            source,
            convs: [
                Conv2d::new(&join(prefix, "0"), source.channels(), c, g, true, rng),
                Conv2d::new(&join(prefix, "1"), c, c, g, true, rng),
                Conv2d::new(&join(prefix, "2"), c, c, g, true, rng),
            ],
            relus: Default::default(),
        }
    }

    /// Projects `[N, c', h, w]` (or `[c', h, w]`) raw spatial input to `64` channels.
    pub fn forward(&mut self, spatial: &Tensor<T>, keep_cache: bool) -> Result<ProjectedSpatial<T>> {
        let x = match spatial.rank() {
            3 => spatial.clone().unsqueeze0(),
            4 => spatial.clone(),
            _ => return Err(dim_err!("spatial input must be [c',h,w] or [N,c',h,w], got {:?}", spatial.shape())),
        };
        let c = x.dim(1);
        if c != self.source.channels() {
            return Err(dim_err!(
                "projector expects {} spatial channels for {:?}, got {c}",
                self.source.channels(),
                self.source
            ));
        }
        x.ensure_finite("spatial input (sanitize depth holes first)")?;
        let mut h = x;
        for (conv, relu) in self.convs.iter_mut().zip(self.relus.iter_mut()) {
            h = relu.forward(conv.forward(&h, keep_cache)?, keep_cache);
        }
        ProjectedSpatial::new(h, self.source)
    }

    /// Backward from a gradient on the projected features; returns the raw-input gradient.
    pub fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = grad.clone();
        for (conv, relu) in self.convs.iter_mut().zip(self.relus.iter_mut()).rev() {
            g = conv.backward(&relu.backward(g)?)?;
        }
        Ok(g)
    }

    /// `c'*64*9 + 64 + 2*(64*64*9 + 64)`.
    pub fn expected_param_count(source: SpatialSource) -> usize {
        let c = PROJECTED_CHANNELS;
        source.channels() * c * 9 + c + 2 * (c * c * 9 + c)
    }
}

impl<T: Real> Parameterized<T> for SpatialProjector<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.convs.iter().for_each(|c| c.visit_params(f));
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.convs.iter_mut().for_each(|c| c.visit_params_mut(f));
    }
}

/// Functional form: project `S` with a freshly cached-free pass of `projector`.
pub fn spatial_project<T: Real>(
    spatial: &Tensor<T>,
    projector: &mut SpatialProjector<T>,
) -> Result<ProjectedSpatial<T>> {
    projector.forward(spatial, false)
}
