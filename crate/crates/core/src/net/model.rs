use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{NetworkConfig, OUTPUT_STRIDE};
use crate::error::{dim_err, Error, Result};
use crate::layers::{ChannelNorm, Conv2d, Param, Parameterized, Relu};
use crate::ops::{self, ConvGeometry};
use crate::sconv::{ProjectedSpatial, SConvMode, SConvState, SpatialProjector};
use crate::tensor::{Real, Tensor};

/// `Train` keeps forward caches and evaluates the auxiliary head; `Eval` does neither.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
pub struct ModelOutput<T> {
    /// `[N, classes, H, W]`.
    pub logits: Tensor<T>,
    /// Auxiliary logits at full resolution; present only in training mode with deep supervision.
    pub aux: Option<Tensor<T>>,
}

/// Parameter counts by role. `sconv_extra` covers the offset generators, mask networks and
/// the shared projector; host weights of guided convolutions count as backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ParamBreakdown {
    pub backbone: usize,
    pub sconv_extra: usize,
    pub decoder: usize,
    pub aux: usize,
    pub total: usize,
}

/// One replaceable 3x3 convolution of the backbone.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvSite {
    pub name: String,
    pub guided: bool,
}

/// Per-layer generator: seeded from the model seed and the layer name, so a layer's initial
/// weights do not depend on which other layers exist.
fn layer_rng(seed: u64, name: &str) -> ChaCha8Rng {
    // FNV-1a; stable across toolchains, unlike the std hasher.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(seed ^ h)
}

fn conv<T: Real>(seed: u64, name: &str, ci: usize, co: usize, k: usize, stride: usize, bias: bool) -> Conv2d<T> {
    let geom = ConvGeometry::square(k, stride, k / 2);
    Conv2d::new(name, ci, co, geom, bias, &mut layer_rng(seed, name))
}

/// Projected spatial features at the projector resolution plus bilinear resizes to every
/// extent a guided convolution asks for. Gradients are collected per extent and folded back.
pub struct SpatialBundle<T> {
    base: ProjectedSpatial<T>,
    resized: Vec<ProjectedSpatial<T>>,
    grads: Vec<Tensor<T>>,
}

impl<T: Real> SpatialBundle<T> {
    pub fn new(base: ProjectedSpatial<T>) -> Self {
        SpatialBundle {
            base,
            resized: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn base(&self) -> &ProjectedSpatial<T> {
        &self.base
    }

    /// Features at extent `h x w`, resized once and reused.
    pub fn at(&mut self, h: usize, w: usize) -> Result<&ProjectedSpatial<T>> {
        if self.base.extent() == (h, w) {
            return Ok(&self.base);
        }
        let pos = match self.resized.iter().position(|s| s.extent() == (h, w)) {
            Some(i) => i,
            None => {
                self.resized.push(crate::sconv::resize_spatial(&self.base, h, w)?);
                self.resized.len() - 1
            }
        };
        Ok(&self.resized[pos])
    }

    pub fn add_grad(&mut self, grad: Tensor<T>) -> Result<()> {
        let (bh, bw) = self.base.extent();
        let g = if (grad.dim(2), grad.dim(3)) == (bh, bw) {
            grad
        } else {
            ops::bilinear_resize_backward(&grad, bh, bw)?
        };
        match self.grads.first_mut() {
            Some(acc) => acc.add_assign(&g)?,
            None => self.grads.push(g),
        }
        Ok(())
    }

    /// Total gradient on the base features (zeros if nothing flowed back).
    pub fn take_grad(&mut self) -> Tensor<T> {
        self.grads
            .pop()
            .unwrap_or_else(|| Tensor::zeros(self.base.features().shape()))
    }
}

enum HostConv<T> {
    Plain(Conv2d<T>),
    Guided(Box<SConvState<T>>),
}

impl<T: Real> HostConv<T> {
    fn new(cfg: &NetworkConfig, name: &str, ci: usize, co: usize, stride: usize, guided: bool) -> Self {
        let geom = ConvGeometry::square(3, stride, 1);
        let mut rng = layer_rng(cfg.seed, name);
        if guided {
            HostConv::Guided(Box::new(SConvState::new(name, ci, co, geom, cfg.f_hidden, false, &mut rng)))
        } else {
            HostConv::Plain(Conv2d::new(name, ci, co, geom, false, &mut rng))
        }
    }

    fn forward(&mut self, x: &Tensor<T>, bundle: Option<&mut SpatialBundle<T>>, keep: bool) -> Result<Tensor<T>> {
        match self {
            HostConv::Plain(c) => c.forward(x, keep),
            HostConv::Guided(s) => {
                let bundle = bundle.ok_or_else(|| Error::State(format!("{}: no spatial input", s.weight.name)))?;
                let sp = bundle.at(x.dim(2), x.dim(3))?;
                s.forward(x, sp, keep)
            }
        }
    }

    fn backward(&mut self, g: &Tensor<T>, bundle: Option<&mut SpatialBundle<T>>) -> Result<Tensor<T>> {
        match self {
            HostConv::Plain(c) => c.backward(g),
            HostConv::Guided(s) => {
                let (gx, gsp) = s.backward_accumulate(g)?;
                if s.mode == SConvMode::Learned {
                    let bundle =
                        bundle.ok_or_else(|| Error::State(format!("{}: no spatial input", s.weight.name)))?;
                    bundle.add_grad(gsp)?;
                }
                Ok(gx)
            }
        }
    }

    fn params(&self, f: &mut dyn FnMut(&Param<T>)) {
        match self {
            HostConv::Plain(c) => c.visit_params(f),
            HostConv::Guided(s) => s.visit_params(f),
        }
    }

    fn params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        match self {
            HostConv::Plain(c) => c.visit_params_mut(f),
            HostConv::Guided(s) => s.visit_params_mut(f),
        }
    }
}

/// conv-norm-relu-conv-norm plus a (projected) shortcut, then ReLU.
struct BasicBlock<T> {
    conv1: HostConv<T>,
    norm1: ChannelNorm<T>,
    relu1: Relu,
    conv2: HostConv<T>,
    norm2: ChannelNorm<T>,
    shortcut: Option<(Conv2d<T>, ChannelNorm<T>)>,
    relu_out: Relu,
}

impl<T: Real> BasicBlock<T> {
    fn forward(&mut self, x: &Tensor<T>, mut bundle: Option<&mut SpatialBundle<T>>, keep: bool) -> Result<Tensor<T>> {
        let h = self.conv1.forward(x, bundle.as_deref_mut(), keep)?;
        let h = self.relu1.forward(self.norm1.forward(&h, keep)?, keep);
        let h = self.conv2.forward(&h, bundle, keep)?;
        let mut h = self.norm2.forward(&h, keep)?;
        match &mut self.shortcut {
            Some((c, n)) => h.add_assign(&n.forward(&c.forward(x, keep)?, keep)?)?,
            None => h.add_assign(x)?,
        }
        Ok(self.relu_out.forward(h, keep))
    }

    fn backward(&mut self, g: Tensor<T>, mut bundle: Option<&mut SpatialBundle<T>>) -> Result<Tensor<T>> {
        let g = self.relu_out.backward(g)?;
        let g_short = match &mut self.shortcut {
            Some((c, n)) => c.backward(&n.backward(&g)?)?,
            None => g.clone(),
        };
        let gm = self.norm2.backward(&g)?;
        let gm = self.conv2.backward(&gm, bundle.as_deref_mut())?;
        let gm = self.norm1.backward(&self.relu1.backward(gm)?)?;
        let mut gx = self.conv1.backward(&gm, bundle)?;
        gx.add_assign(&g_short)?;
        Ok(gx)
    }

    fn convs(&self) -> [&HostConv<T>; 2] {
        [&self.conv1, &self.conv2]
    }

    fn convs_mut(&mut self) -> [&mut HostConv<T>; 2] {
        [&mut self.conv1, &mut self.conv2]
    }

    fn params(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.conv1.params(f);
        self.norm1.visit_params(f);
        self.conv2.params(f);
        self.norm2.visit_params(f);
        if let Some((c, n)) = &self.shortcut {
            c.visit_params(f);
            n.visit_params(f);
        }
    }

    fn params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.conv1.params_mut(f);
        self.norm1.visit_params_mut(f);
        self.conv2.params_mut(f);
        self.norm2.visit_params_mut(f);
        if let Some((c, n)) = &mut self.shortcut {
            c.visit_params_mut(f);
            n.visit_params_mut(f);
        }
    }
}

struct ConvNormRelu<T> {
    conv: Conv2d<T>,
    norm: ChannelNorm<T>,
    relu: Relu,
}

impl<T: Real> ConvNormRelu<T> {
    fn forward(&mut self, x: &Tensor<T>, keep: bool) -> Result<Tensor<T>> {
        let h = self.conv.forward(x, keep)?;
        Ok(self.relu.forward(self.norm.forward(&h, keep)?, keep))
    }

    fn backward(&mut self, g: Tensor<T>) -> Result<Tensor<T>> {
        let g = self.relu.backward(g)?;
        self.conv.backward(&self.norm.backward(&g)?)
    }
}

struct ConvRelu<T> {
    conv: Conv2d<T>,
    relu: Relu,
}

impl<T: Real> ConvRelu<T> {
    fn new(seed: u64, name: &str, ci: usize, co: usize) -> Self {
        ConvRelu {
            conv: conv(seed, name, ci, co, 3, 1, true),
            relu: Relu::default(),
        }
    }

    fn forward(&mut self, x: &Tensor<T>, keep: bool) -> Result<Tensor<T>> {
        Ok(self.relu.forward(self.conv.forward(x, keep)?, keep))
    }

    fn backward(&mut self, g: Tensor<T>) -> Result<Tensor<T>> {
        self.conv.backward(&self.relu.backward(g)?)
    }
}

struct Decoder<T> {
    convs: Vec<ConvRelu<T>>,
    fuse: Option<ConvRelu<T>>,
    classifier: Conv2d<T>,
    deep_hw: (usize, usize),
    low_hw: (usize, usize),
}

struct AuxHead<T> {
    conv: ConvRelu<T>,
    classifier: Conv2d<T>,
    low_hw: (usize, usize),
}

/// The segmentation network, generic over precision.
pub struct SegModel<T> {
    config: NetworkConfig,
    stem: [ConvNormRelu<T>; 2],
    stages: Vec<Vec<BasicBlock<T>>>,
    projector: Option<SpatialProjector<T>>,
    decoder: Decoder<T>,
    aux: Option<AuxHead<T>>,
    bundle: Option<SpatialBundle<T>>,
    skip_hw: (usize, usize),
    /// Set by a training-mode forward pass, consumed by `backward`.
    cached: bool,
}

impl<T: Real> SegModel<T> {
    pub fn new(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let cfg = &config;
        let seed = cfg.seed;
        let sw = cfg.stem_width;
        let stem_layer = |name: &str, ci: usize| ConvNormRelu {
            conv: conv(seed, &format!("{name}.conv"), ci, sw, 3, 2, false),
            norm: ChannelNorm::new(&format!("{name}.norm"), sw),
            relu: Relu::default(),
        };
        let stem = [stem_layer("stem.0", 3), stem_layer("stem.1", sw)];
        let mut stages = Vec::with_capacity(4);
        let mut c_in = sw;
        for s in 0..4 {
            let w = cfg.widths[s];
            let mut blocks = Vec::with_capacity(cfg.blocks[s]);
            for b in 0..cfg.blocks[s] {
                let stride = if b == 0 { cfg.strides[s] } else { 1 };
                let bin = if b == 0 { c_in } else { w };
                let prefix = format!("stage{}.block{b}", s + 1);
                let guided = |c: usize| cfg.sconv_policy[s].contains(&(2 * b + c));
                let shortcut = (stride != 1 || bin != w).then(|| {
                    (
                        conv(seed, &format!("{prefix}.down.conv"), bin, w, 1, stride, false),
                        ChannelNorm::new(&format!("{prefix}.down.norm"), w),
                    )
                });
                blocks.push(BasicBlock {
                    conv1: HostConv::new(cfg, &format!("{prefix}.conv0"), bin, w, stride, guided(0)),
                    norm1: ChannelNorm::new(&format!("{prefix}.norm0"), w),
                    relu1: Relu::default(),
                    conv2: HostConv::new(cfg, &format!("{prefix}.conv1"), w, w, 1, guided(1)),
                    norm2: ChannelNorm::new(&format!("{prefix}.norm1"), w),
                    shortcut,
                    relu_out: Relu::default(),
                });
            }
            stages.push(blocks);
            c_in = w;
        }
        let projector = cfg
            .is_guided()
            .then(|| SpatialProjector::new("phi", cfg.source, &mut layer_rng(seed, "phi")));
        let mut convs = Vec::with_capacity(cfg.decoder_convs);
        let mut d_in = cfg.widths[3];
        for i in 0..cfg.decoder_convs {
            convs.push(ConvRelu::new(seed, &format!("decoder.{i}"), d_in, cfg.decoder_width));
            d_in = cfg.decoder_width;
        }
        let fuse = cfg.decoder_skip.then(|| {
            let f = ConvRelu::new(seed, "decoder.fuse", d_in + sw, cfg.decoder_width);
            d_in = cfg.decoder_width;
            f
        });
        let decoder = Decoder {
            convs,
            fuse,
            classifier: conv(seed, "decoder.classifier", d_in, cfg.num_classes, 1, 1, true),
            deep_hw: (0, 0),
            low_hw: (0, 0),
        };
        let aux = cfg.deep_supervision.then(|| AuxHead {
            conv: ConvRelu::new(seed, "aux.0", cfg.widths[2], cfg.aux_width),
            classifier: conv(seed, "aux.classifier", cfg.aux_width, cfg.num_classes, 1, 1, true),
            low_hw: (0, 0),
        });
        Ok(SegModel {
            config,
            stem,
            stages,
            projector,
            decoder,
            aux,
            bundle: None,
            skip_hw: (0, 0),
            cached: false,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    /// `image: [N, 3, H, W]`, `spatial: [N, c', H, W]` with `H`, `W` multiples of 16.
    /// The spatial input is ignored by a network without guided convolutions.
    pub fn forward(&mut self, image: &Tensor<T>, spatial: &Tensor<T>, mode: Mode) -> Result<ModelOutput<T>> {
        let (n, c, h, w) = image.nchw()?;
        if c != 3 {
            return Err(dim_err!("image must have 3 channels, got {c}"));
        }
        if h % OUTPUT_STRIDE != 0 || w % OUTPUT_STRIDE != 0 || h == 0 || w == 0 {
            return Err(dim_err!("image extent {h}x{w} must be a positive multiple of {OUTPUT_STRIDE}"));
        }
        image.ensure_finite("image")?;
        let keep = mode == Mode::Train;
        self.bundle = None;
        self.cached = false;
        if let Some(proj) = self.projector.as_mut() {
            let (sn, sc, sh, sw) = spatial.nchw()?;
            if (sn, sh, sw) != (n, h, w) || sc != self.config.source.channels() {
                return Err(dim_err!(
                    "spatial input {:?} must be [{n}, {}, {h}, {w}]",
                    spatial.shape(),
                    self.config.source.channels()
                ));
            }
            let ds = self.config.phi_downsample;
            let small = ops::bilinear_resize(spatial, h / ds, w / ds)?;
            self.bundle = Some(SpatialBundle::new(proj.forward(&small, keep)?));
        }

        let skip = self.stem[0].forward(image, keep)?;
        self.skip_hw = (skip.dim(2), skip.dim(3));
        let mut x = self.stem[1].forward(&skip, keep)?;
        let mut aux_logits = None;
        for s in 0..4 {
            for block in &mut self.stages[s] {
                x = block.forward(&x, self.bundle.as_mut(), keep)?;
            }
            if s == 2 && keep {
                if let Some(aux) = self.aux.as_mut() {
                    let a = aux.conv.forward(&x, keep)?;
                    let a = aux.classifier.forward(&a, keep)?;
                    aux.low_hw = (a.dim(2), a.dim(3));
                    aux_logits = Some(ops::bilinear_resize(&a, h, w)?);
                }
            }
        }

        let dec = &mut self.decoder;
        dec.deep_hw = (x.dim(2), x.dim(3));
        for c in &mut dec.convs {
            x = c.forward(&x, keep)?;
        }
        if let Some(fuse) = dec.fuse.as_mut() {
            let up = ops::bilinear_resize(&x, self.skip_hw.0, self.skip_hw.1)?;
            x = fuse.forward(&Tensor::concat_channels(&up, &skip)?, keep)?;
        }
        let low = dec.classifier.forward(&x, keep)?;
        dec.low_hw = (low.dim(2), low.dim(3));
        let logits = ops::bilinear_resize(&low, h, w)?;
        if !keep {
            self.bundle = None;
        }
        self.cached = keep;
        Ok(ModelOutput { logits, aux: aux_logits })
    }

    /// Accumulates parameter gradients for the last training-mode forward pass.
    /// `grad_aux` is required when that pass produced auxiliary logits.
    pub fn backward(&mut self, grad_logits: &Tensor<T>, grad_aux: Option<&Tensor<T>>) -> Result<()> {
        if !std::mem::take(&mut self.cached) {
            return Err(Error::State("model backward without a training-mode forward pass".into()));
        }
        let dec = &mut self.decoder;
        let mut g = ops::bilinear_resize_backward(grad_logits, dec.low_hw.0, dec.low_hw.1)?;
        g = dec.classifier.backward(&g)?;
        let mut g_skip = None;
        if let Some(fuse) = dec.fuse.as_mut() {
            let gcat = fuse.backward(g)?;
            let (gu, gs) = gcat.split_channels(gcat.dim(1) - self.config.stem_width)?;
            g_skip = Some(gs);
            g = ops::bilinear_resize_backward(&gu, dec.deep_hw.0, dec.deep_hw.1)?;
        }
        for c in dec.convs.iter_mut().rev() {
            g = c.backward(g)?;
        }
        for s in (0..4).rev() {
            if s == 2 {
                if let Some(aux) = self.aux.as_mut() {
                    let ga = grad_aux.ok_or_else(|| Error::State("auxiliary head needs a gradient".into()))?;
                    let ga = ops::bilinear_resize_backward(ga, aux.low_hw.0, aux.low_hw.1)?;
                    let ga = aux.conv.backward(aux.classifier.backward(&ga)?)?;
                    g.add_assign(&ga)?;
                }
            }
            for block in self.stages[s].iter_mut().rev() {
                g = block.backward(g, self.bundle.as_mut())?;
            }
        }
        let mut g = self.stem[1].backward(g)?;
        if let Some(gs) = g_skip {
            g.add_assign(&gs)?;
        }
        self.stem[0].backward(g)?;
        if let (Some(proj), Some(mut bundle)) = (self.projector.as_mut(), self.bundle.take()) {
            if self.stages.iter().flatten().any(|b| b.convs().iter().any(|c| matches!(c, HostConv::Guided(s) if s.mode == SConvMode::Learned))) {
                proj.backward(&bundle.take_grad())?;
            }
        }
        Ok(())
    }

    /// Switches every guided convolution between learned and degenerate operation.
    pub fn set_sconv_mode(&mut self, mode: SConvMode) {
        for block in self.stages.iter_mut().flatten() {
            for c in block.convs_mut() {
                if let HostConv::Guided(s) = c {
                    s.mode = mode;
                }
            }
        }
    }

    /// All replaceable 3x3 backbone convolutions in forward order.
    pub fn conv_sites(&self) -> Vec<ConvSite> {
        let mut out = Vec::new();
        for block in self.stages.iter().flatten() {
            for c in block.convs() {
                let (name, guided) = match c {
                    HostConv::Plain(c) => (&c.weight.name, false),
                    HostConv::Guided(s) => (&s.weight.name, true),
                };
                out.push(ConvSite {
                    name: name.trim_end_matches(".w").to_string(),
                    guided,
                });
            }
        }
        out
    }

    /// Guided convolutions in forward order.
    pub fn guided_convs(&self) -> Vec<&SConvState<T>> {
        self.stages
            .iter()
            .flatten()
            .flat_map(|b| b.convs())
            .filter_map(|c| match c {
                HostConv::Guided(s) => Some(s.as_ref()),
                HostConv::Plain(_) => None,
            })
            .collect()
    }

    /// Per guided convolution, the summed offset magnitude of sample `n` from the last forward
    /// pass, min-max scaled to `0..=255` (all zeros when constant).
    pub fn receptive_field_maps(&self, n: usize) -> Result<Vec<ReceptiveFieldMap>> {
        let mut out = Vec::new();
        for s in self.guided_convs() {
            let offsets = s
                .last_offsets()
                .ok_or_else(|| Error::State("receptive field maps need a forward pass first".into()))?;
            if n >= offsets.raw().dim(0) {
                return Err(dim_err!("sample {n} outside batch of {}", offsets.raw().dim(0)));
            }
            let m = offsets.magnitude_sum(n);
            let (lo, hi) = m
                .data()
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v.as_f64()), hi.max(v.as_f64())));
            let span = hi - lo;
            let pixels = m
                .data()
                .iter()
                .map(|v| if span > 0.0 { ((v.as_f64() - lo) / span * 255.0).round() as u8 } else { 0 })
                .collect();
            out.push(ReceptiveFieldMap {
                site: s.weight.name.trim_end_matches(".w").to_string(),
                height: m.dim(0),
                width: m.dim(1),
                pixels,
                max_magnitude: hi,
            });
        }
        Ok(out)
    }

    pub fn param_breakdown(&self) -> ParamBreakdown {
        let mut b = ParamBreakdown {
            backbone: 0,
            sconv_extra: 0,
            decoder: 0,
            aux: 0,
            total: 0,
        };
        self.visit_params(&mut |p| {
            let n = p.numel();
            let slot = if p.name.starts_with("phi.") || p.name.contains(".eta.") || p.name.contains(".f.") {
                &mut b.sconv_extra
            } else if p.name.starts_with("decoder.") {
                &mut b.decoder
            } else if p.name.starts_with("aux.") {
                &mut b.aux
            } else {
                &mut b.backbone
            };
            *slot += n;
            b.total += n;
        });
        b
    }
}

/// Grayscale visualisation of one guided convolution's offsets.
#[derive(Debug, Clone, PartialEq)]
pub struct ReceptiveFieldMap {
    pub site: String,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
    /// Largest summed offset magnitude before scaling.
    pub max_magnitude: f64,
}

impl<T: Real> Parameterized<T> for SegModel<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        for s in &self.stem {
            s.conv.visit_params(f);
            s.norm.visit_params(f);
        }
        for block in self.stages.iter().flatten() {
            block.params(f);
        }
        if let Some(p) = &self.projector {
            p.visit_params(f);
        }
        for c in &self.decoder.convs {
            c.conv.visit_params(f);
        }
        if let Some(fz) = &self.decoder.fuse {
            fz.conv.visit_params(f);
        }
        self.decoder.classifier.visit_params(f);
        if let Some(a) = &self.aux {
            a.conv.conv.visit_params(f);
            a.classifier.visit_params(f);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        for s in &mut self.stem {
            s.conv.visit_params_mut(f);
            s.norm.visit_params_mut(f);
        }
        for block in self.stages.iter_mut().flatten() {
            block.params_mut(f);
        }
        if let Some(p) = &mut self.projector {
            p.visit_params_mut(f);
        }
        for c in &mut self.decoder.convs {
            c.conv.visit_params_mut(f);
        }
        if let Some(fz) = &mut self.decoder.fuse {
            fz.conv.visit_params_mut(f);
        }
        self.decoder.classifier.visit_params_mut(f);
        if let Some(a) = &mut self.aux {
            a.conv.conv.visit_params_mut(f);
            a.classifier.visit_params_mut(f);
        }
    }
}
