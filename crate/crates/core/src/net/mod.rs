//! Segmentation network: a residual backbone whose designated 3x3 convolutions can be guided
//! convolutions, a shared spatial projector, a decoder, and an auxiliary head after stage 3.

mod checkpoint;
mod model;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::ConvGeometry;
use crate::sconv::{SConvState, SpatialProjector, SpatialSource, F_HIDDEN_DEFAULT};

pub use checkpoint::{load_checkpoint, read_manifest, save_checkpoint, CheckpointEntry, CheckpointManifest, MANIFEST_FILE};
pub use model::{ConvSite, Mode, ModelOutput, ParamBreakdown, ReceptiveFieldMap, SegModel, SpatialBundle};

/// Ratio of input resolution to the deepest feature map.
pub const OUTPUT_STRIDE: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub num_classes: usize,
    pub source: SpatialSource,
    /// Channels of both stride-2 stem convolutions.
    pub stem_width: usize,
    pub widths: [usize; 4],
    pub blocks: [usize; 4],
    pub strides: [usize; 4],
    /// Per stage, the block-conv indices (`2 * block + conv`) that become guided convolutions.
    pub sconv_policy: Vec<Vec<usize>>,
    /// Hidden width of the per-position mask network.
    pub f_hidden: usize,
    /// The raw spatial input is bilinearly downsampled by this factor before the projector.
    pub phi_downsample: usize,
    pub deep_supervision: bool,
    pub aux_width: usize,
    pub decoder_width: usize,
    /// Number of 3x3 conv + ReLU layers at the deepest resolution.
    pub decoder_convs: usize,
    /// Fuse the first stem activation (stride 2) into the decoder before the final upsample.
    pub decoder_skip: bool,
    pub seed: u64,
}

impl NetworkConfig {
    /// The desk-scale network used by the experiments.
    ///
    /// The deepest stage is wide (as in deep residual backbones, whose last stage dominates the
    /// parameter count) so that the guidance machinery, whose size does not depend on the host
    /// width, stays a small fraction of the model.
    pub fn toy(num_classes: usize) -> Self {
        NetworkConfig {
            num_classes,
            source: SpatialSource::Depth,
            stem_width: 16,
            widths: [32, 64, 128, 448],
            blocks: [2, 2, 2, 2],
            strides: [1, 2, 2, 1],
            sconv_policy: default_policy(&[2, 2, 2, 2]),
            f_hidden: F_HIDDEN_DEFAULT,
            phi_downsample: 4,
            deep_supervision: true,
            aux_width: 64,
            decoder_width: 64,
            decoder_convs: 2,
            decoder_skip: true,
            seed: 0,
        }
    }

    /// ResNet101-like widths and depths. Documented for reference; far too large for CPU training.
    pub fn full_scale(num_classes: usize) -> Self {
        let blocks = [3, 4, 23, 3];
        NetworkConfig {
            num_classes,
            source: SpatialSource::Hha,
            stem_width: 64,
            widths: [256, 512, 1024, 2048],
            blocks,
            strides: [1, 2, 2, 1],
            sconv_policy: default_policy(&blocks),
            f_hidden: 64 * 9,
            phi_downsample: 1,
            deep_supervision: true,
            aux_width: 256,
            decoder_width: 256,
            decoder_convs: 2,
            decoder_skip: false,
            seed: 0,
        }
    }

    /// The same network with every guided convolution replaced by a plain one.
    pub fn baseline(&self) -> Self {
        NetworkConfig {
            sconv_policy: vec![Vec::new(); 4],
            ..self.clone()
        }
    }

    pub fn is_guided(&self) -> bool {
        self.sconv_policy.iter().any(|s| !s.is_empty())
    }

    pub fn sconv_count(&self) -> usize {
        self.sconv_policy.iter().map(Vec::len).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(2..255).contains(&self.num_classes) {
            return bad(format!("num_classes {} must be in 2..255", self.num_classes));
        }
        if self.stem_width == 0 || self.widths.contains(&0) || self.blocks.contains(&0) {
            return bad("widths and block counts must be positive".into());
        }
        if self.strides.iter().any(|&s| s != 1 && s != 2) {
            return bad(format!("stage strides {:?} must be 1 or 2", self.strides));
        }
        if 4 * self.strides.iter().product::<usize>() != OUTPUT_STRIDE {
            return bad(format!("stem (4) x stage strides {:?} must give output stride {OUTPUT_STRIDE}", self.strides));
        }
        if self.sconv_policy.len() != 4 {
            return bad(format!("sconv_policy needs 4 stages, got {}", self.sconv_policy.len()));
        }
        for (s, idx) in self.sconv_policy.iter().enumerate() {
            let convs = 2 * self.blocks[s];
            let mut seen = vec![false; convs];
            for &i in idx {
                if i >= convs {
                    return bad(format!("stage {} has {convs} convs; policy index {i} is invalid", s + 1));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return bad(format!("stage {} policy repeats index {i}", s + 1));
                }
            }
        }
        if self.is_guided() && self.f_hidden == 0 {
            return bad("f_hidden must be positive".into());
        }
        if self.phi_downsample == 0 || OUTPUT_STRIDE % self.phi_downsample != 0 {
            return bad(format!("phi_downsample {} must divide {OUTPUT_STRIDE}", self.phi_downsample));
        }
        if self.decoder_width == 0 || (self.deep_supervision && self.aux_width == 0) {
            return bad("decoder and aux widths must be positive".into());
        }
        if matches!(self.source, SpatialSource::RgbFeature(_)) {
            return bad("the network takes depth-derived guidance (depth, hha or coords)".into());
        }
        Ok(())
    }

    /// Parameter counts derived from layer shapes alone, for cross-checking the registry.
    pub fn expected_breakdown(&self) -> ParamBreakdown {
        let g3 = ConvGeometry::square(3, 1, 1);
        let conv = |ci: usize, co: usize, k: usize, bias: bool| co * ci * k * k + if bias { co } else { 0 };
        let norm = |c: usize| 2 * c;
        let mut backbone = conv(3, self.stem_width, 3, false) + norm(self.stem_width);
        backbone += conv(self.stem_width, self.stem_width, 3, false) + norm(self.stem_width);
        let mut extra = 0;
        let mut c_in = self.stem_width;
        for s in 0..4 {
            let w = self.widths[s];
            for b in 0..self.blocks[s] {
                let stride = if b == 0 { self.strides[s] } else { 1 };
                let block_in = if b == 0 { c_in } else { w };
                for c in 0..2 {
                    let ci = if c == 0 { block_in } else { w };
                    backbone += conv(ci, w, 3, false) + norm(w);
                    if self.sconv_policy[s].contains(&(2 * b + c)) {
                        extra += SConvState::<f32>::eta_param_count(&g3) + SConvState::<f32>::f_param_count(&g3, self.f_hidden);
                    }
                }
                if stride != 1 || block_in != w {
                    backbone += conv(block_in, w, 1, false) + norm(w);
                }
            }
            c_in = w;
        }
        if self.is_guided() {
            extra += SpatialProjector::<f32>::expected_param_count(self.source);
        }
        let mut decoder = 0;
        let mut d_in = self.widths[3];
        for _ in 0..self.decoder_convs {
            decoder += conv(d_in, self.decoder_width, 3, true);
            d_in = self.decoder_width;
        }
        if self.decoder_skip {
            decoder += conv(d_in + self.stem_width, self.decoder_width, 3, true);
            d_in = self.decoder_width;
        }
        decoder += conv(d_in, self.num_classes, 1, true);
        let aux = if self.deep_supervision {
            conv(self.widths[2], self.aux_width, 3, true) + conv(self.aux_width, self.num_classes, 1, true)
        } else {
            0
        };
        ParamBreakdown {
            backbone,
            sconv_extra: extra,
            decoder,
            aux,
            total: backbone + extra + decoder + aux,
        }
    }
}

/// Replaces the first and the last two 3x3 convolutions of every stage.
pub fn default_policy(blocks: &[usize; 4]) -> Vec<Vec<usize>> {
    blocks
        .iter()
        .map(|&b| {
            let n = 2 * b;
            let mut v = vec![0];
            for i in n.saturating_sub(2)..n {
                if !v.contains(&i) {
                    v.push(i);
                }
            }
            v
        })
        .collect()
}
