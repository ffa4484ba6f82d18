use rand::Rng;

use super::TrainConfig;
use crate::data::Sample;
use crate::error::Result;
use crate::geometry::{sanitize_depth, CameraIntrinsics, DepthMap};
use crate::ops;
use crate::tensor::{LabelMap, Tensor};

/// One geometric transform shared by RGB, depth and labels: scale, then crop at `(top, left)`
/// in the scaled image (negative offsets pad), then an optional horizontal flip.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transform {
    pub scale: f64,
    pub scaled_hw: (usize, usize),
    pub top: isize,
    pub left: isize,
    pub flip: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedSample {
    pub rgb: Tensor<f32>,
    /// Hole-free depth (holes and padding filled from the nearest valid pixel).
    pub depth: DepthMap,
    pub label: LabelMap,
    pub intrinsics: CameraIntrinsics,
}

fn offset<R: Rng>(scaled: usize, crop: usize, rng: &mut R) -> isize {
    if scaled >= crop {
        rng.gen_range(0..=scaled - crop) as isize
    } else {
        -(rng.gen_range(0..=crop - scaled) as isize)
    }
}

pub fn sample_transform<R: Rng>(h: usize, w: usize, cfg: &TrainConfig, rng: &mut R) -> Transform {
    let [lo, hi] = cfg.scale_range;
    let scale = if lo == hi { lo } else { rng.gen_range(lo..hi) };
    let sh = ((h as f64 * scale).round() as usize).max(1);
    let sw = ((w as f64 * scale).round() as usize).max(1);
    let top = offset(sh, cfg.crop[0], rng);
    let left = offset(sw, cfg.crop[1], rng);
    let flip = rng.gen_bool(cfg.hflip_prob);
    Transform {
        scale,
        scaled_hw: (sh, sw),
        top,
        left,
        flip,
    }
}

/// Applies `t` producing a `crop`-sized sample. RGB and depth are resampled bilinearly, labels
/// by nearest neighbour; depth values are divided by the scale; padding gets `ignore` labels.
pub fn apply_transform(
    s: &Sample,
    k: &CameraIntrinsics,
    t: &Transform,
    crop: [usize; 2],
    ignore: u8,
) -> Result<AugmentedSample> {
    let (h, w) = s.extent();
    let (sh, sw) = t.scaled_hw;
    let depth = sanitize_depth(&s.depth)?;
    let (rgb, dvals, label) = if (sh, sw) == (h, w) && t.scale == 1.0 {
        (s.rgb.clone(), depth.meters, s.label.data.clone())
    } else {
        let rgb = ops::bilinear_resize(&s.rgb, sh, sw)?;
        let d = ops::bilinear_resize(&Tensor::from_vec(&[h, w], depth.meters)?, sh, sw)?;
        let dvals = d.data().iter().map(|v| v / t.scale).collect();
        let mut lab = Vec::with_capacity(sh * sw);
        for y in 0..sh {
            let sy = (((y as f64 + 0.5) * h as f64 / sh as f64) as usize).min(h - 1);
            for x in 0..sw {
                let sx = (((x as f64 + 0.5) * w as f64 / sw as f64) as usize).min(w - 1);
                lab.push(s.label.data[sy * w + sx]);
            }
        }
        (rgb, dvals, lab)
    };
    let [ch, cw] = crop;
    let mut out_rgb = vec![0.0f32; 3 * ch * cw];
    let mut out_d = vec![0.0f64; ch * cw];
    let mut out_l = vec![ignore; ch * cw];
    let (rp, op) = (sh * sw, ch * cw);
    for y in 0..ch {
        let yy = y as isize + t.top;
        if yy < 0 || yy >= sh as isize {
            continue;
        }
        for x in 0..cw {
            let xs = if t.flip { cw - 1 - x } else { x };
            let xx = xs as isize + t.left;
            if xx < 0 || xx >= sw as isize {
                continue;
            }
            let src = yy as usize * sw + xx as usize;
            let dst = y * cw + x;
            for c in 0..3 {
                out_rgb[c * op + dst] = rgb.data()[c * rp + src];
            }
            out_d[dst] = dvals[src];
            out_l[dst] = label[src];
        }
    }
    let mut kk = k.scaled(t.scale).cropped(t.top as f64, t.left as f64);
    if t.flip {
        kk = kk.flipped(cw);
    }
    Ok(AugmentedSample {
        rgb: Tensor::from_vec(&[3, ch, cw], out_rgb)?,
        depth: sanitize_depth(&DepthMap::new(ch, cw, out_d)?)?,
        label: LabelMap::new(ch, cw, out_l)?,
        intrinsics: kk,
    })
}

/// Draws a transform from `cfg` and applies it.
pub fn augment<R: Rng>(
    s: &Sample,
    k: &CameraIntrinsics,
    cfg: &TrainConfig,
    ignore: u8,
    rng: &mut R,
) -> Result<AugmentedSample> {
    let (h, w) = s.extent();
    let t = sample_transform(h, w, cfg, rng);
    apply_transform(s, k, &t, cfg.crop, ignore)
}
