//! Synthetic RGBD scenes in which some classes share an RGB texture and differ only in depth.
//!
//! A scene is a textured, slightly tilted background plane (class 0) with a few non-overlapping
//! axis-aligned objects in front of, flush with, or recessed into it. For each confusable pair
//! `(a, b)` both classes use the same texture generator; only their depth relief differs.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{write_depth_mm, write_label, write_rgb, DatasetManifest, ManifestEntry, Split, DEFAULT_IGNORE, MANIFEST_NAME};
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, DepthMap};
use crate::tensor::{LabelMap, Tensor};

/// Whole-scene layout attempts before giving up.
const LAYOUT_ATTEMPTS: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub num_classes: usize,
    /// Class pairs rendered with the same texture and different depth relief.
    pub confusable_pairs: Vec<[u8; 2]>,
    /// Standard deviation of additive depth noise, metres.
    pub depth_noise: f64,
    /// Minimum relief (metres) separating the members of a confusable pair.
    pub depth_margin: f64,
    /// Inclusive range of objects per scene.
    pub objects: [usize; 2],
    /// Inclusive range of object side lengths, pixels.
    pub object_size: [usize; 2],
    /// Fraction of depth pixels dropped to zero (sensor holes).
    pub hole_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            height: 64,
            width: 64,
            train_scenes: 200,
            val_scenes: 50,
            num_classes: 6,
            confusable_pairs: vec![[1, 2], [3, 4]],
            depth_noise: 0.01,
            depth_margin: 0.4,
            objects: [2, 4],
            object_size: [12, 24],
            hole_fraction: 0.005,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Relief {
    Flush,
    Protruding,
    Recessed,
    /// Unpaired classes: anywhere from flush to protruding.
    Free,
}

#[derive(Debug, Clone)]
struct ClassStyle {
    texture: usize,
    relief: Relief,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.height < 8 || self.width < 8 {
            return bad(format!("image {}x{} is too small", self.height, self.width));
        }
        if !(3..DEFAULT_IGNORE as usize).contains(&self.num_classes) {
            return bad(format!("num_classes {} must be in 3..255", self.num_classes));
        }
        if self.confusable_pairs.is_empty() {
            return bad("at least one confusable class pair is required".into());
        }
        let mut used = vec![false; self.num_classes];
        for &[a, b] in &self.confusable_pairs {
            for c in [a, b] {
                if c == 0 || c as usize >= self.num_classes {
                    return bad(format!("pair class {c} must be in 1..{}", self.num_classes));
                }
                if std::mem::replace(&mut used[c as usize], true) {
                    return bad(format!("class {c} appears in more than one pair slot"));
                }
            }
        }
        let [lo, hi] = self.object_size;
        if lo == 0 || lo > hi || hi > self.height.min(self.width) {
            return bad(format!("object_size {:?} must be ordered and fit the image", self.object_size));
        }
        if self.objects[0] > self.objects[1] {
            return bad(format!("objects range {:?} is not ordered", self.objects));
        }
        if !(self.depth_noise >= 0.0 && self.depth_margin > 0.0 && (0.0..1.0).contains(&self.hole_fraction)) {
            return bad("depth_noise >= 0, depth_margin > 0 and hole_fraction in [0, 1) required".into());
        }
        if self.train_scenes == 0 {
            return bad("train_scenes must be positive".into());
        }
        Ok(())
    }

    /// Texture and relief for every class; class 0 is the background.
    fn styles(&self) -> Vec<ClassStyle> {
        let mut styles = vec![None; self.num_classes];
        styles[0] = Some(ClassStyle {
            texture: 0,
            relief: Relief::Flush,
        });
        let mut next = 1;
        for (j, &[a, b]) in self.confusable_pairs.iter().enumerate() {
            let first = if j % 2 == 0 { Relief::Flush } else { Relief::Recessed };
            styles[a as usize] = Some(ClassStyle { texture: next, relief: first });
            styles[b as usize] = Some(ClassStyle {
                texture: next,
                relief: Relief::Protruding,
            });
            next += 1;
        }
        styles
            .into_iter()
            .map(|s| {
                s.unwrap_or_else(|| {
                    next += 1;
                    ClassStyle {
                        texture: next - 1,
                        relief: Relief::Free,
                    }
                })
            })
            .collect()
    }

    pub fn intrinsics(&self) -> CameraIntrinsics {
        CameraIntrinsics {
            fx: self.width as f64,
            fy: self.width as f64,
            cx: (self.width as f64 - 1.0) / 2.0,
            cy: (self.height as f64 - 1.0) / 2.0,
        }
    }
}

const PALETTE: [[f64; 3]; 8] = [
    [0.55, 0.55, 0.60],
    [0.80, 0.30, 0.25],
    [0.25, 0.60, 0.30],
    [0.30, 0.35, 0.80],
    [0.80, 0.75, 0.30],
    [0.60, 0.30, 0.70],
    [0.30, 0.70, 0.75],
    [0.85, 0.55, 0.20],
];

/// Pattern intensity in `[0, 1]` for texture `t` at shifted pixel `(y, x)`.
fn pattern(t: usize, y: i64, x: i64) -> f64 {
    let (period, kind) = (4 + (t % 4) as i64, t % 5);
    match kind {
        0 => ((y as f64 * 0.45).sin() * (x as f64 * 0.3).cos() + 1.0) / 2.0,
        1 => (y.rem_euclid(period) < period / 2) as u8 as f64,
        2 => ((y.div_euclid(period) + x.div_euclid(period)) % 2 == 0) as u8 as f64,
        3 => ((x + y).rem_euclid(period) < period / 2) as u8 as f64,
        _ => (y.rem_euclid(period) == 0 || x.rem_euclid(period) == 0) as u8 as f64,
    }
}

fn colour(t: usize) -> [f64; 3] {
    let base = PALETTE[t % PALETTE.len()];
    let shade = 1.0 - 0.15 * (t / PALETTE.len()) as f64;
    base.map(|v| v * shade)
}

struct Rect {
    y: usize,
    x: usize,
    h: usize,
    w: usize,
}

impl Rect {
    fn overlaps(&self, o: &Rect, gap: usize) -> bool {
        self.y < o.y + o.h + gap && o.y < self.y + self.h + gap && self.x < o.x + o.w + gap && o.x < self.x + self.w + gap
    }
}

/// One rendered scene before quantisation to PNG.
pub struct Scene {
    pub rgb: Tensor<f32>,
    pub depth: DepthMap,
    pub label: LabelMap,
}

fn layout(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<Vec<(Rect, u8)>> {
    let count = rng.gen_range(cfg.objects[0]..=cfg.objects[1]);
    let [lo, hi] = cfg.object_size;
    'attempt: for _ in 0..LAYOUT_ATTEMPTS {
        let mut placed: Vec<(Rect, u8)> = Vec::with_capacity(count);
        for _ in 0..count {
            let (h, w) = (rng.gen_range(lo..=hi), rng.gen_range(lo..=hi));
            let r = Rect {
                y: rng.gen_range(0..=cfg.height - h),
                x: rng.gen_range(0..=cfg.width - w),
                h,
                w,
            };
            if placed.iter().any(|(p, _)| p.overlaps(&r, 1)) {
                continue 'attempt;
            }
            placed.push((r, rng.gen_range(1..cfg.num_classes) as u8));
        }
        return Ok(placed);
    }
    Err(Error::Generation(format!(
        "could not place {count} non-overlapping objects of size {lo}..={hi} in {}x{} after {LAYOUT_ATTEMPTS} attempts",
        cfg.height, cfg.width
    )))
}

/// Renders one scene from its own generator.
pub fn render_scene(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<Scene> {
    let (h, w) = (cfg.height, cfg.width);
    let styles = cfg.styles();
    let objects = layout(cfg, rng)?;
    let z0 = rng.gen_range(3.0..4.0);
    let (gy, gx) = (rng.gen_range(-0.4..0.4), rng.gen_range(-0.4..0.4));
    let plane = |y: usize, x: usize| z0 + gy * (y as f64 / h as f64 - 0.5) + gx * (x as f64 / w as f64 - 0.5);

    let mut label = vec![0u8; h * w];
    let mut relief = vec![0.0f64; h * w];
    let mut shift = vec![(0i64, 0i64); h * w];
    let bg_shift = (rng.gen_range(0..16), rng.gen_range(0..16));
    shift.fill(bg_shift);
    let m = cfg.depth_margin;
    for (r, class) in &objects {
        let dz = match styles[*class as usize].relief {
            Relief::Flush => 0.0,
            Relief::Protruding => -rng.gen_range(m..2.0 * m),
            Relief::Recessed => rng.gen_range(m..2.0 * m),
            Relief::Free => -rng.gen_range(0.0..2.0 * m),
        };
        let s = (rng.gen_range(0..16), rng.gen_range(0..16));
        for y in r.y..r.y + r.h {
            for x in r.x..r.x + r.w {
                label[y * w + x] = *class;
                relief[y * w + x] = dz;
                shift[y * w + x] = s;
            }
        }
    }

    let colour_noise = Normal::new(0.0, 0.03).expect("valid normal");
    let depth_noise = Normal::new(0.0, cfg.depth_noise).expect("valid normal");
    let mut rgb = vec![0.0f32; 3 * h * w];
    let mut meters = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let t = styles[label[p] as usize].texture;
            let (sy, sx) = shift[p];
            let v = 0.7 + 0.3 * pattern(t, y as i64 + sy, x as i64 + sx);
            let c = colour(t);
            for ch in 0..3 {
                let val = c[ch] * v + colour_noise.sample(rng);
                rgb[ch * h * w + p] = val.clamp(0.0, 1.0) as f32;
            }
            let z = plane(y, x) + relief[p] + depth_noise.sample(rng);
            meters[p] = if rng.gen_bool(cfg.hole_fraction) { 0.0 } else { z.max(0.1) };
        }
    }
    Ok(Scene {
        rgb: Tensor::from_vec(&[3, h, w], rgb)?,
        depth: DepthMap::new(h, w, meters)?,
        label: LabelMap::new(h, w, label)?,
    })
}

fn scene_rng(seed: u64, split: Split, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((split as u64) << 40) | index as u64);
    rng
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub root: PathBuf,
    pub train: DatasetManifest,
    pub val: Option<DatasetManifest>,
}

impl SynthOutput {
    pub fn train_manifest_path(&self) -> PathBuf {
        self.root.join("train").join(MANIFEST_NAME)
    }

    pub fn val_manifest_path(&self) -> PathBuf {
        self.root.join("val").join(MANIFEST_NAME)
    }
}

/// Writes `train/` and (if any val scenes) `val/` splits plus `intrinsics.txt` under `out`.
/// A non-empty `out` is only reused with `force`.
pub fn synth_generate(cfg: &SynthConfig, out: impl AsRef<Path>, force: bool) -> Result<SynthOutput> {
    cfg.validate()?;
    let out = out.as_ref();
    if out.exists() {
        let non_empty = fs::read_dir(out).map_err(|e| Error::io(out, e))?.next().is_some();
        if non_empty && !force {
            return Err(Error::Config(format!(
                "output directory {} is not empty (pass --force to overwrite)",
                out.display()
            )));
        }
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    cfg.intrinsics().write(out.join("intrinsics.txt"))?;
    let text = serde_json::to_string_pretty(cfg).map_err(|e| Error::Data(e.to_string()))?;
    fs::write(out.join("synth.json"), text + "\n").map_err(|e| Error::io(out.join("synth.json"), e))?;

    let write_split = |split: Split, n: usize| -> Result<DatasetManifest> {
        let dir = out.join(split.name());
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        for sub in ["rgb", "depth", "label"] {
            fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
        }
        let mut entries = Vec::with_capacity(n);
        for i in 0..n {
            let scene = render_scene(cfg, &mut scene_rng(cfg.seed, split, i))?;
            let name = format!("scene_{i:05}.png");
            let e = ManifestEntry {
                rgb: Path::new("rgb").join(&name),
                depth: Path::new("depth").join(&name),
                label: Path::new("label").join(&name),
            };
            write_rgb(dir.join(&e.rgb), &scene.rgb)?;
            write_depth_mm(dir.join(&e.depth), &scene.depth)?;
            write_label(dir.join(&e.label), &scene.label)?;
            entries.push(e);
        }
        let m = DatasetManifest {
            root: dir.clone(),
            split: Some(split),
            num_classes: cfg.num_classes,
            ignore_label: DEFAULT_IGNORE,
            intrinsics: PathBuf::from("../intrinsics.txt"),
            entries,
        };
        m.write(dir.join(MANIFEST_NAME))?;
        Ok(m)
    };
    let train = write_split(Split::Train, cfg.train_scenes)?;
    let val = if cfg.val_scenes > 0 {
        Some(write_split(Split::Val, cfg.val_scenes)?)
    } else {
        None
    };
    Ok(SynthOutput {
        root: out.to_path_buf(),
        train,
        val,
    })
}
