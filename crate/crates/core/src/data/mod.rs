//! Dataset manifests, PNG sample I/O, and the synthetic RGBD scene generator.
//!
//! `manifest.txt` starts with `classes=<n> ignore=<id> intrinsics=<path>` followed by one
//! `rgb<TAB>depth<TAB>label` line per sample. Paths are relative to the manifest's directory.
//! RGB is 8-bit, depth 16-bit millimetres (0 = hole), labels 8-bit.

mod synth;

use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, Rgb};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, DepthMap};
use crate::tensor::{LabelMap, Tensor};

pub use synth::{render_scene, synth_generate, Scene, SynthConfig, SynthOutput};

pub const MANIFEST_NAME: &str = "manifest.txt";
pub const DEFAULT_IGNORE: u8 = 255;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct ManifestEntry {
    pub rgb: PathBuf,
    pub depth: PathBuf,
    pub label: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    /// Directory that entry paths are relative to.
    pub root: PathBuf,
    /// Taken from the manifest's directory name when it is `train`, `val` or `test`.
    pub split: Option<Split>,
    pub num_classes: usize,
    pub ignore_label: u8,
    pub intrinsics: PathBuf,
    /// Sorted by RGB path.
    pub entries: Vec<ManifestEntry>,
}

/// One RGBD sample: RGB in `[0, 1]` as `[3, h, w]`, metric depth with holes, labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub rgb: Tensor<f32>,
    pub depth: DepthMap,
    pub label: LabelMap,
}

impl Sample {
    pub fn extent(&self) -> (usize, usize) {
        (self.label.height, self.label.width)
    }
}

impl DatasetManifest {
    /// Parses manifest text; `root` is the directory entry paths are relative to.
    pub fn parse(text: &str, root: impl Into<PathBuf>) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::Data("manifest is empty".into()))?;
        let (mut classes, mut ignore, mut intrinsics) = (None, None, None);
        for tok in header.split_whitespace() {
            let (k, v) = tok
                .split_once('=')
                .ok_or_else(|| Error::Data(format!("manifest header token `{tok}` is not key=value")))?;
            let bad = |e: &dyn std::fmt::Display| Error::Data(format!("manifest header `{tok}`: {e}"));
            match k {
                "classes" => classes = Some(v.parse::<usize>().map_err(|e| bad(&e))?),
                "ignore" => ignore = Some(v.parse::<u8>().map_err(|e| bad(&e))?),
                "intrinsics" => intrinsics = Some(PathBuf::from(v)),
                _ => return Err(Error::Data(format!("unknown manifest header key `{k}`"))),
            }
        }
        let num_classes = classes.ok_or_else(|| Error::Data("manifest header lacks classes=".into()))?;
        let ignore_label = ignore.ok_or_else(|| Error::Data("manifest header lacks ignore=".into()))?;
        let intrinsics = intrinsics.ok_or_else(|| Error::Data("manifest header lacks intrinsics=".into()))?;
        if num_classes < 2 || num_classes > ignore_label as usize {
            return Err(Error::Data(format!(
                "classes={num_classes} must be at least 2 and not exceed the ignore id {ignore_label}"
            )));
        }
        let mut entries = Vec::new();
        for (i, line) in lines {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 || f.iter().any(|s| s.is_empty()) {
                return Err(Error::Data(format!(
                    "manifest line {}: expected `rgb<TAB>depth<TAB>label`",
                    i + 1
                )));
            }
            entries.push(ManifestEntry {
                rgb: f[0].into(),
                depth: f[1].into(),
                label: f[2].into(),
            });
        }
        entries.sort();
        let root = root.into();
        let split = root
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.parse().ok());
        Ok(DatasetManifest {
            root,
            split,
            num_classes,
            ignore_label,
            intrinsics,
            entries,
        })
    }

    /// Reads a manifest file and checks that every referenced file exists.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let m = Self::parse(&text, root)?;
        let missing = |p: &Path| Error::io(p, std::io::Error::new(std::io::ErrorKind::NotFound, "referenced by manifest"));
        let k = m.root.join(&m.intrinsics);
        if !k.is_file() {
            return Err(missing(&k));
        }
        for e in &m.entries {
            for p in [&e.rgb, &e.depth, &e.label] {
                let full = m.root.join(p);
                if !full.is_file() {
                    return Err(missing(&full));
                }
            }
        }
        Ok(m)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "classes={} ignore={} intrinsics={}\n",
            self.num_classes,
            self.ignore_label,
            self.intrinsics.display()
        );
        for e in &self.entries {
            s.push_str(&format!("{}\t{}\t{}\n", e.rgb.display(), e.depth.display(), e.label.display()));
        }
        s
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn read_intrinsics(&self) -> Result<CameraIntrinsics> {
        CameraIntrinsics::read(self.root.join(&self.intrinsics))
    }
}

/// Loads sample `index`; depth zeros become holes.
pub fn load_sample(m: &DatasetManifest, index: usize) -> Result<Sample> {
    let e = m
        .entries
        .get(index)
        .ok_or_else(|| Error::Data(format!("sample {index} outside manifest of {}", m.len())))?;
    let rgb = read_rgb(m.root.join(&e.rgb))?;
    let depth = read_depth_mm(m.root.join(&e.depth))?;
    let label = read_label(m.root.join(&e.label))?;
    let (h, w) = (label.height, label.width);
    if (rgb.dim(1), rgb.dim(2)) != (h, w) || (depth.height, depth.width) != (h, w) {
        return Err(Error::Data(format!(
            "sample {index}: rgb {}x{}, depth {}x{}, label {h}x{w} disagree",
            rgb.dim(1),
            rgb.dim(2),
            depth.height,
            depth.width
        )));
    }
    if let Some(&bad) = label.data.iter().find(|&&v| v != m.ignore_label && v as usize >= m.num_classes) {
        return Err(Error::Data(format!(
            "{}: label {bad} outside [0, {})",
            e.label.display(),
            m.num_classes
        )));
    }
    Ok(Sample { rgb, depth, label })
}

pub fn load_all(m: &DatasetManifest) -> Result<Vec<Sample>> {
    (0..m.len()).map(|i| load_sample(m, i)).collect()
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    })
}

fn save<P, C>(img: &ImageBuffer<P, C>, path: &Path) -> Result<()>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// 8-bit RGB PNG as `[3, h, w]` in `[0, 1]`.
pub fn read_rgb(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let img = open(path)?;
    if !matches!(img.color(), image::ColorType::Rgb8 | image::ColorType::Rgba8) {
        return Err(Error::Image {
            path: path.to_path_buf(),
            message: format!("expected 8-bit RGB, got {:?}", img.color()),
        });
    }
    let img = img.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Ok(Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        raw[p * 3 + c] as f32 / 255.0
    }))
}

/// Writes `[3, h, w]` values in `[0, 1]` as 8-bit RGB (rounded, clamped).
pub fn write_rgb(path: impl AsRef<Path>, rgb: &Tensor<f32>) -> Result<()> {
    let (c, h, w) = rgb.chw()?;
    if c != 3 {
        return Err(crate::error::Error::Dimension(format!("rgb needs 3 channels, got {c}")));
    }
    let d = rgb.data();
    let img = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let p = y as usize * w + x as usize;
        Rgb([0, 1, 2].map(|ch| (d[ch * h * w + p].clamp(0.0, 1.0) * 255.0).round() as u8))
    });
    save(&img, path.as_ref())
}

/// 16-bit millimetre PNG to metres; zero stays zero (a hole).
pub fn read_depth_mm(path: impl AsRef<Path>) -> Result<DepthMap> {
    let path = path.as_ref();
    let img = open(path)?;
    if img.color() != image::ColorType::L16 {
        return Err(Error::Image {
            path: path.to_path_buf(),
            message: format!("expected 16-bit grayscale depth, got {:?}", img.color()),
        });
    }
    let img = img.to_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    DepthMap::new(h, w, img.as_raw().iter().map(|&v| v as f64 / 1000.0).collect())
}

/// Metres to 16-bit millimetres; holes (and values that round to 0) are written as 0.
pub fn write_depth_mm(path: impl AsRef<Path>, depth: &DepthMap) -> Result<()> {
    let path = path.as_ref();
    let mut px = Vec::with_capacity(depth.meters.len());
    for &m in &depth.meters {
        if !DepthMap::is_valid_value(m) {
            px.push(0u16);
            continue;
        }
        let mm = (m * 1000.0).round();
        if mm > u16::MAX as f64 {
            return Err(Error::Data(format!("{}: depth {m} m exceeds the 16-bit millimetre range", path.display())));
        }
        px.push(mm as u16);
    }
    let img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(depth.width as u32, depth.height as u32, px)
        .ok_or_else(|| Error::Data("depth buffer size mismatch".into()))?;
    save(&img, path)
}

pub fn read_label(path: impl AsRef<Path>) -> Result<LabelMap> {
    let path = path.as_ref();
    let img = open(path)?;
    if img.color() != image::ColorType::L8 {
        return Err(Error::Image {
            path: path.to_path_buf(),
            message: format!("expected 8-bit grayscale labels, got {:?}", img.color()),
        });
    }
    let img = img.to_luma8();
    LabelMap::new(img.height() as usize, img.width() as usize, img.into_raw())
}

/// Writes an 8-bit grayscale PNG (labels or visualisations).
pub fn write_gray(path: impl AsRef<Path>, height: usize, width: usize, pixels: &[u8]) -> Result<()> {
    let img: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_raw(width as u32, height as u32, pixels.to_vec())
        .ok_or_else(|| Error::Data(format!("{} pixels for a {height}x{width} image", pixels.len())))?;
    save(&img, path.as_ref())
}

pub fn write_label(path: impl AsRef<Path>, label: &LabelMap) -> Result<()> {
    write_gray(path, label.height, label.width, &label.data)
}
