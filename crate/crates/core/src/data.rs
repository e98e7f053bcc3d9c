//! Dataset ingestion, preprocessing and the procedural desk-scale dataset.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{GrayImage, Rgb, RgbImage};
use ndarray::{Array2, Array3, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::locmap::bilinear_matrix;
use crate::prompts::DescriptionRegistry;
use crate::seeding::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// `<class>/test/<defect>/*.png` with `<class>/ground_truth/<defect>/*_mask.png`.
    Mvtec,
    /// `<class>/Data/Images/{Normal,Anomaly}` with `<class>/Data/Masks/Anomaly`.
    Visa,
    /// Generated in memory from [`SyntheticConfig`].
    Synthetic,
}

impl FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mvtec" => Ok(Layout::Mvtec),
            "visa" => Ok(Layout::Visa),
            "synthetic" => Ok(Layout::Synthetic),
            other => Err(Error::Config(format!("unknown dataset layout `{other}`"))),
        }
    }
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Layout::Mvtec => "mvtec",
            Layout::Visa => "visa",
            Layout::Synthetic => "synthetic",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ImageData {
    File(PathBuf),
    /// `(h, w, 3)` in `[0, 1]`.
    Pixels(Array3<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum MaskData {
    File(PathBuf),
    /// `(h, w)` with values in `{0, 1}`.
    Values(Array2<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub class_name: String,
    pub label: u8,
    pub image: ImageData,
    /// `None` for normal samples (an all-zero mask is implied) and for
    /// abnormal samples whose mask is missing.
    pub mask: Option<MaskData>,
}

impl Sample {
    /// Abnormal samples without a mask are left out of pixel metrics.
    pub fn has_pixel_truth(&self) -> bool {
        self.label == 0 || self.mask.is_some()
    }

    pub fn load_pixels(&self) -> Result<Array3<f64>> {
        match &self.image {
            ImageData::File(p) => read_rgb(p),
            ImageData::Pixels(px) => Ok(px.clone()),
        }
    }

    /// Mask resized to `size` by nearest neighbour; zeros for normal samples.
    pub fn load_mask(&self, size: (usize, usize)) -> Result<Option<Array2<f64>>> {
        match (&self.mask, self.label) {
            (Some(MaskData::File(p)), _) => Ok(Some(resize_nearest(&read_mask(p)?, size))),
            (Some(MaskData::Values(v)), _) => Ok(Some(resize_nearest(v, size))),
            (None, 0) => Ok(Some(Array2::zeros(size))),
            (None, _) => Ok(None),
        }
    }
}

fn image_error(path: &Path, source: image::ImageError) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

pub fn read_rgb(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path).map_err(|e| image_error(path, e))?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
        img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
    }))
}

/// Any non-zero pixel is anomalous.
pub fn read_mask(path: &Path) -> Result<Array2<f64>> {
    let img = image::open(path).map_err(|e| image_error(path, e))?.to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        if img.get_pixel(x as u32, y as u32)[0] > 0 {
            1.0
        } else {
            0.0
        }
    }))
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_rgb(path: &Path, pixels: &Array3<f64>) -> Result<()> {
    let (h, w, _) = pixels.dim();
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        Rgb([0, 1, 2].map(|c| to_u8(pixels[[y, x, c]])))
    });
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save(path).map_err(|e| image_error(path, e))
}

/// 8-bit grayscale with value `round(255 v)`.
pub fn write_gray(path: &Path, values: &Array2<f64>) -> Result<()> {
    let (h, w) = values.dim();
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([to_u8(values[[y as usize, x as usize]])])
    });
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save(path).map_err(|e| image_error(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub resolution: usize,
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            resolution: 518,
            mean: [0.481_454_66, 0.457_827_5, 0.408_210_73],
            std: [0.268_629_54, 0.261_302_58, 0.275_777_11],
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resolution == 0 {
            return Err(Error::Config("resolution must be positive".into()));
        }
        if self.std.iter().any(|s| *s <= 0.0) {
            return Err(Error::Config("normalisation std must be positive".into()));
        }
        Ok(())
    }
}

/// Plain bilinear resize (no aspect preservation); identity when the size
/// already matches.
pub fn resize_rgb(pixels: &Array3<f64>, size: (usize, usize)) -> Array3<f64> {
    let (h, w, c) = pixels.dim();
    if (h, w) == size {
        return pixels.clone();
    }
    let rows = bilinear_matrix(size.0, h);
    let cols = bilinear_matrix(size.1, w);
    let mut out = Array3::zeros((size.0, size.1, c));
    for ch in 0..c {
        let plane = pixels.index_axis(Axis(2), ch);
        out.index_axis_mut(Axis(2), ch)
            .assign(&rows.dot(&plane).dot(&cols.t()));
    }
    out
}

pub fn normalize_channels(pixels: &Array3<f64>, cfg: &PreprocessConfig) -> Array3<f64> {
    let mut out = pixels.clone();
    for (ch, mut plane) in out.axis_iter_mut(Axis(2)).enumerate() {
        plane.mapv_inplace(|v| (v - cfg.mean[ch]) / cfg.std[ch]);
    }
    out
}

/// Resize to `resolution` square, then normalise channels.
pub fn preprocess(pixels: &Array3<f64>, cfg: &PreprocessConfig) -> Array3<f64> {
    normalize_channels(&resize_rgb(pixels, (cfg.resolution, cfg.resolution)), cfg)
}

/// Nearest-neighbour resize, which keeps binary masks binary.
pub fn resize_nearest(mask: &Array2<f64>, size: (usize, usize)) -> Array2<f64> {
    let (h, w) = mask.dim();
    if (h, w) == size {
        return mask.clone();
    }
    let pick = |o: usize, out: usize, inp: usize| (((o as f64 + 0.5) * inp as f64 / out as f64) as usize).min(inp - 1);
    Array2::from_shape_fn(size, |(y, x)| mask[[pick(y, size.0, h), pick(x, size.1, w)]])
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    out.sort();
    Ok(out)
}

fn is_image(p: &Path) -> bool {
    p.is_file()
        && p.extension()
            .and_then(|e| e.to_str())
            .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg" | "bmp"))
            .unwrap_or(false)
}

fn file_stem(p: &Path) -> String {
    p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string()
}

fn relative_id(root: &Path, p: &Path) -> String {
    p.strip_prefix(root)
        .unwrap_or(p)
        .with_extension("")
        .to_string_lossy()
        .replace('\\', "/")
}

fn class_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    Ok(sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect())
}

fn name_of(p: &Path) -> String {
    p.file_name().and_then(|s| s.to_str()).unwrap_or_default().to_string()
}

fn load_mvtec(root: &Path) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for class_dir in class_dirs(root)? {
        let class = name_of(&class_dir);
        let test = class_dir.join("test");
        if !test.is_dir() {
            continue;
        }
        let mut defects: Vec<PathBuf> = class_dirs(&test)?;
        // normal images first, then defect types in lexicographic order
        defects.sort_by_key(|d| (name_of(d) != "good", name_of(d)));
        for defect_dir in defects {
            let defect = name_of(&defect_dir);
            let label = u8::from(defect != "good");
            for img in sorted_entries(&defect_dir)?.into_iter().filter(|p| is_image(p)) {
                let mask = if label == 1 {
                    let m = class_dir
                        .join("ground_truth")
                        .join(&defect)
                        .join(format!("{}_mask.png", file_stem(&img)));
                    if m.is_file() {
                        Some(MaskData::File(m))
                    } else {
                        log::warn!("no mask for {}; excluded from pixel metrics", img.display());
                        None
                    }
                } else {
                    None
                };
                out.push(Sample {
                    id: relative_id(root, &img),
                    class_name: class.clone(),
                    label,
                    image: ImageData::File(img),
                    mask,
                });
            }
        }
    }
    Ok(out)
}

fn load_visa(root: &Path) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for class_dir in class_dirs(root)? {
        let class = name_of(&class_dir);
        let images = class_dir.join("Data").join("Images");
        if !images.is_dir() {
            continue;
        }
        for (sub, label) in [("Normal", 0u8), ("Anomaly", 1u8)] {
            let dir = images.join(sub);
            if !dir.is_dir() {
                continue;
            }
            for img in sorted_entries(&dir)?.into_iter().filter(|p| is_image(p)) {
                let mask = if label == 1 {
                    let m = class_dir
                        .join("Data")
                        .join("Masks")
                        .join("Anomaly")
                        .join(format!("{}.png", file_stem(&img)));
                    if m.is_file() {
                        Some(MaskData::File(m))
                    } else {
                        log::warn!("no mask for {}; excluded from pixel metrics", img.display());
                        None
                    }
                } else {
                    None
                };
                out.push(Sample {
                    id: relative_id(root, &img),
                    class_name: class.clone(),
                    label,
                    image: ImageData::File(img),
                    mask,
                });
            }
        }
    }
    Ok(out)
}

/// Samples under `root` in a deterministic order: classes and files
/// lexicographic, normal images before abnormal ones within a class.
pub fn load_dataset(root: &Path, layout: Layout) -> Result<Vec<Sample>> {
    if layout == Layout::Synthetic {
        return Err(Error::Config(
            "synthetic samples are generated, use generate_synthetic".into(),
        ));
    }
    if !root.is_dir() {
        return Err(Error::InvalidInput(format!(
            "dataset root {} is not a directory",
            root.display()
        )));
    }
    let samples = match layout {
        Layout::Mvtec => load_mvtec(root)?,
        Layout::Visa => load_visa(root)?,
        Layout::Synthetic => unreachable!(),
    };
    if samples.is_empty() {
        log::warn!("no samples found under {}", root.display());
    }
    Ok(samples)
}

/// Distinct class names in first-appearance order.
pub fn classes_of(samples: &[Sample]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for s in samples {
        if !out.contains(&s.class_name) {
            out.push(s.class_name.clone());
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub classes: Vec<String>,
    pub images: usize,
    pub size: usize,
    pub abnormal_fraction: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            classes: vec!["weave".into(), "granite".into()],
            images: 8,
            size: 64,
            abnormal_fraction: 0.5,
        }
    }
}

fn lerp3(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [0, 1, 2].map(|i| a[i] + (b[i] - a[i]) * t)
}

fn background(class: &str, size: usize, rng: &mut ChaCha8Rng) -> Array3<f64> {
    let mut px = Array3::zeros((size, size, 3));
    let jitter: f64 = rng.random_range(-0.04..0.04);
    match class {
        "weave" => {
            let period: f64 = rng.random_range(5.0..7.0);
            let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let warm = [0.62 + jitter, 0.52 + jitter, 0.38];
            let cool = [0.48 + jitter, 0.40 + jitter, 0.30];
            for y in 0..size {
                for x in 0..size {
                    let u = (std::f64::consts::TAU * x as f64 / period + phase).sin();
                    let v = (std::f64::consts::TAU * y as f64 / period).sin();
                    let t = 0.5 + 0.25 * (u + v) + rng.random_range(-0.04..0.04);
                    let c = lerp3(cool, warm, t.clamp(0.0, 1.0));
                    for ch in 0..3 {
                        px[[y, x, ch]] = c[ch];
                    }
                }
            }
        }
        _ => {
            // speckled stone: smoothed noise around a grey base
            let base = 0.55 + jitter;
            let noise = Array2::from_shape_fn((size, size), |_| rng.random_range(-1.0..1.0));
            for y in 0..size {
                for x in 0..size {
                    let mut s = 0.0;
                    let mut n = 0.0;
                    for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                            if yy >= 0 && xx >= 0 && (yy as usize) < size && (xx as usize) < size {
                                s += noise[[yy as usize, xx as usize]];
                                n += 1.0;
                            }
                        }
                    }
                    let v = base + 0.12 * s / n;
                    px[[y, x, 0]] = v;
                    px[[y, x, 1]] = v * 0.98;
                    px[[y, x, 2]] = v * 0.95;
                }
            }
        }
    }
    px
}

/// Paint one anomaly of the given kind; returns its exact mask.
fn plant(px: &mut Array3<f64>, kind: &str, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let size = px.dim().0;
    let s = size as f64;
    let mut mask = Array2::zeros((size, size));
    let cx: f64 = rng.random_range(0.2 * s..0.8 * s);
    let cy: f64 = rng.random_range(0.2 * s..0.8 * s);
    let mut paint = |y: usize, x: usize, color: [f64; 3], mask: &mut Array2<f64>| {
        for ch in 0..3 {
            px[[y, x, ch]] = color[ch];
        }
        mask[[y, x]] = 1.0;
    };
    match kind {
        "scratch" | "crack" => {
            let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
            let half = rng.random_range(0.12 * s..0.2 * s);
            let width = if kind == "crack" { 1.2 } else { 0.9 };
            let color = if kind == "crack" { [0.08, 0.07, 0.07] } else { [0.95, 0.95, 0.92] };
            let (dx, dy) = (angle.cos(), angle.sin());
            let wobble: f64 = if kind == "crack" { rng.random_range(0.5..1.5) } else { 0.0 };
            for y in 0..size {
                for x in 0..size {
                    let (rx, ry) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                    let along = rx * dx + ry * dy;
                    let across = -rx * dy + ry * dx - wobble * (along / 3.0).sin();
                    if along.abs() <= half && across.abs() <= width {
                        paint(y, x, color, &mut mask);
                    }
                }
            }
        }
        "missing threads" => {
            let horizontal = rng.random_bool(0.5);
            let half_len = rng.random_range(0.15 * s..0.25 * s);
            let half_w = rng.random_range(1.5..2.5);
            for y in 0..size {
                for x in 0..size {
                    let (a, b) = if horizontal {
                        (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy)
                    } else {
                        (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx)
                    };
                    if a.abs() <= half_len && b.abs() <= half_w {
                        paint(y, x, [0.16, 0.12, 0.10], &mut mask);
                    }
                }
            }
        }
        _ => {
            let rx = rng.random_range(0.06 * s..0.11 * s);
            let ry = rng.random_range(0.06 * s..0.11 * s);
            let color = match kind {
                "bright spot" => [0.97, 0.96, 0.90],
                "chipped area" => [0.85, 0.82, 0.78],
                _ => [0.10, 0.08, 0.12],
            };
            for y in 0..size {
                for x in 0..size {
                    let dx = (x as f64 + 0.5 - cx) / rx;
                    let dy = (y as f64 + 0.5 - cy) / ry;
                    if dx * dx + dy * dy <= 1.0 {
                        paint(y, x, color, &mut mask);
                    }
                }
            }
        }
    }
    mask
}

/// Seeded textured images with planted anomalies and exact masks. Images
/// alternate between classes; the first `round(images * abnormal_fraction)`
/// slots per class ordering are normal, the rest abnormal. Anomaly kinds
/// cycle through the class's registry phrases.
pub fn generate_synthetic(cfg: &SyntheticConfig, registry: &DescriptionRegistry) -> Result<Vec<Sample>> {
    if cfg.classes.is_empty() {
        return Err(Error::Config("synthetic dataset needs at least one class".into()));
    }
    if cfg.size < 8 {
        return Err(Error::Config(format!("synthetic image size {} too small", cfg.size)));
    }
    if !(0.0..=1.0).contains(&cfg.abnormal_fraction) {
        return Err(Error::Config("abnormal_fraction outside [0, 1]".into()));
    }
    let n_abnormal = (cfg.images as f64 * cfg.abnormal_fraction).round() as usize;
    let mut samples = Vec::with_capacity(cfg.images);
    let mut per_class_abnormal = vec![0usize; cfg.classes.len()];
    for i in 0..cfg.images {
        let ci = i % cfg.classes.len();
        let class = &cfg.classes[ci];
        let phrases = registry.phrases(class)?;
        let label = u8::from(i >= cfg.images - n_abnormal);
        let mut rng = rng_for(cfg.seed, &format!("synthetic/{i}"));
        let mut pixels = background(class, cfg.size, &mut rng);
        let (mask, kind) = if label == 1 {
            let kind = phrases[per_class_abnormal[ci] % phrases.len()].clone();
            per_class_abnormal[ci] += 1;
            let m = plant(&mut pixels, &kind, &mut rng);
            (Some(MaskData::Values(m)), Some(kind))
        } else {
            (None, None)
        };
        let defect = kind.map_or("good".to_string(), |k| k.replace(' ', "_"));
        samples.push(Sample {
            id: format!("{class}/{defect}/{i:03}"),
            class_name: class.clone(),
            label,
            image: ImageData::Pixels(pixels),
            mask,
        });
    }
    Ok(samples)
}

/// Write samples to disk in the MVTec layout, so the generated set can be
/// reloaded with [`Layout::Mvtec`].
pub fn export_mvtec_layout(samples: &[Sample], root: &Path) -> Result<()> {
    for (i, s) in samples.iter().enumerate() {
        let pixels = s.load_pixels()?;
        let defect = s
            .id
            .split('/')
            .nth(1)
            .filter(|_| s.label == 1)
            .unwrap_or("good")
            .to_string();
        let stem = format!("{i:03}");
        let class_dir = root.join(&s.class_name);
        write_rgb(&class_dir.join("test").join(&defect).join(format!("{stem}.png")), &pixels)?;
        if s.label == 1 {
            let (h, w, _) = pixels.dim();
            if let Some(mask) = s.load_mask((h, w))? {
                write_gray(
                    &class_dir
                        .join("ground_truth")
                        .join(&defect)
                        .join(format!("{stem}_mask.png")),
                    &mask,
                )?;
            }
        }
    }
    Ok(())
}
