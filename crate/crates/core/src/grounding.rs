//! Preliminary localization from detector boxes.
//!
//! Boxes restrict where anomaly scores may stay high (everything outside the
//! union of boxes is scaled by `lambda`) and the most confident box supplies
//! the position phrase for abnormal prompts.

use std::cmp::Ordering;
use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::backbone::InputImage;
use crate::error::{Error, Result};
use crate::locmap::AnomalyMap;
use crate::prompts::PositionVocabulary;
use crate::seeding::{normal_vec, rng_for};

/// Axis-aligned box in normalised image coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
    pub confidence: f64,
    pub phrase: String,
}

impl DetectionBox {
    /// Clips to the unit square; rejects boxes with no area left.
    pub fn new(
        x0: f64,
        y0: f64,
        x1: f64,
        y1: f64,
        confidence: f64,
        phrase: impl Into<String>,
    ) -> Result<Self> {
        let vals = [x0, y0, x1, y1, confidence];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite box coordinate".into()));
        }
        let (x0, x1) = (x0.clamp(0.0, 1.0), x1.clamp(0.0, 1.0));
        let (y0, y1) = (y0.clamp(0.0, 1.0), y1.clamp(0.0, 1.0));
        if x0 >= x1 || y0 >= y1 {
            return Err(Error::InvalidInput(format!(
                "degenerate box ({x0}, {y0})-({x1}, {y1})"
            )));
        }
        Ok(Self {
            x0,
            y0,
            x1,
            y1,
            confidence: confidence.clamp(0.0, 1.0),
            phrase: phrase.into(),
        })
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuppressionConfig {
    pub lambda: f64,
    pub min_confidence: f64,
}

impl Default for SuppressionConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            min_confidence: 0.25,
        }
    }
}

impl SuppressionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if !(0.0..=1.0).contains(&self.min_confidence) {
            return Err(Error::Config(format!(
                "min_confidence {} outside [0, 1]",
                self.min_confidence
            )));
        }
        Ok(())
    }
}

/// Open-vocabulary detector. Handles may carry state, so inference takes
/// `&mut self`; use one handle per worker.
pub trait Detector: Send {
    fn detect(&mut self, image: &InputImage, phrases: &[String]) -> Result<Vec<DetectionBox>>;
}

/// Run `detector` and drop boxes below `cfg.min_confidence`. No boxes is a
/// valid outcome.
pub fn detect(
    image: &InputImage,
    phrases: &[String],
    detector: &mut dyn Detector,
    cfg: &SuppressionConfig,
) -> Result<Vec<DetectionBox>> {
    if phrases.is_empty() {
        return Err(Error::InvalidInput("no phrases to ground".into()));
    }
    let boxes = detector
        .detect(image, phrases)
        .map_err(|e| match e {
            Error::Backend(_) => e,
            other => Error::Backend(other.to_string()),
        })?;
    Ok(boxes
        .into_iter()
        .filter(|b| b.confidence >= cfg.min_confidence)
        .collect())
}

/// Pixel centres inside any box keep their value; all others are scaled by
/// `lambda`. With no boxes the map is returned unchanged.
pub fn suppress_outside(map: &AnomalyMap, boxes: &[DetectionBox], cfg: &SuppressionConfig) -> AnomalyMap {
    AnomalyMap {
        kind: map.kind,
        values: map.values.clone() * &suppression_factors(map.values.dim(), boxes, cfg.lambda),
    }
}

/// Per-pixel multiplier applied by [`suppress_outside`].
pub fn suppression_factors(dim: (usize, usize), boxes: &[DetectionBox], lambda: f64) -> Array2<f64> {
    let (h, w) = dim;
    if boxes.is_empty() {
        return Array2::ones((h, w));
    }
    Array2::from_shape_fn((h, w), |(r, c)| {
        let x = (c as f64 + 0.5) / w as f64;
        let y = (r as f64 + 0.5) / h as f64;
        if boxes.iter().any(|b| b.contains(x, y)) {
            1.0
        } else {
            lambda
        }
    })
}

fn box_order(a: &DetectionBox, b: &DetectionBox) -> Ordering {
    a.confidence
        .total_cmp(&b.confidence)
        .then_with(|| b.x0.total_cmp(&a.x0))
        .then_with(|| b.y0.total_cmp(&a.y0))
        .then_with(|| b.x1.total_cmp(&a.x1))
        .then_with(|| b.y1.total_cmp(&a.y1))
        .then_with(|| b.phrase.cmp(&a.phrase))
}

/// Grid phrase of the most confident box's centre. Ties are broken by
/// coordinates so the result does not depend on list order.
pub fn position_phrase(boxes: &[DetectionBox], vocab: &PositionVocabulary) -> Option<String> {
    let best = boxes.iter().max_by(|a, b| box_order(a, b))?;
    let (x, y) = best.center();
    Some(vocab.phrase_at(x, y).to_string())
}

/// One `x0,y0,x1,y1,confidence,phrase` record per line.
pub fn write_boxes<W: Write>(mut out: W, boxes: &[DetectionBox]) -> std::io::Result<()> {
    for b in boxes {
        writeln!(out, "{},{},{},{},{},{}", b.x0, b.y0, b.x1, b.y1, b.confidence, b.phrase)?;
    }
    Ok(())
}

pub fn read_boxes<R: BufRead>(input: R) -> Result<Vec<DetectionBox>> {
    let mut boxes = Vec::new();
    for (lineno, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::Parse(format!("box line {}: {e}", lineno + 1)))?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.splitn(6, ',').collect();
        if fields.len() != 6 {
            return Err(Error::Parse(format!("box line {}: expected 6 fields", lineno + 1)));
        }
        let mut nums = [0.0; 5];
        for (slot, f) in nums.iter_mut().zip(&fields[..5]) {
            *slot = f
                .trim()
                .parse()
                .map_err(|_| Error::Parse(format!("box line {}: bad number `{f}`", lineno + 1)))?;
        }
        boxes.push(DetectionBox::new(
            nums[0],
            nums[1],
            nums[2],
            nums[3],
            nums[4],
            fields[5].trim(),
        )?);
    }
    Ok(boxes)
}

/// Reads boxes produced out of process from `<dir>/<id>.boxes`; a missing
/// file means no detections.
#[derive(Debug, Clone)]
pub struct BoxFileDetector {
    dir: PathBuf,
}

impl BoxFileDetector {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn box_path(dir: &Path, id: &str) -> PathBuf {
        dir.join(format!("{}.boxes", id.replace(['/', '\\'], "__")))
    }
}

impl Detector for BoxFileDetector {
    fn detect(&mut self, image: &InputImage, _phrases: &[String]) -> Result<Vec<DetectionBox>> {
        let path = Self::box_path(&self.dir, &image.id);
        if !path.exists() {
            return Ok(Vec::new());
        }
        let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        read_boxes(std::io::BufReader::new(file))
    }
}

/// Deterministic detector for synthetic data: pixels whose colour deviates
/// from the image median by more than a robust threshold are grouped into
/// 4-connected components; each large enough component becomes a box tagged
/// with the phrase whose hash-seeded prototype colour is nearest to the
/// component's mean colour.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StubDetector {
    /// Threshold in robust standard deviations (1.4826 * MAD).
    pub k_sigma: f64,
    /// Absolute deviation floor, in pixel units.
    pub min_deviation: f64,
    /// Minimum component area as a fraction of the image.
    pub min_area_fraction: f64,
    pub seed: u64,
}

impl Default for StubDetector {
    fn default() -> Self {
        Self {
            k_sigma: 4.0,
            min_deviation: 0.15,
            min_area_fraction: 0.002,
            seed: 0,
        }
    }
}

impl StubDetector {
    /// Colour the stub associates with `phrase`, in `[0, 1]^3`.
    pub fn prototype_color(&self, phrase: &str) -> [f64; 3] {
        let mut rng = rng_for(self.seed, &format!("stub-detector/{phrase}"));
        let v = normal_vec(&mut rng, 3, 1.0);
        [0, 1, 2].map(|i| 1.0 / (1.0 + (-v[i]).exp()))
    }

    fn components(&self, pixels: ArrayView3<'_, f64>) -> Vec<Component> {
        let (h, w, _) = pixels.dim();
        if h == 0 || w == 0 {
            return Vec::new();
        }
        let mut deviation = Array2::<f64>::zeros((h, w));
        let mut medians = [0.0; 3];
        for (ch, m) in medians.iter_mut().enumerate() {
            let mut vals: Vec<f64> = pixels.index_axis(ndarray::Axis(2), ch).iter().copied().collect();
            *m = median(&mut vals);
        }
        for r in 0..h {
            for c in 0..w {
                let d: f64 = (0..3)
                    .map(|ch| (pixels[[r, c, ch]] - medians[ch]).powi(2))
                    .sum::<f64>()
                    .sqrt();
                deviation[[r, c]] = d;
            }
        }
        let mut devs: Vec<f64> = deviation.iter().copied().collect();
        let med = median(&mut devs);
        let mut abs_dev: Vec<f64> = deviation.iter().map(|d| (d - med).abs()).collect();
        let mad = median(&mut abs_dev);
        let threshold = (med + self.k_sigma * 1.4826 * mad).max(self.min_deviation);
        let mask = deviation.mapv(|d| d > threshold);

        let min_area = ((self.min_area_fraction * (h * w) as f64).ceil() as usize).max(1);
        let mut label = Array2::<usize>::zeros((h, w));
        let mut comps = Vec::new();
        let mut stack = Vec::new();
        for r in 0..h {
            for c in 0..w {
                if !mask[[r, c]] || label[[r, c]] != 0 {
                    continue;
                }
                let id = comps.len() + 1;
                let mut comp = Component::new(r, c);
                label[[r, c]] = id;
                stack.push((r, c));
                while let Some((y, x)) = stack.pop() {
                    comp.add(y, x, pixels, deviation[[y, x]]);
                    let neighbours = [
                        (y.wrapping_sub(1), x),
                        (y + 1, x),
                        (y, x.wrapping_sub(1)),
                        (y, x + 1),
                    ];
                    for (ny, nx) in neighbours {
                        if ny < h && nx < w && mask[[ny, nx]] && label[[ny, nx]] == 0 {
                            label[[ny, nx]] = id;
                            stack.push((ny, nx));
                        }
                    }
                }
                if comp.area >= min_area {
                    comp.threshold = threshold;
                    comps.push(comp);
                } else {
                    comps.push(Component::discarded());
                }
            }
        }
        comps.into_iter().filter(|c| c.area > 0).collect()
    }
}

fn median(vals: &mut [f64]) -> f64 {
    if vals.is_empty() {
        return 0.0;
    }
    vals.sort_by(f64::total_cmp);
    let n = vals.len();
    if n % 2 == 1 {
        vals[n / 2]
    } else {
        (vals[n / 2 - 1] + vals[n / 2]) / 2.0
    }
}

#[derive(Debug, Clone)]
struct Component {
    area: usize,
    r0: usize,
    r1: usize,
    c0: usize,
    c1: usize,
    color_sum: [f64; 3],
    deviation_sum: f64,
    threshold: f64,
}

impl Component {
    fn new(r: usize, c: usize) -> Self {
        Self {
            area: 0,
            r0: r,
            r1: r,
            c0: c,
            c1: c,
            color_sum: [0.0; 3],
            deviation_sum: 0.0,
            threshold: 0.0,
        }
    }

    fn discarded() -> Self {
        Self::new(0, 0)
    }

    fn add(&mut self, r: usize, c: usize, pixels: ArrayView3<'_, f64>, dev: f64) {
        self.area += 1;
        self.r0 = self.r0.min(r);
        self.r1 = self.r1.max(r);
        self.c0 = self.c0.min(c);
        self.c1 = self.c1.max(c);
        for ch in 0..3 {
            self.color_sum[ch] += pixels[[r, c, ch]];
        }
        self.deviation_sum += dev;
    }
}

impl Detector for StubDetector {
    fn detect(&mut self, image: &InputImage, phrases: &[String]) -> Result<Vec<DetectionBox>> {
        if phrases.is_empty() {
            return Err(Error::InvalidInput("no phrases to ground".into()));
        }
        let (h, w, ch) = image.pixels.dim();
        if ch != 3 {
            return Err(Error::Shape(format!("expected 3 channels, got {ch}")));
        }
        let prototypes: Vec<Array1<f64>> = phrases
            .iter()
            .map(|p| Array1::from(self.prototype_color(p).to_vec()))
            .collect();
        let mut boxes = Vec::new();
        for comp in self.components(image.pixels.view()) {
            let mean = Array1::from_iter(comp.color_sum.iter().map(|s| s / comp.area as f64));
            let phrase_idx = prototypes
                .iter()
                .enumerate()
                .map(|(i, p)| (i, (&mean - p).mapv(|d| d * d).sum()))
                .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
                .map(|(i, _)| i)
                .expect("phrases non-empty");
            let mean_dev = comp.deviation_sum / comp.area as f64;
            let confidence = (1.0 - comp.threshold / mean_dev.max(1e-12)).clamp(0.0, 1.0) * 0.5 + 0.5;
            boxes.push(DetectionBox::new(
                comp.c0 as f64 / w as f64,
                comp.r0 as f64 / h as f64,
                (comp.c1 + 1) as f64 / w as f64,
                (comp.r1 + 1) as f64 / h as f64,
                confidence,
                phrases[phrase_idx].clone(),
            )?);
        }
        Ok(boxes)
    }
}
