//! AUROC metrics and per-class reports.

use std::fmt::Write as _;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probability that a random positive outscores a random negative, ties
/// counting one half. Counts are accumulated exactly in integers.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidInput("NaN score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    auroc_sorted(order.iter().map(|&i| (scores[i], labels[i] != 0)))
}

/// AUROC over `(score, positive)` pairs already sorted by ascending score.
fn auroc_sorted(items: impl Iterator<Item = (f64, bool)>) -> Result<f64> {
    // twice the number of winning pairs, so ties stay integral
    let mut wins2: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut pos_total: u128 = 0;
    let mut group_score = f64::NAN;
    let (mut gp, mut gn) = (0u128, 0u128);
    let mut flush = |gp: u128, gn: u128, neg_below: &mut u128| {
        wins2 += 2 * gp * *neg_below + gp * gn;
        *neg_below += gn;
    };
    for (s, pos) in items {
        if s != group_score && (gp + gn) > 0 {
            flush(gp, gn, &mut neg_below);
            gp = 0;
            gn = 0;
        }
        group_score = s;
        if pos {
            gp += 1;
            pos_total += 1;
        } else {
            gn += 1;
        }
    }
    flush(gp, gn, &mut neg_below);
    let neg_total = neg_below;
    if pos_total == 0 || neg_total == 0 {
        return Err(Error::UndefinedMetric(
            "AUROC needs both positive and negative samples".into(),
        ));
    }
    Ok(wins2 as f64 / (2 * pos_total * neg_total) as f64)
}

/// One evaluated image.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub image_id: String,
    pub class_name: String,
    pub label: u8,
    pub s_global: f64,
    pub text_term: f64,
    pub map_term: f64,
    /// Final map at evaluation resolution.
    pub map: Option<Array2<f64>>,
    /// Ground truth co-registered with `map`; `None` excludes the image from
    /// pixel metrics.
    pub mask: Option<Array2<f64>>,
}

impl EvalRecord {
    pub fn score_row(&self) -> ScoreRow {
        ScoreRow {
            image_id: self.image_id.clone(),
            class_name: self.class_name.clone(),
            label: self.label,
            s_global: self.s_global,
            text_term: self.text_term,
            map_term: self.map_term,
        }
    }
}

/// Image-level scores of one evaluated image, as written to `scores.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub image_id: String,
    pub class_name: String,
    pub label: u8,
    pub s_global: f64,
    pub text_term: f64,
    pub map_term: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PixelPooling {
    /// One AUROC over all pixels of all images.
    #[default]
    Pooled,
    /// Mean of per-image AUROCs over images where it is defined.
    PerImage,
}

fn pixel_pairs(records: &[&EvalRecord]) -> Result<Vec<(f64, bool)>> {
    let mut pairs = Vec::new();
    for r in records {
        if let (Some(map), Some(mask)) = (&r.map, &r.mask) {
            if map.dim() != mask.dim() {
                return Err(Error::Shape(format!(
                    "{}: map {:?} vs mask {:?}",
                    r.image_id,
                    map.dim(),
                    mask.dim()
                )));
            }
            pairs.extend(map.iter().zip(mask.iter()).map(|(&s, &m)| (s, m > 0.5)));
        }
    }
    Ok(pairs)
}

fn pairs_auroc(mut pairs: Vec<(f64, bool)>) -> Result<f64> {
    if pairs.iter().any(|p| p.0.is_nan()) {
        return Err(Error::InvalidInput("NaN map value".into()));
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    auroc_sorted(pairs.into_iter())
}

pub fn pixel_auroc_with(records: &[&EvalRecord], pooling: PixelPooling) -> Result<f64> {
    match pooling {
        PixelPooling::Pooled => pairs_auroc(pixel_pairs(records)?),
        PixelPooling::PerImage => {
            let mut vals = Vec::new();
            for r in records {
                match pairs_auroc(pixel_pairs(&[r])?) {
                    Ok(v) => vals.push(v),
                    Err(Error::UndefinedMetric(_)) => {}
                    Err(e) => return Err(e),
                }
            }
            if vals.is_empty() {
                return Err(Error::UndefinedMetric(
                    "no image has both anomalous and normal pixels".into(),
                ));
            }
            Ok(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }
}

/// AUROC over all pixels pooled across images.
pub fn pixel_auroc(records: &[EvalRecord]) -> Result<f64> {
    let refs: Vec<&EvalRecord> = records.iter().collect();
    pixel_auroc_with(&refs, PixelPooling::Pooled)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub class_name: String,
    pub images: usize,
    pub image_auroc: Option<f64>,
    pub pixel_auroc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    pub mean: ReportRow,
}

fn mean_of(vals: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = vals.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl Report {
    /// One row per class in first-appearance order plus a mean row. Metrics
    /// that are undefined for a class (single label, no masks) are `None`.
    pub fn build(records: &[EvalRecord], pooling: PixelPooling) -> Result<Self> {
        let mut classes: Vec<&str> = Vec::new();
        for r in records {
            if !classes.contains(&r.class_name.as_str()) {
                classes.push(&r.class_name);
            }
        }
        let mut rows = Vec::new();
        for class in classes {
            let recs: Vec<&EvalRecord> = records.iter().filter(|r| r.class_name == class).collect();
            let scores: Vec<f64> = recs.iter().map(|r| r.s_global).collect();
            let labels: Vec<u8> = recs.iter().map(|r| r.label).collect();
            let image_auroc = match auroc(&scores, &labels) {
                Ok(v) => Some(v),
                Err(Error::UndefinedMetric(_)) => None,
                Err(e) => return Err(e),
            };
            let pixel_auroc = match pixel_auroc_with(&recs, pooling) {
                Ok(v) => Some(v),
                Err(Error::UndefinedMetric(_)) => None,
                Err(e) => return Err(e),
            };
            rows.push(ReportRow {
                class_name: class.to_string(),
                images: recs.len(),
                image_auroc,
                pixel_auroc,
            });
        }
        let mean = ReportRow {
            class_name: "mean".into(),
            images: records.len(),
            image_auroc: mean_of(rows.iter().map(|r| r.image_auroc)),
            pixel_auroc: mean_of(rows.iter().map(|r| r.pixel_auroc)),
        };
        Ok(Self { rows, mean })
    }

    /// Fixed-width text table, percentages with one decimal.
    pub fn to_table(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|r| r.class_name.len())
            .max()
            .unwrap_or(0)
            .max(5);
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{:.1}", 100.0 * x));
        let mut out = String::new();
        let _ = writeln!(out, "{:<width$}  {:>6}  {:>9}  {:>9}", "class", "images", "image-AUC", "pixel-AUC");
        for r in self.rows.iter().chain(std::iter::once(&self.mean)) {
            let _ = writeln!(
                out,
                "{:<width$}  {:>6}  {:>9}  {:>9}",
                r.class_name,
                r.images,
                fmt(r.image_auroc),
                fmt(r.pixel_auroc)
            );
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}
