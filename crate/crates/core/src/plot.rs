//! Per-class score histograms rendered to PNG.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::eval::ScoreRow;

const BACKGROUND: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([40, 40, 40]);
const NORMAL: Rgb<u8> = Rgb([46, 125, 196]);
const ABNORMAL: Rgb<u8> = Rgb([214, 69, 65]);

#[derive(Debug, Clone, PartialEq)]
pub struct HistogramConfig {
    pub bins: usize,
    /// Score range covered by the bins; values outside are clamped in.
    pub range: (f64, f64),
    pub width: u32,
    pub height: u32,
}

impl Default for HistogramConfig {
    fn default() -> Self {
        Self {
            bins: 20,
            range: (0.0, 2.0),
            width: 480,
            height: 240,
        }
    }
}

/// Bin counts of `s_global` split by label: `(normal, abnormal)`.
pub fn score_histogram(rows: &[&ScoreRow], bins: usize, range: (f64, f64)) -> (Vec<u32>, Vec<u32>) {
    let mut normal = vec![0; bins];
    let mut abnormal = vec![0; bins];
    let (lo, hi) = range;
    for r in rows {
        let t = ((r.s_global - lo) / (hi - lo)).clamp(0.0, 1.0);
        let b = ((t * bins as f64) as usize).min(bins - 1);
        if r.label == 0 {
            normal[b] += 1;
        } else {
            abnormal[b] += 1;
        }
    }
    (normal, abnormal)
}

/// Paired bars per bin, normal on the left half and abnormal on the right,
/// scaled so the tallest bar fills the plot height.
pub fn render_histogram(normal: &[u32], abnormal: &[u32], cfg: &HistogramConfig) -> RgbImage {
    let (w, h) = (cfg.width, cfg.height);
    let mut img = RgbImage::from_pixel(w, h, BACKGROUND);
    let margin = 10u32;
    let base = h - margin;
    let plot_h = base.saturating_sub(margin) as f64;
    let plot_w = w.saturating_sub(2 * margin) as f64;
    let peak = normal.iter().chain(abnormal).copied().max().unwrap_or(0).max(1) as f64;
    let bin_w = plot_w / normal.len().max(1) as f64;
    let mut bar = |x0: f64, x1: f64, count: u32, color: Rgb<u8>| {
        let top = base - (plot_h * count as f64 / peak).round() as u32;
        for x in (margin + x0 as u32)..(margin + x1 as u32).min(w) {
            for y in top..base {
                img.put_pixel(x, y, color);
            }
        }
    };
    for (i, (&n, &a)) in normal.iter().zip(abnormal).enumerate() {
        let x = i as f64 * bin_w;
        bar(x + 1.0, x + bin_w / 2.0, n, NORMAL);
        bar(x + bin_w / 2.0, x + bin_w - 1.0, a, ABNORMAL);
    }
    for x in margin..w - margin {
        img.put_pixel(x, base, AXIS);
    }
    img
}

/// Writes `<dir>/<class>_scores.png` for every class in first-appearance
/// order and returns the paths.
pub fn plot_scores(rows: &[ScoreRow], dir: &Path, cfg: &HistogramConfig) -> Result<Vec<PathBuf>> {
    if cfg.bins == 0 || cfg.range.1.partial_cmp(&cfg.range.0) != Some(std::cmp::Ordering::Greater) || cfg.width < 40 || cfg.height < 40 {
        return Err(Error::Config(format!("bad histogram settings {cfg:?}")));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut classes: Vec<&str> = Vec::new();
    for r in rows {
        if !classes.contains(&r.class_name.as_str()) {
            classes.push(&r.class_name);
        }
    }
    let mut paths = Vec::new();
    for class in classes {
        let subset: Vec<&ScoreRow> = rows.iter().filter(|r| r.class_name == class).collect();
        let (normal, abnormal) = score_histogram(&subset, cfg.bins, cfg.range);
        let img = render_histogram(&normal, &abnormal, cfg);
        let path = dir.join(format!("{}_scores.png", class.replace(['/', '\\'], "_")));
        img.save(&path).map_err(|source| Error::Image {
            path: path.clone(),
            source,
        })?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(class: &str, label: u8, s: f64) -> ScoreRow {
        ScoreRow {
            image_id: format!("{class}/{s}"),
            class_name: class.into(),
            label,
            s_global: s,
            text_term: s / 2.0,
            map_term: s / 2.0,
        }
    }

    #[test]
    fn binning_clamps_endpoints() {
        let rows = [row("a", 0, 0.0), row("a", 0, 0.05), row("a", 1, 2.0), row("a", 1, 9.0), row("a", 1, 1.0)];
        let refs: Vec<&ScoreRow> = rows.iter().collect();
        let (n, a) = score_histogram(&refs, 4, (0.0, 2.0));
        assert_eq!(n, vec![2, 0, 0, 0]);
        assert_eq!(a, vec![0, 0, 1, 2]);
    }

    #[test]
    fn bars_use_both_colours() {
        let img = render_histogram(&[3, 0], &[0, 1], &HistogramConfig::default());
        assert_eq!(img.dimensions(), (480, 240));
        assert!(img.pixels().any(|p| *p == NORMAL));
        assert!(img.pixels().any(|p| *p == ABNORMAL));
    }

    #[test]
    fn one_file_per_class() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![row("b", 0, 0.3), row("a", 1, 1.5), row("b", 1, 1.2)];
        let paths = plot_scores(&rows, dir.path(), &HistogramConfig::default()).unwrap();
        assert_eq!(paths.len(), 2);
        assert!(paths[0].ends_with("b_scores.png"));
        assert!(paths.iter().all(|p| p.exists()));
    }
}
