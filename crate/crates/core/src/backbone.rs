//! Dual-encoder contract and deterministic stand-ins.
//!
//! An [`ImageEncoder`] turns a preprocessed image into a global feature plus
//! per-stage patch grids on two attention paths (standard QKV and
//! value-value). A [`TextEncoder`] embeds a prompt body prefixed by learnable
//! context vectors. The stub implementations are seeded and cheap, and the
//! stub text encoder exposes a vector-Jacobian product so context vectors can
//! be trained through it.

use std::path::{Path, PathBuf};

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::{normal_matrix, normal_vec, rng_for};
use crate::tensor_io::{DType, TensorContainer};

/// Longest token sequence (context slots included) a text encoder accepts.
pub const MAX_SEQUENCE_LEN: usize = 77;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub input_resolution: usize,
    pub patch_size: usize,
    pub stage_indices: Vec<usize>,
    pub feature_width: usize,
    pub token_width: usize,
    pub vv_start_layer: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            input_resolution: 518,
            patch_size: 14,
            stage_indices: vec![6, 12, 18, 24],
            feature_width: 768,
            token_width: 768,
            vv_start_layer: 7,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_indices.is_empty() {
            return Err(Error::Config("stage_indices must not be empty".into()));
        }
        if self.stage_indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(
                "stage_indices must be strictly increasing".into(),
            ));
        }
        if self.patch_size == 0 || !self.input_resolution.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "input_resolution {} is not divisible by patch_size {}",
                self.input_resolution, self.patch_size
            )));
        }
        if self.feature_width == 0 || self.token_width == 0 {
            return Err(Error::Config("feature and token widths must be positive".into()));
        }
        Ok(())
    }

    pub fn grid_size(&self) -> usize {
        self.input_resolution / self.patch_size
    }
}

/// Preprocessed image, `(height, width, 3)`, plus a stable identifier.
#[derive(Debug, Clone)]
pub struct InputImage {
    pub id: String,
    pub pixels: Array3<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StagePatchFeatures {
    pub stage_index: usize,
    /// `(h, w, C)` grid from the standard attention path.
    pub qkv: Array3<f64>,
    /// `(h, w, C)` grid from the value-value attention path.
    pub vv: Array3<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageFeatures {
    pub global: Array1<f64>,
    pub stages: Vec<StagePatchFeatures>,
}

impl ImageFeatures {
    /// Check shapes against a config: one entry per stage, matching grids,
    /// finite values.
    pub fn validate(&self, config: &BackboneConfig) -> Result<()> {
        let c = config.feature_width;
        let g = config.grid_size();
        if self.global.len() != c {
            return Err(Error::Shape(format!(
                "global feature width {} != {c}",
                self.global.len()
            )));
        }
        if self.stages.len() != config.stage_indices.len() {
            return Err(Error::Shape(format!(
                "{} stages, config lists {}",
                self.stages.len(),
                config.stage_indices.len()
            )));
        }
        for (stage, &idx) in self.stages.iter().zip(&config.stage_indices) {
            if stage.stage_index != idx {
                return Err(Error::Shape(format!(
                    "stage index {} != configured {idx}",
                    stage.stage_index
                )));
            }
            if stage.qkv.shape() != stage.vv.shape() {
                return Err(Error::Shape(format!(
                    "stage {idx}: qkv {:?} vs vv {:?}",
                    stage.qkv.shape(),
                    stage.vv.shape()
                )));
            }
            if stage.qkv.shape() != [g, g, c] {
                return Err(Error::Shape(format!(
                    "stage {idx}: grid {:?}, expected [{g}, {g}, {c}]",
                    stage.qkv.shape()
                )));
            }
        }
        let finite = self.global.iter().all(|x| x.is_finite())
            && self
                .stages
                .iter()
                .all(|s| s.qkv.iter().chain(s.vv.iter()).all(|x| x.is_finite()));
        if !finite {
            return Err(Error::Shape("non-finite feature values".into()));
        }
        Ok(())
    }

    pub fn to_container(&self) -> TensorContainer {
        let mut c = TensorContainer::new();
        let indices: Vec<String> = self
            .stages
            .iter()
            .map(|s| s.stage_index.to_string())
            .collect();
        c.set_meta("stage_indices", indices.join(","));
        c.insert("global", DType::F32, self.global.clone().into_dyn());
        for s in &self.stages {
            c.insert(
                format!("stage.{}.qkv", s.stage_index),
                DType::F32,
                s.qkv.clone().into_dyn(),
            );
            c.insert(
                format!("stage.{}.vv", s.stage_index),
                DType::F32,
                s.vv.clone().into_dyn(),
            );
        }
        c
    }

    pub fn from_container(c: &TensorContainer) -> Result<Self> {
        let global = c
            .get("global")?
            .clone()
            .into_dimensionality()
            .map_err(|e| Error::Shape(format!("global: {e}")))?;
        let indices = c
            .meta("stage_indices")
            .ok_or_else(|| Error::Checkpoint("missing `stage_indices` metadata".into()))?;
        let mut stages = Vec::new();
        for part in indices.split(',').filter(|p| !p.is_empty()) {
            let idx: usize = part
                .trim()
                .parse()
                .map_err(|_| Error::Parse(format!("bad stage index `{part}`")))?;
            let grid = |path: &str| -> Result<Array3<f64>> {
                c.get(&format!("stage.{idx}.{path}"))?
                    .clone()
                    .into_dimensionality()
                    .map_err(|e| Error::Shape(format!("stage {idx} {path}: {e}")))
            };
            stages.push(StagePatchFeatures {
                stage_index: idx,
                qkv: grid("qkv")?,
                vv: grid("vv")?,
            });
        }
        Ok(Self { global, stages })
    }
}

pub trait ImageEncoder: Send + Sync {
    fn config(&self) -> &BackboneConfig;
    fn encode_image(&self, image: &InputImage) -> Result<ImageFeatures>;
}

pub trait TextEncoder: Send + Sync {
    fn token_width(&self) -> usize;
    fn output_width(&self) -> usize;

    /// Embed `ctx` rows followed by the tokens of `text`. Output is unit norm.
    fn encode(&self, text: &str, ctx: ArrayView2<'_, f64>) -> Result<Array1<f64>>;

    /// Gradient of `grad_out · encode(text, ctx)` with respect to `ctx`.
    fn encode_backward(
        &self,
        _text: &str,
        _ctx: ArrayView2<'_, f64>,
        _grad_out: ArrayView1<'_, f64>,
    ) -> Result<Array2<f64>> {
        Err(Error::Backend(
            "this text encoder does not provide gradients".into(),
        ))
    }
}

/// Lowercased whitespace tokens with sentence punctuation split off.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let lower = word.to_lowercase();
        let trimmed = lower.trim_end_matches(['.', ',']);
        if !trimmed.is_empty() {
            out.push(trimmed.to_string());
        }
        for ch in lower[trimmed.len()..].chars() {
            out.push(ch.to_string());
        }
    }
    out
}

const STAT_DIM: usize = 11;

/// Seeded stand-in for the image tower.
///
/// Each patch is summarised by colour means and spreads, luminance gradient
/// energy and luminance range. Stage `k` averages those statistics over a
/// `(2r+1)^2` window of patches with `r = k / 2`, projects them to the
/// feature width with a fixed Gaussian matrix and squashes with `tanh`. The
/// value-value path is a fixed linear mix of the QKV path.
#[derive(Debug, Clone)]
pub struct StubImageEncoder {
    config: BackboneConfig,
    stage_proj: Vec<Array2<f64>>,
    stage_mix: Vec<Array2<f64>>,
    global_proj: Array2<f64>,
}

impl StubImageEncoder {
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = config.feature_width;
        let mut stage_proj = Vec::new();
        let mut stage_mix = Vec::new();
        for &idx in &config.stage_indices {
            let mut rng = rng_for(seed, &format!("stub-image/stage-{idx}"));
            stage_proj.push(normal_matrix(
                &mut rng,
                c,
                STAT_DIM,
                1.0 / (STAT_DIM as f64).sqrt(),
            ));
            stage_mix.push(normal_matrix(&mut rng, c, c, 1.0 / (c as f64).sqrt()));
        }
        let mut rng = rng_for(seed, "stub-image/global");
        let global_proj = normal_matrix(
            &mut rng,
            c,
            3 * STAT_DIM,
            1.0 / ((3 * STAT_DIM) as f64).sqrt(),
        );
        Ok(Self {
            config,
            stage_proj,
            stage_mix,
            global_proj,
        })
    }

    fn patch_stats(&self, pixels: &Array3<f64>) -> Array3<f64> {
        let p = self.config.patch_size;
        let g = self.config.grid_size();
        let mut stats = Array3::<f64>::zeros((g, g, STAT_DIM));
        let n = (p * p) as f64;
        for gy in 0..g {
            for gx in 0..g {
                let patch = pixels.slice(s![gy * p..(gy + 1) * p, gx * p..(gx + 1) * p, ..]);
                let lum = patch.map_axis(Axis(2), |px| 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]);
                let mut out = stats.slice_mut(s![gy, gx, ..]);
                for ch in 0..3 {
                    let plane = patch.index_axis(Axis(2), ch);
                    let mean = plane.sum() / n;
                    let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                    out[ch] = mean;
                    out[3 + ch] = var.sqrt();
                }
                let mut dx = 0.0;
                let mut dy = 0.0;
                for y in 0..p {
                    for x in 0..p {
                        if x + 1 < p {
                            dx += (lum[[y, x + 1]] - lum[[y, x]]).abs();
                        }
                        if y + 1 < p {
                            dy += (lum[[y + 1, x]] - lum[[y, x]]).abs();
                        }
                    }
                }
                let pairs = (p * p.saturating_sub(1)).max(1) as f64;
                out[6] = dx / pairs;
                out[7] = dy / pairs;
                out[8] = lum.iter().cloned().fold(f64::INFINITY, f64::min);
                out[9] = lum.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                out[10] = 1.0;
            }
        }
        stats
    }
}

fn window_mean(stats: &Array3<f64>, radius: usize) -> Array3<f64> {
    if radius == 0 {
        return stats.clone();
    }
    let (h, w, d) = stats.dim();
    let mut out = Array3::<f64>::zeros((h, w, d));
    for y in 0..h {
        for x in 0..w {
            let y0 = y.saturating_sub(radius);
            let y1 = (y + radius + 1).min(h);
            let x0 = x.saturating_sub(radius);
            let x1 = (x + radius + 1).min(w);
            let win = stats.slice(s![y0..y1, x0..x1, ..]);
            let count = ((y1 - y0) * (x1 - x0)) as f64;
            let sum = win.sum_axis(Axis(0)).sum_axis(Axis(0));
            out.slice_mut(s![y, x, ..]).assign(&(sum / count));
        }
    }
    out
}

fn project_grid(grid: &Array3<f64>, proj: &Array2<f64>, squash: bool) -> Array3<f64> {
    let (h, w, d) = grid.dim();
    let flat = grid
        .to_shape((h * w, d))
        .expect("contiguous grid")
        .to_owned();
    let mut out = flat.dot(&proj.t());
    if squash {
        out.mapv_inplace(f64::tanh);
    }
    let c = out.ncols();
    out.into_shape_with_order((h, w, c)).expect("same element count")
}

impl ImageEncoder for StubImageEncoder {
    fn config(&self) -> &BackboneConfig {
        &self.config
    }

    fn encode_image(&self, image: &InputImage) -> Result<ImageFeatures> {
        let r = self.config.input_resolution;
        if image.pixels.shape() != [r, r, 3] {
            return Err(Error::Shape(format!(
                "image `{}` has shape {:?}, expected [{r}, {r}, 3]",
                image.id,
                image.pixels.shape()
            )));
        }
        let stats = self.patch_stats(&image.pixels);
        let mut stages = Vec::with_capacity(self.config.stage_indices.len());
        for (k, &idx) in self.config.stage_indices.iter().enumerate() {
            let pooled = window_mean(&stats, k / 2);
            let qkv = project_grid(&pooled, &self.stage_proj[k], true);
            let vv = project_grid(&qkv, &self.stage_mix[k], false);
            stages.push(StagePatchFeatures {
                stage_index: idx,
                qkv,
                vv,
            });
        }
        let (g, _, d) = stats.dim();
        let flat = stats.to_shape((g * g, d)).expect("contiguous").to_owned();
        let mean = flat.mean_axis(Axis(0)).expect("non-empty grid");
        let max = flat.fold_axis(Axis(0), f64::NEG_INFINITY, |a, &b| a.max(b));
        let min = flat.fold_axis(Axis(0), f64::INFINITY, |a, &b| a.min(b));
        let pooled = ndarray::concatenate![Axis(0), mean, max, min];
        let global = self.global_proj.dot(&pooled).mapv(f64::tanh);
        Ok(ImageFeatures { global, stages })
    }
}

/// Seeded stand-in for the text tower.
///
/// Tokens get hash-seeded embeddings; each sequence element (context row or
/// token) is offset by a fixed positional embedding and passed through
/// `tanh`; the results are averaged, projected to the output width and
/// L2-normalised. Smooth in the context rows.
#[derive(Debug, Clone)]
pub struct StubTextEncoder {
    token_width: usize,
    output_width: usize,
    seed: u64,
    positional: Array2<f64>,
    proj: Array2<f64>,
}

impl StubTextEncoder {
    pub fn new(token_width: usize, output_width: usize, seed: u64) -> Self {
        let mut rng = rng_for(seed, "stub-text/positional");
        let positional = normal_matrix(&mut rng, MAX_SEQUENCE_LEN, token_width, 0.1);
        let mut rng = rng_for(seed, "stub-text/projection");
        let proj = normal_matrix(
            &mut rng,
            output_width,
            token_width,
            1.0 / (token_width as f64).sqrt(),
        );
        Self {
            token_width,
            output_width,
            seed,
            positional,
            proj,
        }
    }

    fn token_embedding(&self, token: &str) -> Array1<f64> {
        let mut rng = rng_for(self.seed, &format!("stub-text/token/{token}"));
        normal_vec(&mut rng, self.token_width, 0.5)
    }

    /// Pre-activation rows `x_t + pos_t` for the whole sequence.
    fn sequence(&self, text: &str, ctx: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if ctx.ncols() != self.token_width && ctx.nrows() > 0 {
            return Err(Error::Config(format!(
                "context width {} != token width {}",
                ctx.ncols(),
                self.token_width
            )));
        }
        let tokens = tokenize(text);
        let len = ctx.nrows() + tokens.len();
        if len == 0 {
            return Err(Error::Shape("empty token sequence".into()));
        }
        if len > MAX_SEQUENCE_LEN {
            return Err(Error::Shape(format!(
                "sequence length {len} exceeds {MAX_SEQUENCE_LEN}"
            )));
        }
        let mut seq = Array2::<f64>::zeros((len, self.token_width));
        seq.slice_mut(s![..ctx.nrows(), ..]).assign(&ctx);
        for (i, tok) in tokens.iter().enumerate() {
            seq.row_mut(ctx.nrows() + i).assign(&self.token_embedding(tok));
        }
        seq += &self.positional.slice(s![..len, ..]);
        Ok(seq)
    }
}

impl TextEncoder for StubTextEncoder {
    fn token_width(&self) -> usize {
        self.token_width
    }

    fn output_width(&self) -> usize {
        self.output_width
    }

    fn encode(&self, text: &str, ctx: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        let seq = self.sequence(text, ctx)?;
        let pooled = seq.mapv(f64::tanh).mean_axis(Axis(0)).expect("non-empty");
        let z = self.proj.dot(&pooled);
        let norm = z.dot(&z).sqrt();
        Ok(z / norm)
    }

    fn encode_backward(
        &self,
        text: &str,
        ctx: ArrayView2<'_, f64>,
        grad_out: ArrayView1<'_, f64>,
    ) -> Result<Array2<f64>> {
        let seq = self.sequence(text, ctx)?;
        let act = seq.mapv(f64::tanh);
        let pooled = act.mean_axis(Axis(0)).expect("non-empty");
        let z = self.proj.dot(&pooled);
        let norm = z.dot(&z).sqrt();
        let y = &z / norm;
        let grad_z = (&grad_out - &(&y * y.dot(&grad_out))) / norm;
        let grad_pooled = self.proj.t().dot(&grad_z);
        let len = seq.nrows() as f64;
        let n_ctx = ctx.nrows();
        let mut grad = Array2::<f64>::zeros((n_ctx, self.token_width));
        for t in 0..n_ctx {
            let a = act.row(t);
            let mut g = grad.row_mut(t);
            for j in 0..self.token_width {
                g[j] = grad_pooled[j] * (1.0 - a[j] * a[j]) / len;
            }
        }
        Ok(grad)
    }
}

/// Real-backbone adapter: reads features produced out of process, one
/// container per image at `<dir>/<id>.feat` (path separators in the id are
/// replaced by `__`).
#[derive(Debug, Clone)]
pub struct PrecomputedImageEncoder {
    config: BackboneConfig,
    dir: PathBuf,
}

impl PrecomputedImageEncoder {
    pub fn new(config: BackboneConfig, dir: impl Into<PathBuf>) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            dir: dir.into(),
        })
    }

    pub fn feature_path(dir: &Path, id: &str) -> PathBuf {
        dir.join(format!("{}.feat", id.replace(['/', '\\'], "__")))
    }
}

impl ImageEncoder for PrecomputedImageEncoder {
    fn config(&self) -> &BackboneConfig {
        &self.config
    }

    fn encode_image(&self, image: &InputImage) -> Result<ImageFeatures> {
        let path = Self::feature_path(&self.dir, &image.id);
        let container = TensorContainer::read(&path)
            .map_err(|e| Error::Backend(format!("loading features for `{}`: {e}", image.id)))?;
        let features = ImageFeatures::from_container(&container)?;
        features.validate(&self.config)?;
        Ok(features)
    }
}

/// Shape and determinism checks any [`ImageEncoder`] must pass.
pub fn check_image_encoder(encoder: &dyn ImageEncoder, image: &InputImage) -> Result<()> {
    let first = encoder.encode_image(image)?;
    first.validate(encoder.config())?;
    let second = encoder.encode_image(image)?;
    if first != second {
        return Err(Error::Backend("image encoder is not deterministic".into()));
    }
    Ok(())
}

/// Unit-norm and determinism checks any [`TextEncoder`] must pass.
pub fn check_text_encoder(encoder: &dyn TextEncoder, n_ctx: usize) -> Result<()> {
    let ctx = Array2::<f64>::from_elem((n_ctx, encoder.token_width()), 0.01);
    let a = encoder.encode("flawless object.", ctx.view())?;
    if a.len() != encoder.output_width() {
        return Err(Error::Shape(format!(
            "text output width {} != {}",
            a.len(),
            encoder.output_width()
        )));
    }
    if (a.dot(&a).sqrt() - 1.0).abs() > 1e-6 {
        return Err(Error::Backend("text output is not unit norm".into()));
    }
    let b = encoder.encode("flawless object.", ctx.view())?;
    if a != b {
        return Err(Error::Backend("text encoder is not deterministic".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> BackboneConfig {
        BackboneConfig {
            input_resolution: 32,
            patch_size: 8,
            stage_indices: vec![1, 2, 3, 4],
            feature_width: 16,
            token_width: 8,
            vv_start_layer: 2,
        }
    }

    fn textured(res: usize) -> Array3<f64> {
        Array3::from_shape_fn((res, res, 3), |(y, x, c)| {
            ((x as f64 * 0.7 + y as f64 * 0.3 + c as f64).sin()) * 0.3
        })
    }

    #[test]
    fn default_grid_is_37() {
        let cfg = BackboneConfig::default();
        assert_eq!(cfg.grid_size(), 37);
        cfg.validate().unwrap();
    }

    #[test]
    fn default_resolution_gives_37_by_37_stages() {
        let cfg = BackboneConfig {
            feature_width: 8,
            token_width: 8,
            ..BackboneConfig::default()
        };
        let enc = StubImageEncoder::new(cfg, 0).unwrap();
        let img = InputImage {
            id: "a".into(),
            pixels: textured(518),
        };
        let f = enc.encode_image(&img).unwrap();
        for s in &f.stages {
            assert_eq!(s.qkv.shape(), &[37, 37, 8]);
            assert_eq!(s.vv.shape(), &[37, 37, 8]);
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = small_config();
        cfg.stage_indices = vec![3, 3];
        assert!(cfg.validate().is_err());
        let mut cfg = small_config();
        cfg.input_resolution = 30;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn wrong_shape_rejected() {
        let enc = StubImageEncoder::new(small_config(), 1).unwrap();
        let img = InputImage {
            id: "x".into(),
            pixels: Array3::zeros((16, 32, 3)),
        };
        assert!(matches!(enc.encode_image(&img), Err(Error::Shape(_))));
    }

    #[test]
    fn stub_image_encoder_passes_conformance() {
        let enc = StubImageEncoder::new(small_config(), 7).unwrap();
        let img = InputImage {
            id: "x".into(),
            pixels: textured(32),
        };
        check_image_encoder(&enc, &img).unwrap();
    }

    #[test]
    fn planted_patch_changes_only_its_neighbourhood() {
        let cfg = BackboneConfig {
            input_resolution: 64,
            ..small_config()
        };
        let enc = StubImageEncoder::new(cfg, 3).unwrap();
        let base = textured(64);
        let mut planted = base.clone();
        // patch (row 2, col 5) of the 8x8 grid
        planted
            .slice_mut(s![16..24, 40..48, ..])
            .mapv_inplace(|v| v + 1.5);
        let a = enc
            .encode_image(&InputImage {
                id: "a".into(),
                pixels: base,
            })
            .unwrap();
        let b = enc
            .encode_image(&InputImage {
                id: "b".into(),
                pixels: planted,
            })
            .unwrap();
        for (k, (sa, sb)) in a.stages.iter().zip(&b.stages).enumerate() {
            let radius = (k / 2) as isize;
            for y in 0..8isize {
                for x in 0..8isize {
                    let diff: f64 = (&sa.qkv.slice(s![y, x, ..]) - &sb.qkv.slice(s![y, x, ..]))
                        .iter()
                        .map(|d| d.abs())
                        .sum();
                    let near = (y - 2).abs() <= radius && (x - 5).abs() <= radius;
                    if near {
                        assert!(diff > 1e-6, "stage {k} ({y},{x}) should change");
                    } else {
                        assert_eq!(diff, 0.0, "stage {k} ({y},{x}) should not change");
                    }
                }
            }
        }
    }

    #[test]
    fn tokenize_splits_period() {
        assert_eq!(
            tokenize("Damaged bottle with cracked large at bottom left."),
            vec!["damaged", "bottle", "with", "cracked", "large", "at", "bottom", "left", "."]
        );
    }

    #[test]
    fn text_encoder_deterministic_unit_norm() {
        let enc = StubTextEncoder::new(8, 16, 5);
        check_text_encoder(&enc, 4).unwrap();
        let empty = Array2::<f64>::zeros((0, 8));
        let a = enc.encode("normal bottle.", empty.view()).unwrap();
        let b = enc.encode("normal bottle.", empty.view()).unwrap();
        assert_eq!(a, b);
        assert!(enc.encode("", empty.view()).is_err());
    }

    #[test]
    fn text_encoder_backward_matches_finite_differences() {
        let enc = StubTextEncoder::new(6, 10, 11);
        let mut rng = rng_for(1, "t");
        let ctx = normal_matrix(&mut rng, 3, 6, 0.3);
        let probe = normal_vec(&mut rng, 10, 1.0);
        let text = "damaged bottle with leaking.";
        let grad = enc
            .encode_backward(text, ctx.view(), probe.view())
            .unwrap();
        let h = 1e-6;
        let mut sensitivity = 0.0f64;
        for i in 0..3 {
            for j in 0..6 {
                let mut p = ctx.clone();
                p[[i, j]] += h;
                let mut m = ctx.clone();
                m[[i, j]] -= h;
                let fp = enc.encode(text, p.view()).unwrap().dot(&probe);
                let fm = enc.encode(text, m.view()).unwrap().dot(&probe);
                let fd = (fp - fm) / (2.0 * h);
                let an = grad[[i, j]];
                sensitivity = sensitivity.max(fd.abs());
                assert!(
                    (fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()).max(1e-3),
                    "({i},{j}) fd {fd} analytic {an}"
                );
            }
        }
        assert!(sensitivity > 0.0);
    }

    #[test]
    fn features_container_roundtrip() {
        let enc = StubImageEncoder::new(small_config(), 2).unwrap();
        let f = enc
            .encode_image(&InputImage {
                id: "z".into(),
                pixels: textured(32),
            })
            .unwrap();
        let c = f.to_container();
        let back = ImageFeatures::from_container(
            &TensorContainer::from_bytes(&c.to_bytes(), Path::new("mem")).unwrap(),
        )
        .unwrap();
        back.validate(&small_config()).unwrap();
        let diff = (&back.global - &f.global).iter().fold(0.0f64, |m, d| m.max(d.abs()));
        assert!(diff < 1e-6);
    }

    #[test]
    fn precomputed_encoder_reads_feature_files() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config();
        let stub = StubImageEncoder::new(cfg.clone(), 2).unwrap();
        let img = InputImage {
            id: "cls/test/good/000".into(),
            pixels: textured(32),
        };
        let f = stub.encode_image(&img).unwrap();
        f.to_container()
            .write(PrecomputedImageEncoder::feature_path(dir.path(), &img.id))
            .unwrap();
        let pre = PrecomputedImageEncoder::new(cfg, dir.path()).unwrap();
        check_image_encoder(&pre, &img).unwrap();
        let missing = InputImage {
            id: "nope".into(),
            pixels: textured(32),
        };
        assert!(matches!(pre.encode_image(&missing), Err(Error::Backend(_))));
    }
}
