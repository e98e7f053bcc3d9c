//! Anomaly maps from patch features and text features.
//!
//! Each stage contributes two pairs of maps: the value-value grid is run
//! through a bank of same-padded convolutions of several shapes (each kernel
//! gives a normal/abnormal softmax pair, summed over the bank) and the qkv
//! grid through a plain linear map. Stage maps are min-max normalised,
//! bilinearly upsampled, summed per kind and normalised again. The final map
//! averages the abnormal map with the complement of the normal map and
//! smooths it with a Gaussian.

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView2, ArrayView3, ArrayViewD, ArrayViewMutD, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{ImageFeatures, StagePatchFeatures};
use crate::error::{Error, Result};
use crate::params::{join, ParamSet};
use crate::prompts::TextFeatureBank;
use crate::seeding::normal_matrix;

/// Maps whose range is below this are treated as constant by
/// [`min_max_normalize`].
pub const CONSTANT_RANGE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapKind {
    StageNormal,
    StageAbnormal,
    FusedNormal,
    FusedAbnormal,
    Final,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyMap {
    pub kind: MapKind,
    pub values: Array2<f64>,
}

impl AnomalyMap {
    pub fn new(kind: MapKind, values: Array2<f64>) -> Self {
        Self { kind, values }
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmoothingConfig {
    pub sigma: f64,
    /// Kernel radius in standard deviations.
    pub truncate: f64,
}

impl Default for SmoothingConfig {
    fn default() -> Self {
        Self {
            sigma: 4.0,
            truncate: 4.0,
        }
    }
}

impl SmoothingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("sigma must be positive, got {}", self.sigma)));
        }
        if !(self.truncate > 0.0 && self.truncate.is_finite()) {
            return Err(Error::Config(format!("truncate must be positive, got {}", self.truncate)));
        }
        Ok(())
    }
}

/// How the kernel bank's per-kernel similarities are merged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelCombine {
    /// Softmax per kernel, then sum the probabilities.
    #[default]
    SumOfSoftmax,
    /// Sum the logits over kernels, then one softmax.
    SumOfLogits,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocMapConfig {
    /// `[height, width]` of each kernel in the bank; both odd.
    pub kernel_shapes: Vec<[usize; 2]>,
    pub combine: KernelCombine,
    pub use_vv_path: bool,
    pub use_qkv_path: bool,
    pub smoothing: SmoothingConfig,
}

impl Default for LocMapConfig {
    fn default() -> Self {
        Self {
            kernel_shapes: vec![[1, 1], [3, 3], [5, 5], [7, 7], [1, 5], [5, 1]],
            combine: KernelCombine::SumOfSoftmax,
            use_vv_path: true,
            use_qkv_path: true,
            smoothing: SmoothingConfig::default(),
        }
    }
}

impl LocMapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.use_vv_path && self.kernel_shapes.is_empty() {
            return Err(Error::Config("kernel bank is empty".into()));
        }
        if let Some(k) = self.kernel_shapes.iter().find(|k| k[0] % 2 == 0 || k[1] % 2 == 0) {
            return Err(Error::Config(format!("kernel {}x{} must have odd sides", k[0], k[1])));
        }
        if !self.use_vv_path && !self.use_qkv_path {
            return Err(Error::Config("at least one map path must be enabled".into()));
        }
        self.smoothing.validate()
    }
}

/// Same-padded `C -> C` convolution. Weights are laid out
/// `(height, width, c_in, c_out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelSpec {
    pub weights: Array4<f64>,
}

impl KernelSpec {
    pub fn new(weights: Array4<f64>) -> Result<Self> {
        let (kh, kw, _, _) = weights.dim();
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::Config(format!("kernel {kh}x{kw} must have odd sides")));
        }
        Ok(Self { weights })
    }

    /// Normal weights with standard deviation `1/sqrt(fan_in)`.
    pub fn init<R: Rng + ?Sized>(rng: &mut R, height: usize, width: usize, channels: usize) -> Result<Self> {
        let fan_in = (height * width * channels).max(1) as f64;
        let flat = normal_matrix(rng, height * width * channels, channels, fan_in.sqrt().recip());
        let weights = flat
            .into_shape_with_order((height, width, channels, channels))
            .expect("element count matches");
        Self::new(weights)
    }

    /// Centre tap set to the identity, all other taps zero.
    pub fn identity(height: usize, width: usize, channels: usize) -> Result<Self> {
        let mut weights = Array4::zeros((height, width, channels, channels));
        weights
            .slice_mut(s![height / 2, width / 2, .., ..])
            .assign(&Array2::eye(channels));
        Self::new(weights)
    }

    pub fn height(&self) -> usize {
        self.weights.dim().0
    }

    pub fn width(&self) -> usize {
        self.weights.dim().1
    }

    pub fn in_channels(&self) -> usize {
        self.weights.dim().2
    }

    pub fn out_channels(&self) -> usize {
        self.weights.dim().3
    }
}

fn padded(x: ArrayView3<'_, f64>, kh: usize, kw: usize) -> Array3<f64> {
    let (h, w, c) = x.dim();
    let (ph, pw) = (kh / 2, kw / 2);
    let mut p = Array3::zeros((h + 2 * ph, w + 2 * pw, c));
    p.slice_mut(s![ph..ph + h, pw..pw + w, ..]).assign(&x);
    p
}

fn window(p: &Array3<f64>, a: usize, b: usize, h: usize, w: usize) -> Array2<f64> {
    let c = p.dim().2;
    p.slice(s![a..a + h, b..b + w, ..])
        .to_owned()
        .into_shape_with_order((h * w, c))
        .expect("contiguous window")
}

/// Zero-padded "same" convolution of an `(h, w, c_in)` grid. Returns the
/// result flattened to `(h * w, c_out)` in row-major position order.
pub fn conv2d_same(x: ArrayView3<'_, f64>, kernel: &KernelSpec) -> Result<Array2<f64>> {
    let (h, w, c) = x.dim();
    if c != kernel.in_channels() {
        return Err(Error::Config(format!(
            "kernel expects {} channels, grid has {c}",
            kernel.in_channels()
        )));
    }
    let (kh, kw) = (kernel.height(), kernel.width());
    let p = padded(x, kh, kw);
    let mut y = Array2::zeros((h * w, kernel.out_channels()));
    for a in 0..kh {
        for b in 0..kw {
            let win = window(&p, a, b, h, w);
            y += &win.dot(&kernel.weights.slice(s![a, b, .., ..]));
        }
    }
    Ok(y)
}

/// Gradient of the kernel weights given the gradient on [`conv2d_same`]'s
/// output.
pub fn conv2d_same_weight_grad(
    x: ArrayView3<'_, f64>,
    kernel_shape: (usize, usize),
    grad_y: ArrayView2<'_, f64>,
) -> Array4<f64> {
    let (h, w, c) = x.dim();
    let (kh, kw) = kernel_shape;
    let p = padded(x, kh, kw);
    let mut g = Array4::zeros((kh, kw, c, grad_y.dim().1));
    for a in 0..kh {
        for b in 0..kw {
            let win = window(&p, a, b, h, w);
            g.slice_mut(s![a, b, .., ..]).assign(&win.t().dot(&grad_y));
        }
    }
    g
}

/// `(x - min) / (max - min)`; maps with range at most [`CONSTANT_RANGE`]
/// become all zeros.
pub fn min_max_normalize(x: &Array2<f64>) -> Array2<f64> {
    let (lo, hi) = min_max(x);
    let r = hi - lo;
    if r <= CONSTANT_RANGE {
        return Array2::zeros(x.raw_dim());
    }
    x.mapv(|v| (v - lo) / r)
}

fn min_max(x: &Array2<f64>) -> (f64, f64) {
    x.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

/// Flat indices of the first minimum and first maximum.
fn arg_extremes(values: &[f64]) -> (usize, usize) {
    let mut imin = 0;
    let mut imax = 0;
    for (i, &v) in values.iter().enumerate() {
        if v < values[imin] {
            imin = i;
        }
        if v > values[imax] {
            imax = i;
        }
    }
    (imin, imax)
}

/// Backward through [`min_max_normalize`]. Constant maps pass no gradient.
pub fn min_max_normalize_backward(x: &Array2<f64>, grad_y: &Array2<f64>) -> Array2<f64> {
    let x = x.as_standard_layout().to_owned();
    let (lo, hi) = min_max(&x);
    let r = hi - lo;
    if r <= CONSTANT_RANGE {
        return Array2::zeros(x.raw_dim());
    }
    let grad_y = grad_y.as_standard_layout();
    let mut g = grad_y.mapv(|v| v / r);
    let mut to_min = 0.0;
    let mut to_max = 0.0;
    for (&xv, &gv) in x.iter().zip(grad_y.iter()) {
        let y = (xv - lo) / r;
        to_min += gv * (y - 1.0) / r;
        to_max -= gv * y / r;
    }
    let (imin, imax) = arg_extremes(x.as_slice().expect("standard layout"));
    let slice = g.as_slice_mut().expect("standard layout");
    slice[imin] += to_min;
    slice[imax] += to_max;
    g
}

/// `(out, in)` matrix of half-pixel bilinear interpolation along one axis,
/// with source coordinates clamped to the edges.
pub fn bilinear_matrix(out_len: usize, in_len: usize) -> Array2<f64> {
    let mut m = Array2::zeros((out_len, in_len));
    if in_len == 0 {
        return m;
    }
    let scale = in_len as f64 / out_len as f64;
    for o in 0..out_len {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(in_len - 1);
        let i1 = (i0 + 1).min(in_len - 1);
        let frac = src - i0 as f64;
        m[[o, i0]] += 1.0 - frac;
        m[[o, i1]] += frac;
    }
    m
}

/// Bilinear resize of a single-channel map.
pub fn upsample_bilinear(x: &Array2<f64>, out: (usize, usize)) -> Array2<f64> {
    let (h, w) = x.dim();
    let rows = bilinear_matrix(out.0, h);
    let cols = bilinear_matrix(out.1, w);
    rows.dot(x).dot(&cols.t())
}

/// Transpose of [`upsample_bilinear`].
pub fn upsample_bilinear_backward(grad_y: &Array2<f64>, input: (usize, usize)) -> Array2<f64> {
    let (oh, ow) = grad_y.dim();
    let rows = bilinear_matrix(oh, input.0);
    let cols = bilinear_matrix(ow, input.1);
    rows.t().dot(grad_y).dot(&cols)
}

fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let m = i.rem_euclid(2 * n);
    (if m < n { m } else { 2 * n - 1 - m }) as usize
}

/// Normalised Gaussian taps for offsets `-radius..=radius`.
pub fn gaussian_taps(cfg: &SmoothingConfig) -> Vec<f64> {
    let radius = (cfg.truncate * cfg.sigma + 0.5) as isize;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|d| (-0.5 * (d * d) as f64 / (cfg.sigma * cfg.sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// `(n, n)` matrix of a 1-D Gaussian blur with mirrored borders
/// (`d c b a | a b c d | d c b a`).
pub fn blur_matrix(n: usize, cfg: &SmoothingConfig) -> Array2<f64> {
    let taps = gaussian_taps(cfg);
    let radius = (taps.len() / 2) as isize;
    let mut m = Array2::zeros((n, n));
    if n == 0 {
        return m;
    }
    for i in 0..n {
        for (k, t) in taps.iter().enumerate() {
            let j = reflect_index(i as isize + k as isize - radius, n);
            m[[i, j]] += t;
        }
    }
    m
}

pub fn gaussian_blur(x: &Array2<f64>, cfg: &SmoothingConfig) -> Array2<f64> {
    let (h, w) = x.dim();
    blur_matrix(h, cfg).dot(x).dot(&blur_matrix(w, cfg).t())
}

pub fn gaussian_blur_backward(grad_y: &Array2<f64>, cfg: &SmoothingConfig) -> Array2<f64> {
    let (h, w) = grad_y.dim();
    blur_matrix(h, cfg).t().dot(grad_y).dot(&blur_matrix(w, cfg))
}

/// Two-class softmax over `(normal, abnormal)` logits, returned in the same
/// order.
pub fn softmax_pair(normal: f64, abnormal: f64) -> (f64, f64) {
    let m = normal.max(abnormal);
    let (en, ea) = ((normal - m).exp(), (abnormal - m).exp());
    let total = en + ea;
    (en / total, ea / total)
}

fn check_text(text: &TextFeatureBank, channels: usize) -> Result<()> {
    if text.normal.len() != channels || text.abnormal.len() != channels {
        return Err(Error::Config(format!(
            "text width {} does not match feature width {channels}",
            text.normal.len()
        )));
    }
    Ok(())
}

/// Per-position `(normal, abnormal)` probabilities of the two-class softmax
/// over `(y . F_n, y . F_a)`, with `y` given as `(positions, C)`.
fn class_probs(y: &Array2<f64>, text: &TextFeatureBank) -> (Array1<f64>, Array1<f64>) {
    let logits_n = y.dot(&text.normal);
    let logits_a = y.dot(&text.abnormal);
    let mut normal = Array1::zeros(logits_n.len());
    let mut abnormal = Array1::zeros(logits_n.len());
    Zip::from(&mut normal)
        .and(&mut abnormal)
        .and(&logits_n)
        .and(&logits_a)
        .for_each(|pn, pa, &n, &a| (*pn, *pa) = softmax_pair(n, a));
    (normal, abnormal)
}

/// Cached intermediate values of one stage/path.
#[derive(Debug, Clone)]
struct PathForward {
    /// Projected features `(h * w, C)`, one per kernel (one for the qkv path).
    projected: Vec<Array2<f64>>,
    /// Abnormal probabilities, one per kernel, or a single entry for the
    /// qkv path and for sum-of-logits.
    probs: Vec<Array1<f64>>,
    sum_normal: Array2<f64>,
    sum_abnormal: Array2<f64>,
    grid: (usize, usize),
}

fn path_from_projections(
    projected: Vec<Array2<f64>>,
    text: &TextFeatureBank,
    combine: KernelCombine,
    grid: (usize, usize),
) -> PathForward {
    let n = grid.0 * grid.1;
    let mut sum_abnormal = Array1::<f64>::zeros(n);
    let mut sum_normal = Array1::<f64>::zeros(n);
    let probs = match combine {
        KernelCombine::SumOfSoftmax => projected
            .iter()
            .map(|y| {
                let (pn, pa) = class_probs(y, text);
                sum_abnormal += &pa;
                sum_normal += &pn;
                pa
            })
            .collect(),
        KernelCombine::SumOfLogits => {
            let total = projected
                .iter()
                .fold(Array2::zeros((n, text.width())), |acc, y| acc + y);
            let (pn, pa) = class_probs(&total, text);
            sum_abnormal += &pa;
            sum_normal += &pn;
            vec![pa]
        }
    };
    let shape = |a: Array1<f64>| a.into_shape_with_order(grid).expect("grid size");
    PathForward {
        projected,
        probs,
        sum_normal: shape(sum_normal),
        sum_abnormal: shape(sum_abnormal),
        grid,
    }
}

fn stage_pair(fwd: &PathForward, out: (usize, usize)) -> (AnomalyMap, AnomalyMap) {
    (
        AnomalyMap::new(
            MapKind::StageNormal,
            upsample_bilinear(&min_max_normalize(&fwd.sum_normal), out),
        ),
        AnomalyMap::new(
            MapKind::StageAbnormal,
            upsample_bilinear(&min_max_normalize(&fwd.sum_abnormal), out),
        ),
    )
}

fn flat_grid(x: ArrayView3<'_, f64>) -> Array2<f64> {
    let (h, w, c) = x.dim();
    x.as_standard_layout()
        .to_owned()
        .into_shape_with_order((h * w, c))
        .expect("contiguous grid")
}

fn mmci_forward(
    grid: ArrayView3<'_, f64>,
    text: &TextFeatureBank,
    kernels: &[KernelSpec],
    combine: KernelCombine,
) -> Result<PathForward> {
    let (h, w, c) = grid.dim();
    check_text(text, c)?;
    if kernels.is_empty() {
        return Err(Error::Config("kernel bank is empty".into()));
    }
    if let Some(k) = kernels.iter().find(|k| k.out_channels() != c) {
        return Err(Error::Config(format!(
            "kernel output width {} != text width {c}",
            k.out_channels()
        )));
    }
    let projected = kernels
        .iter()
        .map(|k| conv2d_same(grid, k))
        .collect::<Result<Vec<_>>>()?;
    Ok(path_from_projections(projected, text, combine, (h, w)))
}

fn linear_forward(grid: ArrayView3<'_, f64>, text: &TextFeatureBank, linear: &Array2<f64>) -> Result<PathForward> {
    let (h, w, c) = grid.dim();
    check_text(text, c)?;
    if linear.dim() != (c, c) {
        return Err(Error::Config(format!(
            "linear map {:?} does not match width {c}",
            linear.dim()
        )));
    }
    let projected = vec![flat_grid(grid).dot(linear)];
    Ok(path_from_projections(projected, text, KernelCombine::SumOfSoftmax, (h, w)))
}

/// Normal/abnormal stage maps from the value-value grid and a kernel bank,
/// upsampled to `out`.
pub fn mmci_stage_maps(
    patches: &StagePatchFeatures,
    text: &TextFeatureBank,
    kernels: &[KernelSpec],
    combine: KernelCombine,
    out: (usize, usize),
) -> Result<(AnomalyMap, AnomalyMap)> {
    let fwd = mmci_forward(patches.vv.view(), text, kernels, combine)?;
    Ok(stage_pair(&fwd, out))
}

/// Normal/abnormal stage maps from the qkv grid through a `C -> C` linear
/// map (`y = x W`), upsampled to `out`.
pub fn qkv_stage_maps(
    patches: &StagePatchFeatures,
    text: &TextFeatureBank,
    linear: &Array2<f64>,
    out: (usize, usize),
) -> Result<(AnomalyMap, AnomalyMap)> {
    let fwd = linear_forward(patches.qkv.view(), text, linear)?;
    Ok(stage_pair(&fwd, out))
}

/// Sum each kind over all stage maps and min-max normalise.
pub fn fuse_maps(stage_maps: &[(AnomalyMap, AnomalyMap)]) -> Result<(AnomalyMap, AnomalyMap)> {
    let (first, rest) = stage_maps
        .split_first()
        .ok_or_else(|| Error::InvalidInput("no stage maps to fuse".into()))?;
    let mut normal = first.0.values.clone();
    let mut abnormal = first.1.values.clone();
    for (n, a) in rest {
        if n.values.dim() != normal.dim() || a.values.dim() != abnormal.dim() {
            return Err(Error::Shape("stage maps differ in size".into()));
        }
        normal += &n.values;
        abnormal += &a.values;
    }
    Ok((
        AnomalyMap::new(MapKind::FusedNormal, min_max_normalize(&normal)),
        AnomalyMap::new(MapKind::FusedAbnormal, min_max_normalize(&abnormal)),
    ))
}

/// `blur((M^a + 1 - M^n) / 2)`, clamped to `[0, 1]`.
pub fn final_map(normal: &AnomalyMap, abnormal: &AnomalyMap, smoothing: &SmoothingConfig) -> AnomalyMap {
    let mixed = (&abnormal.values - &normal.values).mapv(|v| (v + 1.0) / 2.0);
    AnomalyMap::new(
        MapKind::Final,
        gaussian_blur(&mixed, smoothing).mapv(|v| v.clamp(0.0, 1.0)),
    )
}

/// Trainable parameters of all stages: a kernel bank for the value-value
/// path and a linear map for the qkv path.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationHeads {
    pub kernels: Vec<Vec<KernelSpec>>,
    pub linear: Vec<Array2<f64>>,
}

impl LocalizationHeads {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, stages: usize, channels: usize, cfg: &LocMapConfig) -> Result<Self> {
        cfg.validate()?;
        let mut kernels = Vec::with_capacity(stages);
        let mut linear = Vec::with_capacity(stages);
        for _ in 0..stages {
            let bank = cfg
                .kernel_shapes
                .iter()
                .map(|&[h, w]| KernelSpec::init(rng, h, w, channels))
                .collect::<Result<Vec<_>>>()?;
            kernels.push(bank);
            linear.push(normal_matrix(rng, channels, channels, (channels as f64).sqrt().recip()));
        }
        Ok(Self { kernels, linear })
    }

    pub fn stages(&self) -> usize {
        self.linear.len()
    }

    pub fn forward(
        &self,
        features: &ImageFeatures,
        text: &TextFeatureBank,
        cfg: &LocMapConfig,
        out: (usize, usize),
    ) -> Result<LocForward> {
        if features.stages.len() != self.stages() {
            return Err(Error::Config(format!(
                "{} feature stages, heads have {}",
                features.stages.len(),
                self.stages()
            )));
        }
        let mut paths = Vec::new();
        let mut stage_maps = Vec::new();
        for (k, stage) in features.stages.iter().enumerate() {
            if cfg.use_vv_path {
                let fwd = mmci_forward(stage.vv.view(), text, &self.kernels[k], cfg.combine)?;
                stage_maps.push(stage_pair(&fwd, out));
                paths.push((k, MapPath::ValueValue, fwd));
            }
            if cfg.use_qkv_path {
                let fwd = linear_forward(stage.qkv.view(), text, &self.linear[k])?;
                stage_maps.push(stage_pair(&fwd, out));
                paths.push((k, MapPath::Qkv, fwd));
            }
        }
        let mut sum_normal = Array2::<f64>::zeros(out);
        let mut sum_abnormal = Array2::<f64>::zeros(out);
        for (n, a) in &stage_maps {
            sum_normal += &n.values;
            sum_abnormal += &a.values;
        }
        let normal = AnomalyMap::new(MapKind::FusedNormal, min_max_normalize(&sum_normal));
        let abnormal = AnomalyMap::new(MapKind::FusedAbnormal, min_max_normalize(&sum_abnormal));
        let final_map = final_map(&normal, &abnormal, &cfg.smoothing);
        Ok(LocForward {
            normal,
            abnormal,
            final_map,
            paths,
            sum_normal,
            sum_abnormal,
            combine: cfg.combine,
            smoothing: cfg.smoothing.clone(),
        })
    }

    /// Parameter and text-feature gradients given gradients on the fused
    /// maps and on the final map (before clamping).
    pub fn backward(
        &self,
        fwd: &LocForward,
        features: &ImageFeatures,
        text: &TextFeatureBank,
        grad_normal: &Array2<f64>,
        grad_abnormal: &Array2<f64>,
        grad_final: Option<&Array2<f64>>,
    ) -> Result<(LocalizationHeads, Array1<f64>, Array1<f64>)> {
        let mut g_normal = grad_normal.clone();
        let mut g_abnormal = grad_abnormal.clone();
        if let Some(gf) = grad_final {
            let mixed = (&fwd.abnormal.values - &fwd.normal.values).mapv(|v| (v + 1.0) / 2.0);
            let blurred = gaussian_blur(&mixed, &fwd.smoothing);
            let mut gf = gf.clone();
            Zip::from(&mut gf).and(&blurred).for_each(|g, &b| {
                if !(0.0..=1.0).contains(&b) {
                    *g = 0.0;
                }
            });
            let g_mixed = gaussian_blur_backward(&gf, &fwd.smoothing) / 2.0;
            g_abnormal += &g_mixed;
            g_normal -= &g_mixed;
        }
        let g_stage_normal = min_max_normalize_backward(&fwd.sum_normal, &g_normal);
        let g_stage_abnormal = min_max_normalize_backward(&fwd.sum_abnormal, &g_abnormal);

        let mut grads = self.zeros_like();
        let c = text.width();
        let mut g_text_normal = Array1::<f64>::zeros(c);
        let mut g_text_abnormal = Array1::<f64>::zeros(c);
        let diff = &text.abnormal - &text.normal;
        for (k, path, pf) in &fwd.paths {
            let gn = upsample_bilinear_backward(&g_stage_normal, pf.grid);
            let ga = upsample_bilinear_backward(&g_stage_abnormal, pf.grid);
            let gn_sum = min_max_normalize_backward(&pf.sum_normal, &gn);
            let ga_sum = min_max_normalize_backward(&pf.sum_abnormal, &ga);
            let n = pf.grid.0 * pf.grid.1;
            let g_pa = (&ga_sum - &gn_sum)
                .into_shape_with_order(n)
                .expect("grid size");
            // d(logit_a - logit_n) for each probability vector
            let deltas: Vec<Array1<f64>> = pf
                .probs
                .iter()
                .map(|p| &g_pa * &p.mapv(|v| v * (1.0 - v)))
                .collect();
            let delta_for = |j: usize| -> &Array1<f64> {
                match (path, fwd.combine) {
                    (MapPath::ValueValue, KernelCombine::SumOfLogits) => &deltas[0],
                    _ => &deltas[j],
                }
            };
            let stage = &features.stages[*k];
            for (j, y) in pf.projected.iter().enumerate() {
                let d = delta_for(j);
                let dy = d.view().insert_axis(Axis(1)).dot(&diff.view().insert_axis(Axis(0)));
                let gy_text = y.t().dot(d);
                g_text_abnormal += &gy_text;
                g_text_normal -= &gy_text;
                match path {
                    MapPath::ValueValue => {
                        let kernel = &self.kernels[*k][j];
                        grads.kernels[*k][j].weights += &conv2d_same_weight_grad(
                            stage.vv.view(),
                            (kernel.height(), kernel.width()),
                            dy.view(),
                        );
                    }
                    MapPath::Qkv => {
                        grads.linear[*k] += &flat_grid(stage.qkv.view()).t().dot(&dy);
                    }
                }
            }
        }
        Ok((grads, g_text_normal, g_text_abnormal))
    }
}

impl ParamSet for LocalizationHeads {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewD<'_, f64>)) {
        for (k, (bank, lin)) in self.kernels.iter().zip(&self.linear).enumerate() {
            for (j, kernel) in bank.iter().enumerate() {
                let name = format!("stage{k}.kernel{j}_{}x{}", kernel.height(), kernel.width());
                f(join(prefix, &name), kernel.weights.view().into_dyn());
            }
            f(join(prefix, &format!("stage{k}.linear")), lin.view().into_dyn());
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewMutD<'_, f64>)) {
        for (k, (bank, lin)) in self.kernels.iter_mut().zip(&mut self.linear).enumerate() {
            for (j, kernel) in bank.iter_mut().enumerate() {
                let name = format!("stage{k}.kernel{j}_{}x{}", kernel.height(), kernel.width());
                f(join(prefix, &name), kernel.weights.view_mut().into_dyn());
            }
            f(join(prefix, &format!("stage{k}.linear")), lin.view_mut().into_dyn());
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum MapPath {
    ValueValue,
    Qkv,
}

/// Output of [`LocalizationHeads::forward`] with the values needed for the
/// backward pass.
#[derive(Debug, Clone)]
pub struct LocForward {
    pub normal: AnomalyMap,
    pub abnormal: AnomalyMap,
    /// Final map before box suppression.
    pub final_map: AnomalyMap,
    paths: Vec<(usize, MapPath, PathForward)>,
    sum_normal: Array2<f64>,
    sum_abnormal: Array2<f64>,
    combine: KernelCombine,
    smoothing: SmoothingConfig,
}

impl LocForward {
    /// Upsampled stage maps in stage order, value-value path first.
    pub fn stage_maps(&self, out: (usize, usize)) -> Vec<(AnomalyMap, AnomalyMap)> {
        self.paths.iter().map(|(_, _, pf)| stage_pair(pf, out)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::rng_for;
    use ndarray::array;

    #[test]
    fn softmax_pair_is_stable() {
        assert_eq!(softmax_pair(0.0, 0.0), (0.5, 0.5));
        assert_eq!(softmax_pair(-800.0, 800.0), (0.0, 1.0));
        let (n, a) = softmax_pair(1.0, 1.0 + 3f64.ln());
        assert!((n - 0.25).abs() < 1e-15 && (a - 0.75).abs() < 1e-15);
    }

    fn bank(n: Array1<f64>, a: Array1<f64>) -> TextFeatureBank {
        TextFeatureBank { normal: n, abnormal: a }
    }

    fn stage(qkv: Array3<f64>, vv: Array3<f64>) -> StagePatchFeatures {
        StagePatchFeatures {
            stage_index: 1,
            qkv,
            vv,
        }
    }

    #[test]
    fn identity_kernel_uniform_patches_normalize_to_zero() {
        let text = bank(array![1.0, 0.0], array![0.0, 1.0]);
        let grid = Array3::from_shape_fn((4, 4, 2), |(_, _, c)| if c == 1 { 1.0 } else { 0.0 });
        let k = KernelSpec::identity(1, 1, 2).unwrap();
        let fwd = mmci_forward(grid.view(), &text, std::slice::from_ref(&k), KernelCombine::SumOfSoftmax).unwrap();
        let e = std::f64::consts::E;
        for v in fwd.sum_abnormal.iter() {
            assert!((v - e / (e + 1.0)).abs() < 1e-12);
        }
        let (n, a) = mmci_stage_maps(&stage(grid.clone(), grid), &text, &[k], KernelCombine::SumOfSoftmax, (8, 8)).unwrap();
        assert!(a.values.iter().chain(n.values.iter()).all(|&v| v == 0.0));
    }

    #[test]
    fn zero_logits_give_half() {
        let text = bank(array![1.0, 0.0], array![0.0, 1.0]);
        let grid = Array3::from_elem((3, 3, 2), 0.7);
        let fwd = linear_forward(grid.view(), &text, &Array2::zeros((2, 2))).unwrap();
        assert!(fwd.sum_normal.iter().chain(fwd.sum_abnormal.iter()).all(|&v| v == 0.5));
    }

    #[test]
    fn identity_linear_favours_matching_text() {
        let text = bank(array![1.0, 0.0], array![0.0, 1.0]);
        let grid = Array3::from_shape_fn((2, 2, 2), |(_, _, c)| if c == 0 { 1.0 } else { 0.0 });
        let fwd = linear_forward(grid.view(), &text, &Array2::eye(2)).unwrap();
        let e = std::f64::consts::E;
        for v in fwd.sum_normal.iter() {
            assert!((v - e / (1.0 + e)).abs() < 1e-12);
        }
    }

    #[test]
    fn grid_is_upsampled_to_image_size() {
        let mut rng = rng_for(3, "t");
        let c = 4;
        let text = bank(array![1.0, 0.0, 0.0, 0.0], array![0.0, 1.0, 0.0, 0.0]);
        let g = normal_matrix(&mut rng, 37 * 37, c, 1.0).into_shape_with_order((37, 37, c)).unwrap();
        for [h, w] in LocMapConfig::default().kernel_shapes {
            let k = KernelSpec::init(&mut rng, h, w, c).unwrap();
            let (n, a) = mmci_stage_maps(&stage(g.clone(), g.clone()), &text, &[k], KernelCombine::SumOfSoftmax, (518, 518)).unwrap();
            assert_eq!(n.values.dim(), (518, 518));
            assert_eq!(a.values.dim(), (518, 518));
        }
    }

    #[test]
    fn width_mismatch_is_config_error() {
        let text = bank(array![1.0, 0.0, 0.0], array![0.0, 1.0, 0.0]);
        let g = Array3::zeros((2, 2, 2));
        let err = qkv_stage_maps(&stage(g.clone(), g), &text, &Array2::eye(2), (4, 4)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn fuse_examples() {
        let m = |v: Vec<f64>, kind| AnomalyMap::new(kind, Array2::from_shape_vec((1, 2), v).unwrap());
        let a = m(vec![0.0, 0.5], MapKind::StageAbnormal);
        let b = m(vec![0.5, 1.0], MapKind::StageAbnormal);
        let (_, fa) = fuse_maps(&[(a.clone(), a.clone()), (b.clone(), b)]).unwrap();
        assert_eq!(fa.values, array![[0.0, 1.0]]);
        let (_, one) = fuse_maps(&[(a.clone(), a.clone())]).unwrap();
        let (_, two) = fuse_maps(&[(a.clone(), a.clone()), (a.clone(), a)]).unwrap();
        assert_eq!(one.values, two.values);
        assert!(fuse_maps(&[]).is_err());
    }

    #[test]
    fn final_map_examples() {
        let s = SmoothingConfig::default();
        let ones = AnomalyMap::new(MapKind::FusedAbnormal, Array2::ones((6, 6)));
        let zeros = AnomalyMap::new(MapKind::FusedNormal, Array2::zeros((6, 6)));
        let f = final_map(&zeros, &ones, &s);
        assert!(f.values.iter().all(|v| (v - 1.0).abs() < 1e-12));
        let f = final_map(&ones, &ones, &s);
        assert!(f.values.iter().all(|v| (v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn reflect_indices() {
        let got: Vec<usize> = (-4..8).map(|i| reflect_index(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 0, 1, 2, 3, 3, 2, 1, 0]);
        assert_eq!(reflect_index(-9, 2), 0);
    }

    #[test]
    fn taps_have_expected_radius() {
        assert_eq!(gaussian_taps(&SmoothingConfig::default()).len(), 33);
        let sum: f64 = gaussian_taps(&SmoothingConfig { sigma: 1.3, truncate: 4.0 }).iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn min_max_examples() {
        let x = array![[2.0, 4.0], [3.0, 6.0]];
        let y = min_max_normalize(&x);
        assert_eq!(y, array![[0.0, 0.5], [0.25, 1.0]]);
        assert_eq!(min_max_normalize(&Array2::from_elem((2, 2), 0.3)), Array2::<f64>::zeros((2, 2)));
    }

    #[test]
    fn min_max_backward_matches_differences() {
        let x = array![[0.3, 1.7, -0.4], [2.2, 0.9, 0.1]];
        let g = array![[0.5, -1.0, 0.25], [0.8, -0.3, 1.1]];
        let analytic = min_max_normalize_backward(&x, &g);
        let h = 1e-6;
        for idx in [(0, 0), (0, 1), (0, 2), (1, 0), (1, 1), (1, 2)] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = ((&min_max_normalize(&xp) * &g).sum() - (&min_max_normalize(&xm) * &g).sum()) / (2.0 * h);
            assert!((fd - analytic[idx]).abs() < 1e-6, "{idx:?}: {fd} vs {}", analytic[idx]);
        }
    }

    #[test]
    fn linear_ops_and_transposes_agree() {
        let mut rng = rng_for(9, "adjoint");
        let x = normal_matrix(&mut rng, 5, 7, 1.0);
        let g = normal_matrix(&mut rng, 12, 9, 1.0);
        let lhs = (upsample_bilinear(&x, (12, 9)) * &g).sum();
        let rhs = (upsample_bilinear_backward(&g, (5, 7)) * &x).sum();
        assert!((lhs - rhs).abs() < 1e-10);
        let s = SmoothingConfig { sigma: 1.5, truncate: 4.0 };
        let x = normal_matrix(&mut rng, 6, 5, 1.0);
        let g = normal_matrix(&mut rng, 6, 5, 1.0);
        let lhs = (gaussian_blur(&x, &s) * &g).sum();
        let rhs = (gaussian_blur_backward(&g, &s) * &x).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn upsample_identity_and_range() {
        let x = array![[0.0, 1.0], [0.5, 0.25]];
        assert_eq!(upsample_bilinear(&x, (2, 2)), x);
        let up = upsample_bilinear(&x, (7, 5));
        assert!(up.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn conv_weight_grad_matches_differences() {
        let mut rng = rng_for(4, "conv");
        let x = normal_matrix(&mut rng, 20, 3, 1.0).into_shape_with_order((4, 5, 3)).unwrap();
        let k = KernelSpec::init(&mut rng, 3, 1, 3).unwrap();
        let g = normal_matrix(&mut rng, 20, 3, 1.0);
        let analytic = conv2d_same_weight_grad(x.view(), (3, 1), g.view());
        let h = 1e-6;
        for idx in [(0, 0, 0, 0), (1, 0, 2, 1), (2, 0, 1, 2)] {
            let mut kp = k.clone();
            kp.weights[idx] += h;
            let mut km = k.clone();
            km.weights[idx] -= h;
            let fp = (conv2d_same(x.view(), &kp).unwrap() * &g).sum();
            let fm = (conv2d_same(x.view(), &km).unwrap() * &g).sum();
            let fd = (fp - fm) / (2.0 * h);
            assert!((fd - analytic[idx]).abs() < 1e-6);
        }
    }

    #[test]
    fn conv_identity_kernel_is_identity() {
        let mut rng = rng_for(5, "conv-id");
        let x = normal_matrix(&mut rng, 12, 2, 1.0).into_shape_with_order((3, 4, 2)).unwrap();
        let k = KernelSpec::identity(5, 3, 2).unwrap();
        let y = conv2d_same(x.view(), &k).unwrap();
        assert_eq!(y, flat_grid(x.view()));
    }
}
