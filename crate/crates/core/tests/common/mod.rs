//! Independent oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use zsad::backbone::{ImageFeatures, StagePatchFeatures, StubTextEncoder};
use zsad::config::RunConfig;
use zsad::grounding::DetectionBox;
use zsad::params::ParamSet;
use zsad::pipeline::{ModelConfig, PreparedImage};
use zsad::prompts::TextFeatureBank;
use zsad::seeding::rng_for;

/// Mean binary cross-entropy with predictions clamped to `[eps, 1 - eps]`.
pub fn bce_oracle(pred: &[f64], target: &[f64], eps: f64) -> f64 {
    let mut total = 0.0;
    for (&p, &y) in pred.iter().zip(target) {
        let p = p.clamp(eps, 1.0 - eps);
        total -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
    }
    total / pred.len() as f64
}

/// Pairwise AUROC: every (positive, negative) pair scores 2 for a win and 1
/// for a tie, normalised by `2 * P * N`.
pub fn pairwise_auroc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut wins2: u64 = 0;
    let (mut pos, mut neg) = (0u64, 0u64);
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] == 0 {
            neg += 1;
            continue;
        }
        pos += 1;
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] == 0 {
                if si > sj {
                    wins2 += 2;
                } else if si == sj {
                    wins2 += 1;
                }
            }
        }
    }
    wins2 as f64 / (2 * pos * neg) as f64
}

/// Every parameter coordinate as `(tensor ordinal, element ordinal)`.
fn coordinates<P: ParamSet>(p: &P) -> Vec<(usize, usize, String)> {
    let mut out = Vec::new();
    let mut t = 0;
    p.visit("", &mut |name, a| {
        for e in 0..a.len() {
            out.push((t, e, name.clone()));
        }
        t += 1;
    });
    out
}

fn nudge<P: ParamSet>(p: &P, tensor: usize, elem: usize, delta: f64) -> P {
    let mut q = p.clone();
    let mut t = 0;
    q.visit_mut("", &mut |_, mut a| {
        if t == tensor {
            *a.iter_mut().nth(elem).expect("element") += delta;
        }
        t += 1;
    });
    q
}

fn read<P: ParamSet>(p: &P, tensor: usize, elem: usize) -> f64 {
    let mut t = 0;
    let mut v = f64::NAN;
    p.visit("", &mut |_, a| {
        if t == tensor {
            v = *a.iter().nth(elem).expect("element");
        }
        t += 1;
    });
    v
}

pub const FD_STEP: f64 = 1e-6;
pub const GRAD_RTOL: f64 = 1e-3;
/// Magnitude below which a component is compared absolutely.
pub const GRAD_FLOOR: f64 = 1e-4;

pub fn grad_close(analytic: f64, numeric: f64) -> bool {
    (analytic - numeric).abs() <= GRAD_RTOL * analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

/// Compare `analytic` with central differences of `f` on up to `per_tensor`
/// randomly chosen coordinates of every tensor. Returns the number of
/// coordinates checked.
pub fn check_gradient<P: ParamSet>(
    params: &P,
    analytic: &P,
    per_tensor: usize,
    rng: &mut ChaCha8Rng,
    f: impl Fn(&P) -> f64,
) -> Result<usize, String> {
    let coords = coordinates(params);
    let tensors = coords.last().map_or(0, |c| c.0 + 1);
    let mut checked = 0;
    for t in 0..tensors {
        let mine: Vec<&(usize, usize, String)> = coords.iter().filter(|c| c.0 == t).collect();
        let picks: Vec<&(usize, usize, String)> = if mine.len() <= per_tensor {
            mine
        } else {
            (0..per_tensor).map(|_| mine[rng.random_range(0..mine.len())]).collect()
        };
        for &&(t, e, ref name) in &picks {
            let numeric = (f(&nudge(params, t, e, FD_STEP)) - f(&nudge(params, t, e, -FD_STEP))) / (2.0 * FD_STEP);
            let a = read(analytic, t, e);
            if !grad_close(a, numeric) {
                return Err(format!("{name}[{e}]: analytic {a:.9e} vs numeric {numeric:.9e}"));
            }
            checked += 1;
        }
    }
    Ok(checked)
}

/// Same comparison for a plain vector argument.
pub fn check_vector_gradient(
    x: &Array1<f64>,
    analytic: &Array1<f64>,
    label: &str,
    f: impl Fn(&Array1<f64>) -> f64,
) -> Result<(), String> {
    for i in 0..x.len() {
        let mut up = x.clone();
        up[i] += FD_STEP;
        let mut down = x.clone();
        down[i] -= FD_STEP;
        let numeric = (f(&up) - f(&down)) / (2.0 * FD_STEP);
        if !grad_close(analytic[i], numeric) {
            return Err(format!(
                "{label}[{i}]: analytic {:.9e} vs numeric {numeric:.9e}",
                analytic[i]
            ));
        }
    }
    Ok(())
}

pub fn random_unit(rng: &mut ChaCha8Rng, c: usize) -> Array1<f64> {
    let v = Array1::<f64>::from_shape_fn(c, |_| rng.random_range(-1.0..1.0));
    let n = v.dot(&v).sqrt();
    v / n
}

pub fn random_bank(rng: &mut ChaCha8Rng, c: usize) -> TextFeatureBank {
    TextFeatureBank {
        normal: random_unit(rng, c),
        abnormal: random_unit(rng, c),
    }
}

pub fn random_grid(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Array3<f64> {
    Array3::from_shape_fn((h, w, c), |_| rng.random_range(-1.0..1.0))
}

pub fn random_features(rng: &mut ChaCha8Rng, stages: usize, grid: (usize, usize), c: usize) -> ImageFeatures {
    ImageFeatures {
        global: Array1::from_shape_fn(c, |_| rng.random_range(-1.0..1.0)),
        stages: (0..stages)
            .map(|k| StagePatchFeatures {
                stage_index: k + 1,
                qkv: random_grid(rng, grid.0, grid.1, c),
                vv: random_grid(rng, grid.0, grid.1, c),
            })
            .collect(),
    }
}

/// Model configuration with an `8x8` patch grid, `16x16` maps and 16-wide
/// features.
pub fn tiny_model_config() -> ModelConfig {
    let mut cfg = ModelConfig::default();
    cfg.backbone.input_resolution = 16;
    cfg.backbone.patch_size = 2;
    cfg.backbone.stage_indices = vec![1, 2];
    cfg.backbone.vv_start_layer = 1;
    cfg.backbone.feature_width = 16;
    cfg.backbone.token_width = 8;
    cfg.context_len = 4;
    cfg
}

pub fn tiny_text_encoder(cfg: &ModelConfig) -> StubTextEncoder {
    StubTextEncoder::new(cfg.backbone.token_width, cfg.backbone.feature_width, 3)
}

/// Random features for `class`, with one random box on odd seeds.
pub fn tiny_image(seed: u64, cfg: &ModelConfig, class: &str) -> PreparedImage {
    let mut rng = rng_for(seed, "tiny-image");
    let g = cfg.backbone.grid_size();
    let features = random_features(
        &mut rng,
        cfg.backbone.stage_indices.len(),
        (g, g),
        cfg.backbone.feature_width,
    );
    let boxes = if seed % 2 == 1 {
        let x0 = rng.random_range(0.0..0.6);
        let y0 = rng.random_range(0.0..0.6);
        vec![DetectionBox::new(x0, y0, x0 + 0.3, y0 + 0.3, 0.9, "scratch").unwrap()]
    } else {
        Vec::new()
    };
    PreparedImage {
        id: format!("tiny/{seed}"),
        class_name: class.into(),
        features,
        boxes,
    }
}

pub fn random_mask(rng: &mut ChaCha8Rng, dim: (usize, usize)) -> Array2<f64> {
    // one rectangle of anomalous pixels
    let (h, w) = dim;
    let r0 = rng.random_range(0..h / 2);
    let c0 = rng.random_range(0..w / 2);
    let (rh, cw) = (rng.random_range(1..h / 2), rng.random_range(1..w / 2));
    Array2::from_shape_fn(dim, |(r, c)| {
        if (r0..r0 + rh).contains(&r) && (c0..c0 + cw).contains(&c) {
            1.0
        } else {
            0.0
        }
    })
}

/// The synthetic run configuration used by the end-to-end checks.
pub fn synthetic_config() -> RunConfig {
    RunConfig::synthetic()
}
