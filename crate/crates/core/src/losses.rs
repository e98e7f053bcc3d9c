//! Image-level cross-entropy and the pixel-level focal + dice objective,
//! each with its derivative.

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiceVariant {
    /// `-sum(y p) / (sum(y^2) + sum(p^2))`, ranging over `[-0.5, 0]`.
    #[default]
    Negative,
    /// `1 - 2 sum(y p) / (sum(y^2) + sum(p^2))`.
    Standard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub gamma: f64,
    pub eps: f64,
    pub dice: DiceVariant,
    pub global_weight: f64,
    pub local_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            eps: 1e-7,
            dice: DiceVariant::Negative,
            global_weight: 1.0,
            local_weight: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if !(self.eps > 0.0 && self.eps < 0.5) {
            return Err(Error::Config(format!("eps must be in (0, 0.5), got {}", self.eps)));
        }
        if self.global_weight < 0.0 || self.local_weight < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Binary cross-entropy with `p` clamped to `[eps, 1 - eps]`.
pub fn cross_entropy(p: f64, label: f64, eps: f64) -> f64 {
    let p = p.clamp(eps, 1.0 - eps);
    -(label * p.ln() + (1.0 - label) * (1.0 - p).ln())
}

/// Derivative of [`cross_entropy`] in `p`; zero where the clamp is active.
pub fn cross_entropy_grad(p: f64, label: f64, eps: f64) -> f64 {
    if p < eps || p > 1.0 - eps {
        return 0.0;
    }
    -label / p + (1.0 - label) / (1.0 - p)
}

fn check_shapes(pred: &Array2<f64>, target: &Array2<f64>) -> Result<()> {
    if pred.dim() != target.dim() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs target {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Shape("empty map".into()));
    }
    Ok(())
}

fn focal_term(p_t: f64, gamma: f64, eps: f64) -> (f64, f64) {
    if p_t < eps || p_t > 1.0 - eps {
        let p = p_t.clamp(eps, 1.0 - eps);
        return (-(1.0 - p).powf(gamma) * p.ln(), 0.0);
    }
    let q = 1.0 - p_t;
    let value = -q.powf(gamma) * p_t.ln();
    let mut grad = -q.powf(gamma) / p_t;
    if gamma != 0.0 {
        grad += gamma * q.powf(gamma - 1.0) * p_t.ln();
    }
    (value, grad)
}

/// Mean over pixels of `-(1 - p_t)^gamma log p_t`, where `p_t` is the
/// prediction at anomalous pixels and its complement elsewhere. Returns the
/// value and its gradient in `pred`.
pub fn focal_loss_with_grad(pred: &Array2<f64>, target: &Array2<f64>, cfg: &LossConfig) -> Result<(f64, Array2<f64>)> {
    check_shapes(pred, target)?;
    let n = pred.len() as f64;
    let mut total = 0.0;
    let mut grad = Array2::zeros(pred.raw_dim());
    Zip::from(&mut grad).and(pred).and(target).for_each(|g, &p, &y| {
        // soft targets interpolate between the two cases
        let (v1, d1) = focal_term(p, cfg.gamma, cfg.eps);
        let (v0, d0) = focal_term(1.0 - p, cfg.gamma, cfg.eps);
        total += y * v1 + (1.0 - y) * v0;
        *g = (y * d1 - (1.0 - y) * d0) / n;
    });
    Ok((total / n, grad))
}

pub fn focal_loss(pred: &Array2<f64>, target: &Array2<f64>, cfg: &LossConfig) -> Result<f64> {
    Ok(focal_loss_with_grad(pred, target, cfg)?.0)
}

pub fn dice_loss_with_grad(
    pred: &Array2<f64>,
    target: &Array2<f64>,
    cfg: &LossConfig,
) -> Result<(f64, Array2<f64>)> {
    check_shapes(pred, target)?;
    let inter = (pred * target).sum();
    let denom = target.mapv(|y| y * y).sum() + pred.mapv(|p| p * p).sum() + cfg.eps;
    let ratio = inter / denom;
    let d_ratio = (target / denom) - &(pred * (2.0 * inter / (denom * denom)));
    Ok(match cfg.dice {
        DiceVariant::Negative => (-ratio, -d_ratio),
        DiceVariant::Standard => (1.0 - 2.0 * ratio, d_ratio * -2.0),
    })
}

pub fn dice_loss(pred: &Array2<f64>, target: &Array2<f64>, cfg: &LossConfig) -> Result<f64> {
    Ok(dice_loss_with_grad(pred, target, cfg)?.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalLoss {
    pub focal: f64,
    pub dice_abnormal: f64,
    pub dice_normal: f64,
    pub total: f64,
    pub grad_abnormal: Array2<f64>,
    pub grad_normal: Array2<f64>,
}

/// `focal(M^a, G) + dice(M^a, G) + dice(M^n, 1 - G)`.
pub fn local_loss(
    abnormal: &Array2<f64>,
    normal: &Array2<f64>,
    mask: &Array2<f64>,
    cfg: &LossConfig,
) -> Result<LocalLoss> {
    let (focal, g_focal) = focal_loss_with_grad(abnormal, mask, cfg)?;
    let (dice_abnormal, g_da) = dice_loss_with_grad(abnormal, mask, cfg)?;
    let inverse = mask.mapv(|g| 1.0 - g);
    let (dice_normal, g_dn) = dice_loss_with_grad(normal, &inverse, cfg)?;
    Ok(LocalLoss {
        focal,
        dice_abnormal,
        dice_normal,
        total: focal + dice_abnormal + dice_normal,
        grad_abnormal: g_focal + g_da,
        grad_normal: g_dn,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn cfg() -> LossConfig {
        LossConfig::default()
    }

    #[test]
    fn cross_entropy_examples() {
        let e = 1e-7;
        assert!(cross_entropy(1.0 - e, 1.0, e) < 1e-6);
        assert!((cross_entropy(0.5, 1.0, e) - std::f64::consts::LN_2).abs() < 1e-4);
        assert!((cross_entropy(0.5, 0.0, e) - std::f64::consts::LN_2).abs() < 1e-4);
        assert!(cross_entropy(0.0, 1.0, e).is_finite());
    }

    #[test]
    fn focal_examples() {
        let mask = array![[1.0, 0.0]];
        assert!(focal_loss(&array![[1.0, 0.0]], &mask, &cfg()).unwrap() < 1e-12);
        let v = focal_loss(&array![[0.5]], &array![[1.0]], &cfg()).unwrap();
        assert!((v - 0.25 * 2f64.ln()).abs() < 1e-4);
    }

    #[test]
    fn dice_examples() {
        let ones = Array2::ones((3, 3));
        assert!((dice_loss(&ones, &ones, &cfg()).unwrap() + 0.5).abs() < 1e-6);
        assert_eq!(dice_loss(&Array2::zeros((3, 3)), &ones, &cfg()).unwrap(), 0.0);
        let v = dice_loss(&array![[0.5, 0.5]], &array![[1.0, 0.0]], &cfg()).unwrap();
        assert!((v + 1.0 / 3.0).abs() < 1e-4);
        let std = LossConfig {
            dice: DiceVariant::Standard,
            ..cfg()
        };
        assert!(dice_loss(&ones, &ones, &std).unwrap().abs() < 1e-6);
    }

    #[test]
    fn local_loss_examples() {
        let gt = array![[1.0, 1.0], [0.0, 0.0]];
        let inv = gt.mapv(|g| 1.0 - g);
        let l = local_loss(&gt, &inv, &gt, &cfg()).unwrap();
        assert!((l.total + 1.0).abs() < 1e-6);
        let z = Array2::zeros((2, 2));
        let l = local_loss(&z, &Array2::ones((2, 2)), &z, &cfg()).unwrap();
        assert!(l.focal.abs() < 1e-12 && l.dice_abnormal == 0.0);
        assert!((l.dice_normal + 0.5).abs() < 1e-6);
    }

    #[test]
    fn shape_mismatch_rejected() {
        assert!(focal_loss(&Array2::zeros((2, 2)), &Array2::zeros((2, 3)), &cfg()).is_err());
    }
}
