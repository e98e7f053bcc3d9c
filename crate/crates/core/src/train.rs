//! Two-phase training, the AdamW optimizer and checkpoints.
//!
//! Phase one updates the context vectors (and conditioning net), the kernel
//! banks and the per-stage linear maps against the image-level plus
//! pixel-level objective. Phase two updates only the adapter.

use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::params::ParamSet;
use crate::pipeline::{Frozen, Model, ModelConfig, PreparedImage, SampleLoss};
use crate::seeding::rng_for;
use crate::tensor_io::TensorContainer;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Context vectors and conditioning net.
    pub lr_ctx: f64,
    /// Kernel banks and per-stage linear maps.
    pub lr_mmci: f64,
    pub lr_adapter: f64,
    pub epochs_main: usize,
    pub epochs_adapter: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_ctx: 1e-3,
            lr_mmci: 1e-4,
            lr_adapter: 1e-5,
            epochs_main: 15,
            epochs_adapter: 5,
            batch_size: 1,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = [self.lr_ctx, self.lr_mmci, self.lr_adapter];
        if rates.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(Error::Config("learning rates must be finite and non-negative".into()));
        }
        if self.batch_size != 1 {
            return Err(Error::Config(format!(
                "batch_size must be 1 (prompt counts vary per class), got {}",
                self.batch_size
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.weight_decay < 0.0 || self.adam_eps <= 0.0 {
            return Err(Error::Config("weight_decay must be >= 0 and adam_eps > 0".into()));
        }
        Ok(())
    }
}

/// Adam with decoupled weight decay. Parameters whose learning rate is zero
/// are left untouched, including by the decay.
#[derive(Debug, Clone)]
pub struct AdamW<P: ParamSet> {
    m: P,
    v: P,
    step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
}

impl<P: ParamSet> AdamW<P> {
    pub fn new(params: &P, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
            beta1,
            beta2,
            eps,
            weight_decay,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update; `lr_for` maps a parameter name to its learning rate.
    pub fn step(&mut self, params: &mut P, grads: &P, lr_for: &dyn Fn(&str) -> f64) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);

        let mut g_list = Vec::new();
        grads.visit("", &mut |_, a| g_list.push(a.to_owned()));
        let mut m_list = Vec::new();
        self.m.visit("", &mut |_, a| m_list.push(a.to_owned()));
        let mut v_list = Vec::new();
        self.v.visit("", &mut |_, a| v_list.push(a.to_owned()));

        let mut idx = 0;
        let wd = self.weight_decay;
        let eps = self.eps;
        params.visit_mut("", &mut |name, mut p| {
            let i = idx;
            idx += 1;
            let lr = lr_for(&name);
            if lr == 0.0 {
                return;
            }
            let g = &g_list[i];
            let m = &mut m_list[i];
            let v = &mut v_list[i];
            ndarray::Zip::from(&mut p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let m_hat = *m / c1;
                    let v_hat = *v / c2;
                    *p -= lr * wd * *p;
                    *p -= lr * m_hat / (v_hat.sqrt() + eps);
                });
        });

        let mut it = m_list.into_iter();
        self.m.visit_mut("", &mut |_, mut a| a.assign(&it.next().expect("layout")));
        let mut it = v_list.into_iter();
        self.v.visit_mut("", &mut |_, mut a| a.assign(&it.next().expect("layout")));
    }
}

/// A prepared image with its supervision.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub image: PreparedImage,
    pub label: u8,
    /// Pixel ground truth at map resolution; `None` when unavailable.
    pub mask: Option<Array2<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Initial,
    Main,
    Adapter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub phase: Phase,
    pub epoch: usize,
    pub total: f64,
    pub global: f64,
    pub local: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochStats>,
}

impl TrainLog {
    pub fn phase(&self, phase: Phase) -> impl Iterator<Item = &EpochStats> {
        self.epochs.iter().filter(move |e| e.phase == phase)
    }
}

/// Mean of the weighted objective `L_global + L_local` and its parts over
/// `samples`, without updating anything.
pub fn total_loss(
    frozen: &Frozen<'_>,
    model: &Model,
    samples: &[TrainSample],
    losses: &LossConfig,
) -> Result<EpochStats> {
    let mut acc = Accum::default();
    for s in samples {
        let (loss, _) = frozen.loss_and_grad(model, &s.image, s.label as f64, s.mask.as_ref(), losses)?;
        check_finite(&loss, 0, &s.image.id)?;
        acc.add(&loss);
    }
    Ok(acc.finish(Phase::Initial, 0))
}

#[derive(Default)]
struct Accum {
    total: f64,
    global: f64,
    local: f64,
    n: usize,
}

impl Accum {
    fn add(&mut self, l: &SampleLoss) {
        self.total += l.total;
        self.global += l.global;
        self.local += l.local;
        self.n += 1;
    }

    fn finish(&self, phase: Phase, epoch: usize) -> EpochStats {
        let n = self.n.max(1) as f64;
        EpochStats {
            phase,
            epoch,
            total: self.total / n,
            global: self.global / n,
            local: self.local / n,
        }
    }
}

fn check_finite(loss: &SampleLoss, epoch: usize, id: &str) -> Result<()> {
    if !(loss.total.is_finite() && loss.global.is_finite() && loss.local.is_finite()) {
        return Err(Error::NonFiniteLoss {
            epoch,
            sample: id.to_string(),
            detail: format!(
                "total {} (global {}, local {})",
                loss.total, loss.global, loss.local
            ),
        });
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_phase(
    frozen: &Frozen<'_>,
    model: &mut Model,
    samples: &[TrainSample],
    losses: &LossConfig,
    cfg: &TrainConfig,
    phase: Phase,
    epochs: usize,
    lr_for: &dyn Fn(&str) -> f64,
    log: &mut TrainLog,
) -> Result<()> {
    let mut opt = AdamW::new(&*model, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);
    let label = match phase {
        Phase::Adapter => "adapter",
        _ => "main",
    };
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 1..=epochs {
        let mut rng = rng_for(cfg.seed, &format!("shuffle/{label}/{epoch}"));
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut acc = Accum::default();
        for &i in &order {
            let s = &samples[i];
            let (loss, grads) = frozen.loss_and_grad(model, &s.image, s.label as f64, s.mask.as_ref(), losses)?;
            check_finite(&loss, epoch, &s.image.id)?;
            if !grads.all_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    sample: s.image.id.clone(),
                    detail: "non-finite gradient".into(),
                });
            }
            opt.step(model, &grads, lr_for);
            acc.add(&loss);
        }
        let stats = acc.finish(phase, epoch);
        log::info!(
            "{label} epoch {epoch}/{epochs}: loss {:.5} (global {:.5}, local {:.5})",
            stats.total,
            stats.global,
            stats.local
        );
        log.epochs.push(stats);
    }
    Ok(())
}

/// Phase one: context vectors, conditioning net, kernel banks and linear
/// maps. The adapter is frozen.
pub fn train_main(
    frozen: &Frozen<'_>,
    model: &mut Model,
    samples: &[TrainSample],
    losses: &LossConfig,
    cfg: &TrainConfig,
    log: &mut TrainLog,
) -> Result<()> {
    cfg.validate()?;
    let (lr_ctx, lr_loc) = (cfg.lr_ctx, cfg.lr_mmci);
    let lr_for = move |name: &str| {
        if name.starts_with("prompt.") {
            lr_ctx
        } else if name.starts_with("loc.") {
            lr_loc
        } else {
            0.0
        }
    };
    run_phase(frozen, model, samples, losses, cfg, Phase::Main, cfg.epochs_main, &lr_for, log)
}

/// Phase two: the adapter alone, against the image-level loss.
pub fn train_adapter(
    frozen: &Frozen<'_>,
    model: &mut Model,
    samples: &[TrainSample],
    losses: &LossConfig,
    cfg: &TrainConfig,
    log: &mut TrainLog,
) -> Result<()> {
    cfg.validate()?;
    let lr = cfg.lr_adapter;
    let lr_for = move |name: &str| if name.starts_with("adapter.") { lr } else { 0.0 };
    let adapter_losses = LossConfig {
        local_weight: 0.0,
        ..losses.clone()
    };
    run_phase(
        frozen,
        model,
        samples,
        &adapter_losses,
        cfg,
        Phase::Adapter,
        cfg.epochs_adapter,
        &lr_for,
        log,
    )
}

/// Both phases, with the loss before training recorded first.
pub fn train(
    frozen: &Frozen<'_>,
    model: &mut Model,
    samples: &[TrainSample],
    losses: &LossConfig,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    let mut log = TrainLog::default();
    log.epochs.push(total_loss(frozen, model, samples, losses)?);
    train_main(frozen, model, samples, losses, cfg, &mut log)?;
    train_adapter(frozen, model, samples, losses, cfg, &mut log)?;
    Ok(log)
}

const CHECKPOINT_FORMAT: &str = "zsad-checkpoint-v1";

/// SHA-256 of the model configuration's JSON form; ties a checkpoint to the
/// architecture it was trained with.
pub fn config_hash(cfg: &ModelConfig) -> String {
    let json = serde_json::to_string(cfg).expect("config serialises");
    Sha256::digest(json.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub config_hash: String,
    pub epochs_main: usize,
    pub epochs_adapter: usize,
}

impl Checkpoint {
    pub fn new(model: Model, cfg: &ModelConfig, epochs_main: usize, epochs_adapter: usize) -> Self {
        Self {
            model,
            config_hash: config_hash(cfg),
            epochs_main,
            epochs_adapter,
        }
    }

    pub fn to_container(&self) -> TensorContainer {
        let mut c = TensorContainer::new();
        c.set_meta("format", CHECKPOINT_FORMAT);
        c.set_meta("config_hash", self.config_hash.clone());
        c.set_meta("epochs_main", self.epochs_main.to_string());
        c.set_meta("epochs_adapter", self.epochs_adapter.to_string());
        self.model.write_into("", &mut c);
        c
    }

    /// Rebuild from a container; `cfg` supplies the architecture and must
    /// hash to the stored value.
    pub fn from_container(c: &TensorContainer, cfg: &ModelConfig) -> Result<Self> {
        if c.meta("format") != Some(CHECKPOINT_FORMAT) {
            return Err(Error::Checkpoint("not a checkpoint container".into()));
        }
        let stored = c.meta("config_hash").unwrap_or_default().to_string();
        let expected = config_hash(cfg);
        if stored != expected {
            return Err(Error::Checkpoint(format!(
                "checkpoint was trained with a different model configuration (hash {stored}, expected {expected})"
            )));
        }
        let count = |key: &str| -> Result<usize> {
            c.meta(key)
                .unwrap_or("0")
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad `{key}` metadata")))
        };
        // shapes come from a template; values are overwritten below
        let mut rng = rng_for(0, "checkpoint-template");
        let mut model = Model::init(&mut rng, cfg)?;
        model.read_from("", c)?;
        Ok(Self {
            model,
            config_hash: stored,
            epochs_main: count("epochs_main")?,
            epochs_adapter: count("epochs_adapter")?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: &Path, cfg: &ModelConfig) -> Result<Self> {
        Self::from_container(&TensorContainer::read(path)?, cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scoring::Adapter;

    #[test]
    fn zero_gradient_step_is_pure_decay() {
        let mut rng = rng_for(2, "adamw");
        let mut p = Adapter::init(&mut rng, 4).unwrap();
        let before = p.clone();
        let g = p.zeros_like();
        let mut opt = AdamW::new(&p, 0.9, 0.999, 1e-8, 0.01);
        opt.step(&mut p, &g, &|_| 0.1);
        let factor = 1.0 - 0.1 * 0.01;
        assert!((p.w1[[0, 0]] - before.w1[[0, 0]] * factor).abs() < 1e-15);
        assert!((p.b2[3] - before.b2[3] * factor).abs() < 1e-15);
    }

    #[test]
    fn zero_rate_leaves_parameters() {
        let mut rng = rng_for(3, "adamw");
        let mut p = Adapter::init(&mut rng, 4).unwrap();
        let before = p.clone();
        let mut g = p.clone();
        g.w1.fill(1.0);
        let mut opt = AdamW::new(&p, 0.9, 0.999, 1e-8, 0.01);
        opt.step(&mut p, &g, &|_| 0.0);
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut rng = rng_for(4, "adamw");
        let mut p = Adapter::init(&mut rng, 4).unwrap();
        let before = p.clone();
        let mut g = p.zeros_like();
        g.b1[0] = 3.0;
        let mut opt = AdamW::new(&p, 0.9, 0.999, 1e-8, 0.0);
        opt.step(&mut p, &g, &|_| 0.01);
        assert!((before.b1[0] - p.b1[0] - 0.01).abs() < 1e-9);
    }

    #[test]
    fn batch_size_must_be_one() {
        let cfg = TrainConfig {
            batch_size: 2,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
