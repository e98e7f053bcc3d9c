//! End-to-end workflows built from a [`RunConfig`]: training, evaluation and
//! single-image inference.

use std::path::Path;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::backbone::{ImageEncoder, TextEncoder};
use crate::config::RunConfig;
use crate::data::{generate_synthetic, load_dataset, write_gray, Layout, Sample};
use crate::error::{Error, Result};
use crate::eval::{EvalRecord, Report};
use crate::grounding::Detector;
use crate::params::ParamSet;
use crate::pipeline::{prepare_image, Frozen, Model, PreparedImage};
use crate::prompts::{DescriptionRegistry, PositionVocabulary};
use crate::seeding::rng_for;
use crate::tensor_io::{DType, TensorContainer};
use crate::train::{total_loss, train_adapter, train_main, Checkpoint, TrainLog, TrainSample};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Frozen components instantiated from a configuration.
pub struct Session {
    pub config: RunConfig,
    pub registry: DescriptionRegistry,
    pub vocab: PositionVocabulary,
    pub image_encoder: Box<dyn ImageEncoder>,
    pub text_encoder: Box<dyn TextEncoder>,
    pub detector: Box<dyn Detector>,
}

impl Session {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            registry: config.registry()?,
            vocab: PositionVocabulary::standard(),
            image_encoder: config.image_encoder()?,
            text_encoder: config.text_encoder(),
            detector: config.detector(),
            config,
        })
    }

    pub fn frozen(&self) -> Frozen<'_> {
        Frozen {
            config: &self.config.model,
            registry: &self.registry,
            vocab: &self.vocab,
            text_encoder: self.text_encoder.as_ref(),
        }
    }

    /// Fresh parameters seeded from the training seed.
    pub fn init_model(&self) -> Result<Model> {
        let mut rng = rng_for(self.config.train.seed, "model-init");
        Model::init(&mut rng, &self.config.model)
    }

    /// Samples of a split: generated for the synthetic layout, read from
    /// `root` (or the configured root) otherwise.
    pub fn samples(&self, split: Split, root: Option<&Path>) -> Result<Vec<Sample>> {
        let data = &self.config.data;
        if data.layout == Layout::Synthetic {
            let cfg = match split {
                Split::Train => &data.synthetic_train,
                Split::Test => &data.synthetic_test,
            };
            return generate_synthetic(cfg, &self.registry);
        }
        let configured = match split {
            Split::Train => data.train_root.as_deref(),
            Split::Test => data.test_root.as_deref(),
        };
        let root = root
            .or(configured)
            .ok_or_else(|| Error::Config("no dataset root given".into()))?;
        load_dataset(root, data.layout)
    }

    pub fn prepare(&mut self, sample: &Sample) -> Result<PreparedImage> {
        let pixels = sample.load_pixels()?;
        self.prepare_pixels(&sample.id, &sample.class_name, &pixels)
    }

    pub fn prepare_pixels(&mut self, id: &str, class_name: &str, pixels: &Array3<f64>) -> Result<PreparedImage> {
        prepare_image(
            id,
            class_name,
            pixels,
            &self.config.data.preprocess,
            self.image_encoder.as_ref(),
            self.detector.as_mut(),
            &self.registry,
            &self.config.model.suppression,
        )
    }

    pub fn train_set(&mut self, samples: &[Sample]) -> Result<Vec<TrainSample>> {
        let size = self.config.model.map_size();
        samples
            .iter()
            .map(|s| {
                Ok(TrainSample {
                    image: self.prepare(s)?,
                    label: s.label,
                    mask: s.load_mask(size)?,
                })
            })
            .collect()
    }

    /// Both training phases from freshly initialised parameters.
    pub fn train(&mut self, samples: &[Sample]) -> Result<TrainOutcome> {
        let set = self.train_set(samples)?;
        let mut model = self.init_model()?;
        let cfg = &self.config;
        let frozen = self.frozen();
        let mut log = TrainLog::default();
        log.epochs.push(total_loss(&frozen, &model, &set, &cfg.losses)?);
        train_main(&frozen, &mut model, &set, &cfg.losses, &cfg.train, &mut log)?;
        let after_main = Checkpoint::new(model.clone(), &cfg.model, cfg.train.epochs_main, 0);
        train_adapter(&frozen, &mut model, &set, &cfg.losses, &cfg.train, &mut log)?;
        let checkpoint = Checkpoint::new(model, &cfg.model, cfg.train.epochs_main, cfg.train.epochs_adapter);
        Ok(TrainOutcome {
            after_main,
            checkpoint,
            log,
        })
    }

    /// Score every sample. Maps are kept in the records only for samples with
    /// pixel ground truth; `map_dir` additionally dumps every map to disk.
    pub fn evaluate(&mut self, model: &Model, samples: &[Sample], map_dir: Option<&Path>) -> Result<Vec<EvalRecord>> {
        let size = self.config.model.map_size();
        let mut records = Vec::with_capacity(samples.len());
        for s in samples {
            let prepared = self.prepare(s)?;
            let fwd = self.frozen().forward(model, &prepared)?;
            if let Some(dir) = map_dir {
                dump_map(dir, &s.id, &fwd.map.values)?;
            }
            let mask = s.load_mask(size)?;
            records.push(EvalRecord {
                image_id: s.id.clone(),
                class_name: s.class_name.clone(),
                label: s.label,
                s_global: fwd.score.s_global,
                text_term: fwd.score.text_term,
                map_term: fwd.score.map_term,
                map: mask.as_ref().map(|_| fwd.map.values.clone()),
                mask,
            });
        }
        Ok(records)
    }

    pub fn report(&self, records: &[EvalRecord]) -> Result<Report> {
        Report::build(records, self.config.data.pixel_pooling)
    }

    pub fn infer(&mut self, model: &Model, id: &str, class_name: &str, pixels: &Array3<f64>) -> Result<Inference> {
        let prepared = self.prepare_pixels(id, class_name, pixels)?;
        let frozen = self.frozen();
        let fwd = frozen.forward(model, &prepared)?;
        let top = frozen.describe(model, &prepared, &fwd)?;
        Ok(Inference {
            record: ScoreRecord {
                image_id: id.to_string(),
                s_global: fwd.score.s_global,
                text_term: fwd.score.text_term,
                map_term: fwd.score.map_term,
                top_k_descriptions: top
                    .into_iter()
                    .map(|(phrase, similarity)| Description { phrase, similarity })
                    .collect(),
            },
            map: fwd.map.values,
        })
    }
}

/// Checkpoints after each phase plus the per-epoch loss log.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub after_main: Checkpoint,
    pub checkpoint: Checkpoint,
    pub log: TrainLog,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Description {
    pub phrase: String,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub image_id: String,
    pub s_global: f64,
    pub text_term: f64,
    pub map_term: f64,
    pub top_k_descriptions: Vec<Description>,
}

#[derive(Debug, Clone)]
pub struct Inference {
    pub record: ScoreRecord,
    pub map: Array2<f64>,
}

fn flat_id(id: &str) -> String {
    id.replace(['/', '\\'], "__")
}

/// Writes `<dir>/<id>.png` (8-bit) and `<dir>/<id>.map` (lossless floats).
pub fn dump_map(dir: &Path, id: &str, values: &Array2<f64>) -> Result<()> {
    let stem = flat_id(id);
    write_gray(&dir.join(format!("{stem}.png")), values)?;
    let mut c = TensorContainer::new();
    c.set_meta("image_id", id);
    c.insert("map", DType::F64, values.clone().into_dyn());
    c.write(dir.join(format!("{stem}.map")))
}

pub fn read_map(path: &Path) -> Result<Array2<f64>> {
    TensorContainer::read(path)?
        .get("map")?
        .clone()
        .into_dimensionality()
        .map_err(|e| Error::Shape(format!("map: {e}")))
}

/// Largest absolute difference between the forward outputs of two models on
/// the given prepared images.
pub fn forward_difference(frozen: &Frozen<'_>, a: &Model, b: &Model, images: &[PreparedImage]) -> Result<f64> {
    let mut worst = 0.0f64;
    for img in images {
        let fa = frozen.forward(a, img)?;
        let fb = frozen.forward(b, img)?;
        worst = worst
            .max((fa.score.s_global - fb.score.s_global).abs())
            .max((fa.score.text_term - fb.score.text_term).abs());
        for (x, y) in fa.map.values.iter().zip(fb.map.values.iter()) {
            worst = worst.max((x - y).abs());
        }
    }
    Ok(worst)
}

/// Parameter count per top-level group, for logging.
pub fn parameter_summary(model: &Model) -> String {
    format!(
        "prompt {} / localisation {} / adapter {}",
        model.prompt.num_params(),
        model.heads.num_params(),
        model.adapter.num_params()
    )
}
