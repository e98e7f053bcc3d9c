//! Run configuration binding every component, read from TOML.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{ImageEncoder, PrecomputedImageEncoder, StubImageEncoder, StubTextEncoder, TextEncoder};
use crate::data::{Layout, PreprocessConfig, SyntheticConfig};
use crate::error::{Error, Result};
use crate::eval::PixelPooling;
use crate::grounding::{BoxFileDetector, Detector, StubDetector};
use crate::losses::LossConfig;
use crate::pipeline::ModelConfig;
use crate::prompts::DescriptionRegistry;
use crate::train::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageBackend {
    #[default]
    Stub,
    /// Feature containers written by an external encoder.
    Precomputed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorBackend {
    #[default]
    Stub,
    /// Box files written by an external detector.
    BoxFiles,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub image: ImageBackend,
    pub feature_dir: Option<PathBuf>,
    pub detector: DetectorBackend,
    pub box_dir: Option<PathBuf>,
    /// Seed of the frozen stand-in encoders; independent of training.
    pub stub_seed: u64,
    pub stub_detector: StubDetector,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            image: ImageBackend::Stub,
            feature_dir: None,
            detector: DetectorBackend::Stub,
            box_dir: None,
            stub_seed: 0,
            stub_detector: StubDetector::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub layout: Layout,
    /// Training set root for file layouts.
    pub train_root: Option<PathBuf>,
    /// Evaluation set root for file layouts.
    pub test_root: Option<PathBuf>,
    /// Extra description registry merged over the built-in one.
    pub descriptions: Option<PathBuf>,
    pub preprocess: PreprocessConfig,
    pub synthetic_train: SyntheticConfig,
    pub synthetic_test: SyntheticConfig,
    pub pixel_pooling: PixelPooling,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            layout: Layout::Mvtec,
            train_root: None,
            test_root: None,
            descriptions: None,
            preprocess: PreprocessConfig::default(),
            synthetic_train: SyntheticConfig::default(),
            synthetic_test: SyntheticConfig {
                seed: 1,
                images: 16,
                ..SyntheticConfig::default()
            },
            pixel_pooling: PixelPooling::Pooled,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub losses: LossConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub backend: BackendConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.losses.validate()?;
        self.train.validate()?;
        self.data.preprocess.validate()?;
        if self.data.preprocess.resolution != self.model.backbone.input_resolution {
            return Err(Error::Config(format!(
                "preprocess resolution {} != backbone input resolution {}",
                self.data.preprocess.resolution, self.model.backbone.input_resolution
            )));
        }
        if self.model.backbone.token_width == 0 {
            return Err(Error::Config("token width must be positive".into()));
        }
        if self.backend.image == ImageBackend::Precomputed && self.backend.feature_dir.is_none() {
            return Err(Error::Config("precomputed image backend needs `feature_dir`".into()));
        }
        if self.backend.detector == DetectorBackend::BoxFiles && self.backend.box_dir.is_none() {
            return Err(Error::Config("box-file detector needs `box_dir`".into()));
        }
        Ok(())
    }

    /// Small configuration for the procedural dataset: 64-pixel images,
    /// 8-pixel patches, 32-wide features, four stages. The localisation and
    /// adapter learning rates are raised to suit the eight-image training set.
    pub fn synthetic() -> Self {
        let mut cfg = RunConfig::default();
        cfg.model.backbone.input_resolution = 64;
        cfg.model.backbone.patch_size = 8;
        cfg.model.backbone.stage_indices = vec![3, 6, 9, 12];
        cfg.model.backbone.vv_start_layer = 4;
        cfg.model.backbone.feature_width = 32;
        cfg.model.backbone.token_width = 32;
        cfg.data.preprocess.resolution = 64;
        cfg.data.layout = Layout::Synthetic;
        cfg.train.lr_mmci = 1e-3;
        cfg.train.lr_adapter = 3e-3;
        cfg
    }

    pub fn registry(&self) -> Result<DescriptionRegistry> {
        let mut registry = DescriptionRegistry::builtin();
        if let Some(path) = &self.data.descriptions {
            registry.merge(DescriptionRegistry::load(path)?);
        }
        Ok(registry)
    }

    pub fn image_encoder(&self) -> Result<Box<dyn ImageEncoder>> {
        let backbone = self.model.backbone.clone();
        Ok(match self.backend.image {
            ImageBackend::Stub => Box::new(StubImageEncoder::new(backbone, self.backend.stub_seed)?),
            ImageBackend::Precomputed => Box::new(PrecomputedImageEncoder::new(
                backbone,
                self.backend.feature_dir.clone().expect("validated"),
            )?),
        })
    }

    pub fn text_encoder(&self) -> Box<dyn TextEncoder> {
        Box::new(StubTextEncoder::new(
            self.model.backbone.token_width,
            self.model.backbone.feature_width,
            self.backend.stub_seed,
        ))
    }

    pub fn detector(&self) -> Box<dyn Detector> {
        match self.backend.detector {
            DetectorBackend::Stub => Box::new(self.backend.stub_detector.clone()),
            DetectorBackend::BoxFiles => Box::new(BoxFileDetector::new(
                self.backend.box_dir.clone().expect("validated"),
            )),
        }
    }
}
