//! Full model: prompt learner, localisation heads and adapter, with a
//! per-image forward pass and the matching backward pass.

use ndarray::{Array2, Array3, ArrayViewD, ArrayViewMutD};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, ImageEncoder, ImageFeatures, InputImage, TextEncoder};
use crate::data::{normalize_channels, resize_rgb, PreprocessConfig};
use crate::error::{Error, Result};
use crate::grounding::{detect, position_phrase, suppression_factors, DetectionBox, Detector, SuppressionConfig};
use crate::locmap::{AnomalyMap, LocForward, LocMapConfig, LocalizationHeads, MapKind};
use crate::losses::{cross_entropy, cross_entropy_grad, local_loss, LocalLoss, LossConfig};
use crate::params::{join, ParamSet};
use crate::prompts::{
    encode_prompts_backward, encode_prompts_cached, expand_templates, phrase_features,
    rank_descriptions, DescriptionRegistry, PositionVocabulary, PromptLearner, TextFeatureBank,
    DEFAULT_CONTEXT_LEN,
};
use crate::scoring::{global_score, text_term_backward, Adapter, AdapterForward, ImageScore, DEFAULT_TEMPERATURE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub locmap: LocMapConfig,
    pub suppression: SuppressionConfig,
    pub context_len: usize,
    /// Add an image-conditioned bias to the context rows.
    pub conditional_context: bool,
    pub temperature: f64,
    /// Number of ranked anomaly phrases reported per image.
    pub top_k: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            locmap: LocMapConfig::default(),
            suppression: SuppressionConfig::default(),
            context_len: DEFAULT_CONTEXT_LEN,
            conditional_context: true,
            temperature: DEFAULT_TEMPERATURE,
            top_k: 5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.locmap.validate()?;
        self.suppression.validate()?;
        if self.context_len == 0 {
            return Err(Error::Config("context_len must be positive".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        Ok(())
    }

    pub fn map_size(&self) -> (usize, usize) {
        let r = self.backbone.input_resolution;
        (r, r)
    }
}

/// All trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub prompt: PromptLearner,
    pub heads: LocalizationHeads,
    pub adapter: Adapter,
}

impl Model {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.backbone.feature_width;
        Ok(Self {
            prompt: PromptLearner::init(
                rng,
                cfg.context_len,
                cfg.backbone.token_width,
                c,
                cfg.conditional_context,
            )?,
            heads: LocalizationHeads::init(rng, cfg.backbone.stage_indices.len(), c, &cfg.locmap)?,
            adapter: Adapter::init(rng, c)?,
        })
    }
}

impl ParamSet for Model {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewD<'_, f64>)) {
        self.prompt.visit(&join(prefix, "prompt"), f);
        self.heads.visit(&join(prefix, "loc"), f);
        self.adapter.visit(&join(prefix, "adapter"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewMutD<'_, f64>)) {
        self.prompt.visit_mut(&join(prefix, "prompt"), f);
        self.heads.visit_mut(&join(prefix, "loc"), f);
        self.adapter.visit_mut(&join(prefix, "adapter"), f);
    }
}

/// Everything the forward pass needs about one image besides parameters.
#[derive(Debug, Clone)]
pub struct PreparedImage {
    pub id: String,
    pub class_name: String,
    pub features: ImageFeatures,
    pub boxes: Vec<DetectionBox>,
}

/// Frozen collaborators shared by every forward pass.
pub struct Frozen<'a> {
    pub config: &'a ModelConfig,
    pub registry: &'a DescriptionRegistry,
    pub vocab: &'a PositionVocabulary,
    pub text_encoder: &'a dyn TextEncoder,
}

pub struct ForwardPass {
    pub position: Option<String>,
    pub text: crate::prompts::TextForward,
    pub loc: LocForward,
    pub factors: Array2<f64>,
    /// Final map after box suppression.
    pub map: AnomalyMap,
    pub adapter: AdapterForward,
    pub score: ImageScore,
}

impl<'a> Frozen<'a> {
    pub fn forward(&self, model: &Model, image: &PreparedImage) -> Result<ForwardPass> {
        let cfg = self.config;
        let position = position_phrase(&image.boxes, self.vocab);
        let prompts = expand_templates(self.registry, &image.class_name, position.as_deref(), cfg.context_len)?;
        let conditioning = cfg.conditional_context.then(|| image.features.global.view());
        let text = encode_prompts_cached(&prompts, &model.prompt, self.text_encoder, conditioning)?;
        let out = cfg.map_size();
        let loc = model.heads.forward(&image.features, &text.bank, &cfg.locmap, out)?;
        let factors = suppression_factors(out, &image.boxes, cfg.suppression.lambda);
        let map = AnomalyMap::new(MapKind::Final, &loc.final_map.values * &factors);
        let adapter = model.adapter.forward_cached(image.features.global.view())?;
        let score = global_score(adapter.output.view(), &text.bank, &map, cfg.temperature)?;
        Ok(ForwardPass {
            position,
            text,
            loc,
            factors,
            map,
            adapter,
            score,
        })
    }

    /// Losses of one labelled image and the gradient of their weighted sum.
    pub fn loss_and_grad(
        &self,
        model: &Model,
        image: &PreparedImage,
        label: f64,
        mask: Option<&Array2<f64>>,
        losses: &LossConfig,
    ) -> Result<(SampleLoss, Model)> {
        let fwd = self.forward(model, image)?;
        let dim = fwd.map.values.raw_dim();
        let local = match mask {
            Some(mask) => {
                if mask.raw_dim() != dim {
                    return Err(Error::Shape(format!(
                        "mask {:?} vs map {:?}",
                        mask.dim(),
                        fwd.map.values.dim()
                    )));
                }
                local_loss(&fwd.loc.abnormal.values, &fwd.loc.normal.values, mask, losses)?
            }
            // abnormal image without pixel truth: image-level loss only
            None => LocalLoss {
                focal: 0.0,
                dice_abnormal: 0.0,
                dice_normal: 0.0,
                total: 0.0,
                grad_abnormal: Array2::zeros(dim),
                grad_normal: Array2::zeros(dim),
            },
        };
        let bank = &fwd.text.bank;
        let p = fwd.score.s_global / 2.0;
        let global = cross_entropy(p, label, losses.eps);
        let total = losses.global_weight * global + losses.local_weight * local.total;

        let g_score = losses.global_weight * cross_entropy_grad(p, label, losses.eps) / 2.0;
        let (g_a, mut g_fn, mut g_fa) =
            text_term_backward(fwd.adapter.output.view(), bank, self.config.temperature, g_score);
        let adapter_grad = model.adapter.backward(&fwd.adapter, &g_a);

        let mut grad_final = Array2::<f64>::zeros(fwd.map.values.raw_dim());
        if let Some((idx, _)) = fwd
            .map
            .values
            .indexed_iter()
            .max_by(|a, b| a.1.total_cmp(b.1).then_with(|| b.0.cmp(&a.0)))
        {
            grad_final[idx] = g_score * fwd.factors[idx];
        }
        let (heads_grad, g_fn_loc, g_fa_loc) = model.heads.backward(
            &fwd.loc,
            &image.features,
            bank,
            &(&local.grad_normal * losses.local_weight),
            &(&local.grad_abnormal * losses.local_weight),
            Some(&grad_final),
        )?;
        g_fn += &g_fn_loc;
        g_fa += &g_fa_loc;
        let prompt_grad = encode_prompts_backward(&fwd.text, &model.prompt, self.text_encoder, &g_fn, &g_fa)?;
        Ok((
            SampleLoss {
                global,
                local: local.total,
                total,
                score: fwd.score,
            },
            Model {
                prompt: prompt_grad,
                heads: heads_grad,
                adapter: adapter_grad,
            },
        ))
    }

    /// Anomaly phrases of the image's class ranked against the adapted
    /// global feature.
    pub fn describe(&self, model: &Model, image: &PreparedImage, fwd: &ForwardPass) -> Result<Vec<(String, f64)>> {
        let conditioning = self.config.conditional_context.then(|| image.features.global.view());
        let phrases = phrase_features(
            self.registry,
            &image.class_name,
            fwd.position.as_deref(),
            &model.prompt,
            self.text_encoder,
            conditioning,
        )?;
        let mut ranked = rank_descriptions(fwd.adapter.output.view(), &phrases)?;
        ranked.truncate(self.config.top_k);
        Ok(ranked)
    }

    pub fn text_bank(&self, model: &Model, image: &PreparedImage) -> Result<TextFeatureBank> {
        Ok(self.forward(model, image)?.text.bank)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleLoss {
    pub global: f64,
    pub local: f64,
    pub total: f64,
    pub score: ImageScore,
}

/// Resize, ground and encode one raw image. The detector sees the resized
/// `[0, 1]` pixels; the image encoder sees them channel-normalised.
#[allow(clippy::too_many_arguments)]
pub fn prepare_image(
    id: &str,
    class_name: &str,
    raw: &Array3<f64>,
    preprocess: &PreprocessConfig,
    image_encoder: &dyn ImageEncoder,
    detector: &mut dyn Detector,
    registry: &DescriptionRegistry,
    suppression: &SuppressionConfig,
) -> Result<PreparedImage> {
    let r = preprocess.resolution;
    let resized = resize_rgb(raw, (r, r));
    let phrases = registry.phrases(class_name)?.to_vec();
    let boxes = detect(
        &InputImage {
            id: id.to_string(),
            pixels: resized.clone(),
        },
        &phrases,
        detector,
        suppression,
    )?;
    let features = image_encoder.encode_image(&InputImage {
        id: id.to_string(),
        pixels: normalize_channels(&resized, preprocess),
    })?;
    features.validate(image_encoder.config())?;
    Ok(PreparedImage {
        id: id.to_string(),
        class_name: class_name.to_string(),
        features,
        boxes,
    })
}
