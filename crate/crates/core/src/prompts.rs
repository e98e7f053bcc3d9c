//! Fine-grained prompt construction and text feature encoding.
//!
//! Normal prompts read `<ctx> <state> <class>.` and abnormal prompts read
//! `<ctx> <state> <class> with <anomaly phrase> at <position>.`, where the
//! context is a run of learnable vectors and the position clause is present
//! only when a detector box supplied one. Prompt embeddings are averaged per
//! group and normalised into a [`TextFeatureBank`].

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use ndarray::{Array1, Array2, ArrayView1, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;

use crate::backbone::TextEncoder;
use crate::error::{Error, Result};
use crate::params::{join, ParamSet};
use crate::seeding::{normal_matrix, uniform_matrix, uniform_vec};

pub const DEFAULT_CONTEXT_LEN: usize = 12;
pub const CONTEXT_INIT_STD: f64 = 0.02;

const MVTEC_TOML: &str = include_str!("../data/mvtec.toml");
const VISA_TOML: &str = include_str!("../data/visa.toml");
const SYNTHETIC_TOML: &str = include_str!("../data/synthetic.toml");

/// Nine position phrases on a 3x3 grid of the unit square, row-major from
/// the top-left cell.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionVocabulary {
    phrases: [String; 9],
}

impl Default for PositionVocabulary {
    fn default() -> Self {
        Self::standard()
    }
}

impl PositionVocabulary {
    pub fn standard() -> Self {
        let names = [
            "top left",
            "top",
            "top right",
            "left",
            "center",
            "right",
            "bottom left",
            "bottom",
            "bottom right",
        ];
        Self {
            phrases: names.map(String::from),
        }
    }

    pub fn phrases(&self) -> &[String] {
        &self.phrases
    }

    fn third(v: f64) -> usize {
        ((v.clamp(0.0, 1.0) * 3.0).floor() as usize).min(2)
    }

    /// Phrase for a normalised point; cells split the square at 1/3 and 2/3.
    pub fn phrase_at(&self, x: f64, y: f64) -> &str {
        &self.phrases[Self::third(y) * 3 + Self::third(x)]
    }

    pub fn contains(&self, phrase: &str) -> bool {
        self.phrases.iter().any(|p| p == phrase)
    }
}

/// Class name to fine-grained anomaly phrases, plus generic state words.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptionRegistry {
    classes: IndexMap<String, Vec<String>>,
    normal_states: Vec<String>,
    abnormal_states: Vec<String>,
}

impl DescriptionRegistry {
    pub fn new(
        classes: IndexMap<String, Vec<String>>,
        normal_states: Vec<String>,
        abnormal_states: Vec<String>,
    ) -> Result<Self> {
        let reg = Self {
            classes,
            normal_states,
            abnormal_states,
        };
        reg.validate()?;
        Ok(reg)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut doc: IndexMap<String, Vec<String>> =
            toml::from_str(text).map_err(|e| Error::Parse(format!("description registry: {e}")))?;
        let normal = doc
            .shift_remove("normal_states")
            .ok_or_else(|| Error::Parse("description registry lacks `normal_states`".into()))?;
        let abnormal = doc
            .shift_remove("abnormal_states")
            .ok_or_else(|| Error::Parse("description registry lacks `abnormal_states`".into()))?;
        Self::new(doc, normal, abnormal)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn mvtec() -> Self {
        Self::from_toml_str(MVTEC_TOML).expect("shipped MVTec registry is valid")
    }

    pub fn visa() -> Self {
        Self::from_toml_str(VISA_TOML).expect("shipped VisA registry is valid")
    }

    pub fn synthetic() -> Self {
        Self::from_toml_str(SYNTHETIC_TOML).expect("shipped synthetic registry is valid")
    }

    /// All shipped registries merged (MVTec, VisA, synthetic).
    pub fn builtin() -> Self {
        let mut reg = Self::mvtec();
        reg.merge(Self::visa());
        reg.merge(Self::synthetic());
        reg
    }

    /// Add the classes of `other`; existing classes keep their phrases.
    pub fn merge(&mut self, other: Self) {
        for (class, phrases) in other.classes {
            self.classes.entry(class).or_insert(phrases);
        }
    }

    fn validate(&self) -> Result<()> {
        if self.normal_states.is_empty() || self.abnormal_states.is_empty() {
            return Err(Error::Parse("state lists must be non-empty".into()));
        }
        let blank = |s: &String| s.trim().is_empty();
        if self.normal_states.iter().any(blank) || self.abnormal_states.iter().any(blank) {
            return Err(Error::Parse("state words must be non-empty".into()));
        }
        if let Some(s) = self
            .normal_states
            .iter()
            .find(|s| self.abnormal_states.contains(s))
        {
            return Err(Error::Parse(format!("state `{s}` is both normal and abnormal")));
        }
        for (class, phrases) in &self.classes {
            if class.trim().is_empty() {
                return Err(Error::Parse("empty class name".into()));
            }
            if phrases.is_empty() {
                return Err(Error::Parse(format!("class `{class}` has no anomaly phrases")));
            }
            if phrases.iter().any(blank) {
                return Err(Error::Parse(format!("class `{class}` has an empty phrase")));
            }
        }
        Ok(())
    }

    pub fn phrases(&self, class: &str) -> Result<&[String]> {
        self.classes
            .get(class)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownClass(class.to_string()))
    }

    pub fn classes(&self) -> impl Iterator<Item = &str> {
        self.classes.keys().map(String::as_str)
    }

    pub fn contains_class(&self, class: &str) -> bool {
        self.classes.contains_key(class)
    }

    pub fn normal_states(&self) -> &[String] {
        &self.normal_states
    }

    pub fn abnormal_states(&self) -> &[String] {
        &self.abnormal_states
    }
}

/// Class names appear in prompt text with underscores as spaces.
pub fn display_class(class: &str) -> String {
    class.replace('_', " ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptKind {
    Normal,
    Abnormal,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub kind: PromptKind,
    pub context_len: usize,
    pub state: String,
    pub class_name: String,
    pub anomaly: Option<String>,
    pub position: Option<String>,
}

impl Prompt {
    /// Text after the context slots, as handed to the text encoder.
    pub fn body(&self) -> String {
        let mut out = format!("{} {}", self.state, display_class(&self.class_name));
        if let Some(a) = &self.anomaly {
            out.push_str(" with ");
            out.push_str(a);
        }
        if let Some(p) = &self.position {
            out.push_str(" at ");
            out.push_str(p);
        }
        out.push('.');
        out
    }

    /// Full prompt with a context marker, e.g.
    /// `<ctx×12> damaged bottle with cracked large at bottom left.`
    pub fn text(&self) -> String {
        format!("<ctx×{}> {}", self.context_len, self.body())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet {
    pub class_name: String,
    pub normal: Vec<Prompt>,
    pub abnormal: Vec<Prompt>,
}

impl PromptSet {
    pub fn context_len(&self) -> usize {
        self.normal
            .first()
            .or(self.abnormal.first())
            .map_or(0, |p| p.context_len)
    }
}

/// One normal prompt per normal state; one abnormal prompt per
/// (abnormal state, anomaly phrase), each carrying `position` if given.
pub fn expand_templates(
    registry: &DescriptionRegistry,
    class_name: &str,
    position: Option<&str>,
    context_len: usize,
) -> Result<PromptSet> {
    let phrases = registry.phrases(class_name)?;
    let normal = registry
        .normal_states()
        .iter()
        .map(|state| Prompt {
            kind: PromptKind::Normal,
            context_len,
            state: state.clone(),
            class_name: class_name.to_string(),
            anomaly: None,
            position: None,
        })
        .collect();
    let mut abnormal = Vec::with_capacity(registry.abnormal_states().len() * phrases.len());
    for state in registry.abnormal_states() {
        for phrase in phrases {
            abnormal.push(Prompt {
                kind: PromptKind::Abnormal,
                context_len,
                state: state.clone(),
                class_name: class_name.to_string(),
                anomaly: Some(phrase.clone()),
                position: position.map(str::to_string),
            });
        }
    }
    Ok(PromptSet {
        class_name: class_name.to_string(),
        normal,
        abnormal,
    })
}

/// Recover the slots of a prompt produced by [`Prompt::text`].
pub fn parse_prompt(
    text: &str,
    registry: &DescriptionRegistry,
    vocab: &PositionVocabulary,
) -> Result<Prompt> {
    let bad = |why: &str| Error::Parse(format!("prompt `{text}`: {why}"));
    let rest = text.strip_prefix("<ctx×").ok_or_else(|| bad("missing context marker"))?;
    let (count, rest) = rest.split_once("> ").ok_or_else(|| bad("unterminated context marker"))?;
    let context_len: usize = count.parse().map_err(|_| bad("bad context length"))?;
    let rest = rest.strip_suffix('.').ok_or_else(|| bad("missing final period"))?;

    let states = registry
        .normal_states()
        .iter()
        .map(|s| (s, PromptKind::Normal))
        .chain(registry.abnormal_states().iter().map(|s| (s, PromptKind::Abnormal)));
    let mut candidates: Vec<(&String, PromptKind, &str)> = states
        .filter_map(|(s, kind)| {
            rest.strip_prefix(s.as_str())
                .and_then(|r| r.strip_prefix(' '))
                .map(|r| (s, kind, r))
        })
        .collect();
    candidates.sort_by_key(|(s, _, _)| std::cmp::Reverse(s.len()));

    for (state, kind, after_state) in candidates {
        for class in registry.classes() {
            let shown = display_class(class);
            let Some(after_class) = after_state.strip_prefix(shown.as_str()) else {
                continue;
            };
            let base = Prompt {
                kind,
                context_len,
                state: state.clone(),
                class_name: class.to_string(),
                anomaly: None,
                position: None,
            };
            match kind {
                PromptKind::Normal if after_class.is_empty() => return Ok(base),
                PromptKind::Normal => continue,
                PromptKind::Abnormal => {
                    let Some(tail) = after_class.strip_prefix(" with ") else {
                        continue;
                    };
                    let phrases = registry.phrases(class)?;
                    for pos in vocab.phrases() {
                        if let Some(phrase) = tail.strip_suffix(&format!(" at {pos}")) {
                            if phrases.iter().any(|p| p == phrase) {
                                return Ok(Prompt {
                                    anomaly: Some(phrase.to_string()),
                                    position: Some(pos.clone()),
                                    ..base
                                });
                            }
                        }
                    }
                    if phrases.iter().any(|p| p == tail) {
                        return Ok(Prompt {
                            anomaly: Some(tail.to_string()),
                            ..base
                        });
                    }
                }
            }
        }
    }
    Err(bad("no matching state/class/phrase combination"))
}

/// Learnable context rows for the two prompt groups, `(n, token_width)` each.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextVectors {
    pub normal: Array2<f64>,
    pub abnormal: Array2<f64>,
}

impl ContextVectors {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, n: usize, token_width: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("context length must be at least 1".into()));
        }
        Ok(Self {
            normal: normal_matrix(rng, n, token_width, CONTEXT_INIT_STD),
            abnormal: normal_matrix(rng, n, token_width, CONTEXT_INIT_STD),
        })
    }

    pub fn len(&self) -> usize {
        self.normal.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.normal.nrows() == 0
    }

    pub fn width(&self) -> usize {
        self.normal.ncols()
    }
}

/// Two-layer bottleneck producing a per-image bias added to every context
/// row: `feature_width -> feature_width/16 -> token_width`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaNet {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl MetaNet {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, feature_width: usize, token_width: usize) -> Self {
        let hidden = (feature_width / 16).max(1);
        let b_in = 1.0 / (feature_width as f64).sqrt();
        let b_hid = 1.0 / (hidden as f64).sqrt();
        Self {
            w1: uniform_matrix(rng, hidden, feature_width, b_in),
            b1: uniform_vec(rng, hidden, b_in),
            w2: uniform_matrix(rng, token_width, hidden, b_hid),
            b2: uniform_vec(rng, token_width, b_hid),
        }
    }

    fn hidden_pre(&self, feature: ArrayView1<'_, f64>) -> Array1<f64> {
        self.w1.dot(&feature) + &self.b1
    }

    pub fn forward(&self, feature: ArrayView1<'_, f64>) -> Array1<f64> {
        let h = self.hidden_pre(feature).mapv(|v| v.max(0.0));
        self.w2.dot(&h) + &self.b2
    }

    /// Parameter gradient for upstream gradient `grad_bias`.
    fn backward(&self, feature: ArrayView1<'_, f64>, grad_bias: &Array1<f64>) -> MetaNet {
        let pre = self.hidden_pre(feature);
        let h = pre.mapv(|v| v.max(0.0));
        let grad_h = self.w2.t().dot(grad_bias);
        let grad_pre = Array1::from_iter(
            grad_h
                .iter()
                .zip(pre.iter())
                .map(|(g, p)| if *p > 0.0 { *g } else { 0.0 }),
        );
        MetaNet {
            w1: outer(&grad_pre, &feature),
            b1: grad_pre,
            w2: outer(grad_bias, &h.view()),
            b2: grad_bias.clone(),
        }
    }
}

pub(crate) fn outer(a: &Array1<f64>, b: &ArrayView1<'_, f64>) -> Array2<f64> {
    let col = a.view().insert_axis(Axis(1));
    let row = b.view().insert_axis(Axis(0));
    col.dot(&row)
}

/// Trainable prompt state: context rows and an optional conditioning net.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptLearner {
    pub ctx: ContextVectors,
    pub meta_net: Option<MetaNet>,
}

impl PromptLearner {
    pub fn init<R: Rng + ?Sized>(
        rng: &mut R,
        n_ctx: usize,
        token_width: usize,
        feature_width: usize,
        conditional: bool,
    ) -> Result<Self> {
        let ctx = ContextVectors::init(rng, n_ctx, token_width)?;
        let meta_net = conditional.then(|| MetaNet::init(rng, feature_width, token_width));
        Ok(Self { ctx, meta_net })
    }

    fn image_bias(&self, image_feature: Option<ArrayView1<'_, f64>>) -> Option<Array1<f64>> {
        match (&self.meta_net, image_feature) {
            (Some(net), Some(f)) => Some(net.forward(f)),
            _ => None,
        }
    }
}

impl ParamSet for PromptLearner {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewD<'_, f64>)) {
        f(join(prefix, "normal_ctx"), self.ctx.normal.view().into_dyn());
        f(join(prefix, "abnormal_ctx"), self.ctx.abnormal.view().into_dyn());
        if let Some(m) = &self.meta_net {
            f(join(prefix, "meta.w1"), m.w1.view().into_dyn());
            f(join(prefix, "meta.b1"), m.b1.view().into_dyn());
            f(join(prefix, "meta.w2"), m.w2.view().into_dyn());
            f(join(prefix, "meta.b2"), m.b2.view().into_dyn());
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewMutD<'_, f64>)) {
        f(join(prefix, "normal_ctx"), self.ctx.normal.view_mut().into_dyn());
        f(join(prefix, "abnormal_ctx"), self.ctx.abnormal.view_mut().into_dyn());
        if let Some(m) = &mut self.meta_net {
            f(join(prefix, "meta.w1"), m.w1.view_mut().into_dyn());
            f(join(prefix, "meta.b1"), m.b1.view_mut().into_dyn());
            f(join(prefix, "meta.w2"), m.w2.view_mut().into_dyn());
            f(join(prefix, "meta.b2"), m.b2.view_mut().into_dyn());
        }
    }
}

/// Group-averaged, unit-norm text features `[F_n, F_a]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TextFeatureBank {
    pub normal: Array1<f64>,
    pub abnormal: Array1<f64>,
}

impl TextFeatureBank {
    pub fn width(&self) -> usize {
        self.normal.len()
    }
}

/// Intermediate values kept for the backward pass of [`encode_prompts`].
#[derive(Debug, Clone)]
pub struct TextForward {
    pub bank: TextFeatureBank,
    normal_bodies: Vec<String>,
    abnormal_bodies: Vec<String>,
    normal_ctx: Array2<f64>,
    abnormal_ctx: Array2<f64>,
    normal_mean: Array1<f64>,
    abnormal_mean: Array1<f64>,
    image_feature: Option<Array1<f64>>,
}

fn normalize(v: &Array1<f64>) -> Array1<f64> {
    let n = v.dot(v).sqrt();
    if n > 0.0 {
        v / n
    } else {
        v.clone()
    }
}

/// Backward through `y = v / |v|`.
pub(crate) fn normalize_backward(v: &Array1<f64>, grad_y: &Array1<f64>) -> Array1<f64> {
    let n = v.dot(v).sqrt();
    if n == 0.0 {
        return Array1::zeros(v.len());
    }
    let y = v / n;
    (grad_y - &(&y * y.dot(grad_y))) / n
}

fn check_inputs(prompts: &PromptSet, learner: &PromptLearner, encoder: &dyn TextEncoder) -> Result<()> {
    if learner.ctx.width() != encoder.token_width() {
        return Err(Error::Config(format!(
            "context width {} != encoder token width {}",
            learner.ctx.width(),
            encoder.token_width()
        )));
    }
    let n = learner.ctx.len();
    if prompts
        .normal
        .iter()
        .chain(&prompts.abnormal)
        .any(|p| p.context_len != n)
    {
        return Err(Error::Config(format!(
            "prompt context slots do not match {n} context vectors"
        )));
    }
    if prompts.normal.is_empty() || prompts.abnormal.is_empty() {
        return Err(Error::InvalidInput("both prompt groups must be non-empty".into()));
    }
    Ok(())
}

fn group_mean(
    bodies: &[String],
    ctx: &Array2<f64>,
    encoder: &dyn TextEncoder,
) -> Result<Array1<f64>> {
    let mut sum = Array1::<f64>::zeros(encoder.output_width());
    for body in bodies {
        let e = encoder.encode(body, ctx.view())?;
        if e.len() != sum.len() {
            return Err(Error::Config(format!(
                "encoder produced width {}, declared {}",
                e.len(),
                sum.len()
            )));
        }
        sum += &e;
    }
    Ok(sum / bodies.len() as f64)
}

/// Encode both prompt groups with the learner's context rows (plus the
/// meta-net bias when an image feature is given) and reduce each group to a
/// unit vector.
pub fn encode_prompts(
    prompts: &PromptSet,
    learner: &PromptLearner,
    encoder: &dyn TextEncoder,
    image_feature: Option<ArrayView1<'_, f64>>,
) -> Result<TextFeatureBank> {
    Ok(encode_prompts_cached(prompts, learner, encoder, image_feature)?.bank)
}

pub fn encode_prompts_cached(
    prompts: &PromptSet,
    learner: &PromptLearner,
    encoder: &dyn TextEncoder,
    image_feature: Option<ArrayView1<'_, f64>>,
) -> Result<TextForward> {
    check_inputs(prompts, learner, encoder)?;
    let bias = learner.image_bias(image_feature);
    let mut normal_ctx = learner.ctx.normal.clone();
    let mut abnormal_ctx = learner.ctx.abnormal.clone();
    if let Some(b) = &bias {
        normal_ctx += b;
        abnormal_ctx += b;
    }
    let normal_bodies: Vec<String> = prompts.normal.iter().map(Prompt::body).collect();
    let abnormal_bodies: Vec<String> = prompts.abnormal.iter().map(Prompt::body).collect();
    let normal_mean = group_mean(&normal_bodies, &normal_ctx, encoder)?;
    let abnormal_mean = group_mean(&abnormal_bodies, &abnormal_ctx, encoder)?;
    Ok(TextForward {
        bank: TextFeatureBank {
            normal: normalize(&normal_mean),
            abnormal: normalize(&abnormal_mean),
        },
        normal_bodies,
        abnormal_bodies,
        normal_ctx,
        abnormal_ctx,
        normal_mean,
        abnormal_mean,
        image_feature: bias.and(image_feature.map(|f| f.to_owned())),
    })
}

/// Gradient of the learner's parameters given gradients on `F_n` and `F_a`.
pub fn encode_prompts_backward(
    fwd: &TextForward,
    learner: &PromptLearner,
    encoder: &dyn TextEncoder,
    grad_normal: &Array1<f64>,
    grad_abnormal: &Array1<f64>,
) -> Result<PromptLearner> {
    let group = |bodies: &[String], ctx: &Array2<f64>, mean: &Array1<f64>, grad: &Array1<f64>| {
        let grad_mean = normalize_backward(mean, grad) / bodies.len() as f64;
        let mut g = Array2::<f64>::zeros(ctx.raw_dim());
        for body in bodies {
            g += &encoder.encode_backward(body, ctx.view(), grad_mean.view())?;
        }
        Ok::<_, Error>(g)
    };
    let g_normal = group(&fwd.normal_bodies, &fwd.normal_ctx, &fwd.normal_mean, grad_normal)?;
    let g_abnormal = group(
        &fwd.abnormal_bodies,
        &fwd.abnormal_ctx,
        &fwd.abnormal_mean,
        grad_abnormal,
    )?;
    let meta_net = match (&learner.meta_net, &fwd.image_feature) {
        (Some(net), Some(feature)) => {
            let grad_bias = g_normal.sum_axis(Axis(0)) + g_abnormal.sum_axis(Axis(0));
            Some(net.backward(feature.view(), &grad_bias))
        }
        (Some(net), None) => Some(MetaNet {
            w1: Array2::zeros(net.w1.raw_dim()),
            b1: Array1::zeros(net.b1.raw_dim()),
            w2: Array2::zeros(net.w2.raw_dim()),
            b2: Array1::zeros(net.b2.raw_dim()),
        }),
        (None, _) => None,
    };
    Ok(PromptLearner {
        ctx: ContextVectors {
            normal: g_normal,
            abnormal: g_abnormal,
        },
        meta_net,
    })
}

/// Unit feature per anomaly phrase: abnormal prompts for that phrase over all
/// abnormal states, encoded with the abnormal context and averaged.
pub fn phrase_features(
    registry: &DescriptionRegistry,
    class_name: &str,
    position: Option<&str>,
    learner: &PromptLearner,
    encoder: &dyn TextEncoder,
    image_feature: Option<ArrayView1<'_, f64>>,
) -> Result<Vec<(String, Array1<f64>)>> {
    let set = expand_templates(registry, class_name, position, learner.ctx.len())?;
    check_inputs(&set, learner, encoder)?;
    let mut ctx = learner.ctx.abnormal.clone();
    if let Some(b) = learner.image_bias(image_feature) {
        ctx += &b;
    }
    let mut out = Vec::new();
    for phrase in registry.phrases(class_name)? {
        let bodies: Vec<String> = set
            .abnormal
            .iter()
            .filter(|p| p.anomaly.as_deref() == Some(phrase.as_str()))
            .map(Prompt::body)
            .collect();
        out.push((phrase.clone(), normalize(&group_mean(&bodies, &ctx, encoder)?)));
    }
    Ok(out)
}

/// Phrases sorted by descending cosine similarity to `image_feature`; equal
/// similarities keep their input order.
pub fn rank_descriptions(
    image_feature: ArrayView1<'_, f64>,
    phrases: &[(String, Array1<f64>)],
) -> Result<Vec<(String, f64)>> {
    if phrases.is_empty() {
        return Err(Error::InvalidInput("no phrases to rank".into()));
    }
    let norm = image_feature.dot(&image_feature).sqrt();
    let mut ranked = Vec::with_capacity(phrases.len());
    for (phrase, v) in phrases {
        if v.len() != image_feature.len() {
            return Err(Error::Shape(format!(
                "phrase `{phrase}` width {} != image width {}",
                v.len(),
                image_feature.len()
            )));
        }
        let vn = v.dot(v).sqrt();
        let sim = if norm > 0.0 && vn > 0.0 {
            image_feature.dot(v) / (norm * vn)
        } else {
            0.0
        };
        ranked.push((phrase.clone(), sim));
    }
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
    Ok(ranked)
}
