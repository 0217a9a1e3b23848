//! Cohesion predictors.
//!
//! The face-level head pools per-face emotion distributions into average,
//! maximum and minimum rows and maps them through two dense blocks, a max
//! over the statistics axis and a scaled sigmoid. The image-level model is
//! a backbone followed by a dense trunk with a cohesion unit, a group
//! emotion softmax, or both.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::capsnet::{argmax, CapsNet, EmotionDistribution};
use crate::data::{
    bilinear_matrix, preprocess_face, resize_bilinear, FaceBox, GroupEmotion, GroupSample, MAX_GCS,
    NUM_EMOTIONS, NUM_GROUP_EMOTIONS,
};
use crate::error::{Error, Result};
use crate::graph::{Graph, Mode, Var};
use crate::nn::{one_hot, Activation, BatchNorm, Conv, Dense, ParamStore, Session};
use crate::real::Real;
use crate::rng::seeded;
use crate::tensor::Tensor;
use crate::training::{Labeled, Learner, LossTerms, Prediction, Predictor, Target};

/// Number of pooled statistics (average, maximum, minimum).
pub const NUM_STATS: usize = 3;

/// A model whose scalar output can be differentiated w.r.t. its input.
pub trait InputScorer<T: Real> {
    /// Parameters to bind (frozen) before scoring.
    fn params(&self) -> Option<&ParamStore<T>> {
        None
    }

    /// Scalar score of one unbatched input.
    fn score(&self, s: &mut Session<T>, input: Var) -> Result<Var>;
}

// ---- statistic pooling ---------------------------------------------------

/// Rows are the average, maximum and minimum of per-face probabilities.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PooledEmotionFeature {
    pub rows: [[f64; NUM_EMOTIONS]; NUM_STATS],
}

impl PooledEmotionFeature {
    pub fn average(&self) -> &[f64; NUM_EMOTIONS] {
        &self.rows[0]
    }

    pub fn maximum(&self) -> &[f64; NUM_EMOTIONS] {
        &self.rows[1]
    }

    pub fn minimum(&self) -> &[f64; NUM_EMOTIONS] {
        &self.rows[2]
    }

    /// Row-major `3 x 7` values.
    pub fn flat(&self) -> impl Iterator<Item = f64> + '_ {
        self.rows.iter().flatten().copied()
    }
}

/// Columnwise average, maximum and minimum over faces.
///
/// Each column is sorted before summing, so the result is bitwise
/// independent of face order, and the average is clamped into
/// `[min, max]` against rounding.
pub fn pool_face_emotions(faces: &[EmotionDistribution]) -> Result<PooledEmotionFeature> {
    if faces.is_empty() {
        return Err(Error::NoFaces);
    }
    let [mut avg_row, mut max_row, mut min_row] = [[0.0; NUM_EMOTIONS]; NUM_STATS];
    let mut column = Vec::with_capacity(faces.len());
    for e in 0..NUM_EMOTIONS {
        column.clear();
        for f in faces {
            let p = f.0[e];
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Contract(format!("emotion probability {p} outside [0,1]")));
            }
            column.push(p);
        }
        column.sort_by(f64::total_cmp);
        let (lo, hi) = (column[0], column[column.len() - 1]);
        let avg = column.iter().sum::<f64>() / column.len() as f64;
        avg_row[e] = avg.clamp(lo, hi);
        max_row[e] = hi;
        min_row[e] = lo;
    }
    Ok(PooledEmotionFeature {
        rows: [avg_row, max_row, min_row],
    })
}

/// Group cohesion on the label scale `[0, 3]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CohesionScore(f64);

impl CohesionScore {
    pub fn new(value: f64) -> Result<Self> {
        if !(0.0..=MAX_GCS).contains(&value) {
            return Err(Error::Contract(format!("cohesion {value} outside [0,3]")));
        }
        Ok(CohesionScore(value))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Probabilities over (positive, neutral, negative).
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GroupEmotionDistribution(pub [f64; NUM_GROUP_EMOTIONS]);

impl GroupEmotionDistribution {
    pub fn new(p: [f64; NUM_GROUP_EMOTIONS]) -> Result<Self> {
        let total: f64 = p.iter().sum();
        if p.iter().any(|&v| v.is_nan() || v < 0.0) || (total - 1.0).abs() > 1e-6 {
            return Err(Error::Contract(format!("{p:?} is not a distribution")));
        }
        Ok(GroupEmotionDistribution(p))
    }

    pub fn argmax(&self) -> GroupEmotion {
        GroupEmotion::ALL[argmax(&self.0)]
    }
}

/// `3 * sigmoid(x)` flattened from `[b, 1]` to `[b]`.
pub fn cohesion_unit<T: Real>(g: &mut Graph<T>, logits: Var) -> Result<Var> {
    let b = g.shape(logits)[0];
    let p = g.sigmoid(logits)?;
    let p = g.scale(p, T::lit(MAX_GCS))?;
    g.reshape(p, &[b])
}

/// Mean squared error between `[b]` predictions and labels.
pub fn squared_error<T: Real>(g: &mut Graph<T>, pred: Var, truth: &[f64]) -> Result<Var> {
    let t = g.constant(&Tensor::from_f64(&[truth.len()], truth)?);
    let d = g.sub(pred, t)?;
    let d = g.square(d)?;
    g.mean_all(d)
}

/// Mean negative log-likelihood of `classes` under `[b, k]` probabilities.
pub fn cross_entropy<T: Real>(g: &mut Graph<T>, probs: Var, classes: &[usize]) -> Result<Var> {
    let shape = g.shape(probs).to_vec();
    if shape.len() != 2 || shape[0] != classes.len() {
        return Err(Error::dim("cross_entropy", &shape, &[classes.len(), NUM_GROUP_EMOTIONS]));
    }
    let pick = g.constant(&one_hot::<T>(classes, shape[1])?);
    let picked = g.mul(probs, pick)?;
    let picked = g.sum(picked, 1)?;
    let logp = g.ln(picked)?;
    let total = g.sum_all(logp)?;
    g.scale(total, T::lit(-1.0 / classes.len() as f64))
}

pub struct JointLoss {
    pub total: Var,
    pub cross_entropy: Var,
    pub squared_error: Var,
}

/// `cross_entropy + alpha * squared_error`.
pub fn joint_loss<T: Real>(
    g: &mut Graph<T>,
    probs: Var,
    classes: &[usize],
    pred_gcs: Var,
    true_gcs: &[f64],
    alpha: f64,
) -> Result<JointLoss> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::config("joint loss weight must be nonnegative"));
    }
    let ce = cross_entropy(g, probs, classes)?;
    let se = squared_error(g, pred_gcs, true_gcs)?;
    let weighted = g.scale(se, T::lit(alpha))?;
    let total = g.add(ce, weighted)?;
    Ok(JointLoss {
        total,
        cross_entropy: ce,
        squared_error: se,
    })
}

// ---- face-level head -----------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FaceHeadConfig {
    pub widths: [usize; 2],
    pub activation: Activation,
}

impl Default for FaceHeadConfig {
    fn default() -> Self {
        FaceHeadConfig {
            widths: [16, 32],
            activation: Activation::Swish,
        }
    }
}

impl FaceHeadConfig {
    pub fn fingerprint(&self) -> String {
        format!(
            "face-head/v1 dense={},{} act={}",
            self.widths[0],
            self.widths[1],
            self.activation.name()
        )
    }
}

/// A pooled feature with its group labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledSample {
    pub feature: PooledEmotionFeature,
    pub gcs: f64,
    pub emotion: Option<GroupEmotion>,
}

impl Labeled for PooledSample {
    fn target(&self) -> Target {
        Target {
            gcs: self.gcs,
            emotion: self.emotion.map(GroupEmotion::index),
        }
    }
}

impl Labeled for GroupSample {
    fn target(&self) -> Target {
        Target {
            gcs: self.gcs,
            emotion: Some(self.emotion.index()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FaceHead<T> {
    pub config: FaceHeadConfig,
    pub store: ParamStore<T>,
    dense1: Dense,
    bn1: BatchNorm,
    dense2: Dense,
    bn2: BatchNorm,
    output: Dense,
}

impl<T: Real> FaceHead<T> {
    pub fn new(config: FaceHeadConfig, seed: u64) -> Result<Self> {
        let [w1, w2] = config.widths;
        if w1 == 0 || w2 == 0 {
            return Err(Error::config("face head widths must be positive"));
        }
        let mut rng = seeded(seed);
        let mut store = ParamStore::new();
        let dense1 = Dense::without_bias(&mut store, "face.dense1", NUM_EMOTIONS, w1, &mut rng);
        let bn1 = BatchNorm::new(&mut store, "face.bn1", w1);
        let dense2 = Dense::without_bias(&mut store, "face.dense2", w1, w2, &mut rng);
        let bn2 = BatchNorm::new(&mut store, "face.bn2", w2);
        let output = Dense::new(&mut store, "face.cohesion", w2, 1, &mut rng);
        Ok(FaceHead {
            config,
            store,
            dense1,
            bn1,
            dense2,
            bn2,
            output,
        })
    }

    pub fn fingerprint(&self) -> String {
        self.config.fingerprint()
    }

    /// `[b, 3, 7]` pooled features to `[b]` cohesion.
    pub fn forward(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        Ok(self.forward_traced(s, x)?.0)
    }

    /// Like [`forward`](Self::forward), also returning the shape after each stage.
    pub fn forward_traced(&self, s: &mut Session<T>, x: Var) -> Result<(Var, Vec<Vec<usize>>)> {
        let shape = s.graph.shape(x).to_vec();
        if shape.len() != 3 || shape[1..] != [NUM_STATS, NUM_EMOTIONS] {
            return Err(Error::dim("face head", &shape, &[NUM_STATS, NUM_EMOTIONS]));
        }
        let b = shape[0];
        let act = self.config.activation;
        let mut trace = vec![shape];
        let h = self.dense1.forward(s, x)?;
        let h = self.bn1.forward(s, h)?;
        let h = act.apply(&mut s.graph, h)?;
        trace.push(s.graph.shape(h).to_vec());
        let h = self.dense2.forward(s, h)?;
        let h = self.bn2.forward(s, h)?;
        let h = act.apply(&mut s.graph, h)?;
        trace.push(s.graph.shape(h).to_vec());
        let h = s.graph.max(h, 1)?;
        let h = s.graph.reshape(h, &[b, 1, self.config.widths[1]])?;
        trace.push(s.graph.shape(h).to_vec());
        let h = s.graph.reshape(h, &[b, self.config.widths[1]])?;
        trace.push(s.graph.shape(h).to_vec());
        let logit = self.output.forward(s, h)?;
        trace.push(s.graph.shape(logit).to_vec());
        Ok((cohesion_unit(&mut s.graph, logit)?, trace))
    }

    fn features_tensor<'a>(&self, features: impl Iterator<Item = &'a PooledEmotionFeature>) -> Result<Tensor<T>> {
        let data: Vec<f64> = features.flat_map(|f| f.flat()).collect();
        let b = data.len() / (NUM_STATS * NUM_EMOTIONS);
        Tensor::from_f64(&[b, NUM_STATS, NUM_EMOTIONS], &data)
    }

    /// Eval-mode cohesion for each feature.
    pub fn predict_batch(&self, features: &[PooledEmotionFeature]) -> Result<Vec<CohesionScore>> {
        if features.is_empty() {
            return Ok(Vec::new());
        }
        let mut s = Session::frozen(&self.store, Mode::Eval);
        let x = s.graph.constant(&self.features_tensor(features.iter())?);
        let y = self.forward(&mut s, x)?;
        s.graph.value(y).iter().map(|v| CohesionScore::new(v.as_f64())).collect()
    }

    pub fn predict(&self, feature: &PooledEmotionFeature) -> Result<CohesionScore> {
        Ok(self.predict_batch(core::slice::from_ref(feature))?[0])
    }
}

impl<T: Real> Learner<T> for FaceHead<T> {
    type Sample = PooledSample;

    fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    fn min_batch(&self) -> usize {
        2
    }

    fn loss(&self, s: &mut Session<T>, batch: &[&PooledSample]) -> Result<LossTerms> {
        let x = s.graph.constant(&self.features_tensor(batch.iter().map(|p| &p.feature))?);
        let y = self.forward(s, x)?;
        let truth: Vec<f64> = batch.iter().map(|p| p.gcs).collect();
        let mse = squared_error(&mut s.graph, y, &truth)?;
        Ok(LossTerms {
            total: mse,
            parts: vec![("mse", mse)],
        })
    }
}

impl<T: Real> Predictor<PooledSample> for FaceHead<T> {
    fn predict(&self, sample: &PooledSample) -> Result<Prediction> {
        Ok(Prediction {
            gcs: Some(FaceHead::predict(self, &sample.feature)?.value()),
            emotion: None,
        })
    }

    fn predict_many(&self, samples: &[PooledSample]) -> Vec<Result<Prediction>> {
        let features: Vec<PooledEmotionFeature> = samples.iter().map(|p| p.feature).collect();
        match self.predict_batch(&features) {
            Ok(scores) => scores
                .into_iter()
                .map(|c| Ok(Prediction { gcs: Some(c.value()), emotion: None }))
                .collect(),
            Err(e) => samples.iter().map(|_| Err(e.clone())).collect(),
        }
    }
}

/// Saliency of cohesion w.r.t. one `[3, 7]` pooled feature, in eval mode.
impl<T: Real> InputScorer<T> for FaceHead<T> {
    fn params(&self) -> Option<&ParamStore<T>> {
        Some(&self.store)
    }

    fn score(&self, s: &mut Session<T>, input: Var) -> Result<Var> {
        let x = s.graph.reshape(input, &[1, NUM_STATS, NUM_EMOTIONS])?;
        let y = self.forward(s, x)?;
        s.graph.sum_all(y)
    }
}

/// Capsule network feeding the pooled face head.
#[derive(Debug, Clone)]
pub struct FaceLevelModel<T> {
    pub capsnet: CapsNet<T>,
    pub head: FaceHead<T>,
}

impl<T: Real> FaceLevelModel<T> {
    pub fn fingerprint(&self) -> String {
        format!("{} + {}", self.capsnet.fingerprint(), self.head.fingerprint())
    }

    /// Per-face distributions of `sample`, pooled.
    pub fn pool(&self, sample: &GroupSample) -> Result<PooledEmotionFeature> {
        pooled_feature(&self.capsnet, sample)
    }

    /// Saliency adapter taking the whole `[3, H, W]` image of `sample`.
    pub fn image_scorer<'a>(&'a self, faces: &'a [FaceBox]) -> FaceLevelScorer<'a, T> {
        FaceLevelScorer { model: self, faces }
    }
}

/// Crops, classifies and pools the faces of one sample.
pub fn pooled_feature<T: Real>(capsnet: &CapsNet<T>, sample: &GroupSample) -> Result<PooledEmotionFeature> {
    if sample.faces.is_empty() {
        return Err(Error::NoFaces);
    }
    let size = capsnet.config.input_size;
    let crops = (0..sample.faces.len())
        .map(|i| preprocess_face(sample, i, size))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&[f64]> = crops.iter().map(Vec::as_slice).collect();
    let dists: Vec<EmotionDistribution> = capsnet
        .predict_batch(&refs)?
        .into_iter()
        .map(|p| p.distribution)
        .collect();
    pool_face_emotions(&dists)
}

/// Pooled features for every sample; faceless samples yield `None`.
pub fn pooled_samples<T: Real>(capsnet: &CapsNet<T>, samples: &[GroupSample]) -> Result<Vec<Option<PooledSample>>> {
    samples
        .iter()
        .map(|s| match pooled_feature(capsnet, s) {
            Ok(feature) => Ok(Some(PooledSample {
                feature,
                gcs: s.gcs,
                emotion: Some(s.emotion),
            })),
            Err(Error::NoFaces) => Ok(None),
            Err(e) => Err(e),
        })
        .collect()
}

impl<T: Real> Predictor<GroupSample> for FaceLevelModel<T> {
    fn predict(&self, sample: &GroupSample) -> Result<Prediction> {
        let feature = self.pool(sample)?;
        Ok(Prediction {
            gcs: Some(self.head.predict(&feature)?.value()),
            emotion: None,
        })
    }
}

/// Face-level cohesion as a differentiable function of the full image.
///
/// Grayscale conversion, cropping and resizing are linear, so they are
/// expressed as matrix products and the gradient reaches every pixel.
pub struct FaceLevelScorer<'a, T> {
    model: &'a FaceLevelModel<T>,
    faces: &'a [FaceBox],
}

/// `[out, full]` rows that resample `start..start + len` of an axis of length `full`.
fn crop_resize_matrix(out: usize, start: usize, len: usize, full: usize) -> Vec<f64> {
    let inner = bilinear_matrix(out, len);
    let mut m = vec![0.0; out * full];
    for o in 0..out {
        m[o * full + start..o * full + start + len].copy_from_slice(&inner[o * len..(o + 1) * len]);
    }
    m
}

fn transpose(m: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; m.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = m[r * cols + c];
        }
    }
    t
}

impl<T: Real> InputScorer<T> for FaceLevelScorer<'_, T> {
    fn params(&self) -> Option<&ParamStore<T>> {
        None
    }

    fn score(&self, s: &mut Session<T>, input: Var) -> Result<Var> {
        if self.faces.is_empty() {
            return Err(Error::NoFaces);
        }
        let shape = s.graph.shape(input).to_vec();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(Error::dim("face-level saliency", &shape, &[3, 0, 0]));
        }
        let (h, w) = (shape[1], shape[2]);
        let caps = &self.model.capsnet;
        let size = caps.config.input_size;
        // Parameters of both models enter as constants appended to this graph.
        let caps_session_vars: Vec<Var> = caps.store.iter().map(|p| s.graph.constant(&p.tensor)).collect();
        let head_vars: Vec<Var> = self.model.head.store.iter().map(|p| s.graph.constant(&p.tensor)).collect();

        let lum = s.graph.constant(&Tensor::from_f64(&[1, 3], &[0.299, 0.587, 0.114])?);
        let flat = s.graph.reshape(input, &[3, h * w])?;
        let gray = s.graph.matmul(lum, flat)?;
        let gray = s.graph.reshape(gray, &[h, w])?;
        let mut crops = Vec::with_capacity(self.faces.len());
        for b in self.faces {
            if b.w == 0 || b.h == 0 || !b.within(w, h) {
                return Err(Error::Contract(format!("face box {b:?} invalid for {w}x{h} image")));
            }
            let ry = s.graph.constant(&Tensor::from_f64(&[size, h], &crop_resize_matrix(size, b.y, b.h, h))?);
            let rx = transpose(&crop_resize_matrix(size, b.x, b.w, w), size, w);
            let rx = s.graph.constant(&Tensor::from_f64(&[w, size], &rx)?);
            let c = s.graph.matmul(ry, gray)?;
            let c = s.graph.matmul(c, rx)?;
            crops.push(s.graph.reshape(c, &[1, 1, size, size])?);
        }
        let n = crops.len();
        let faces = s.graph.concat(&crops, 0)?;

        let mut caps_s = Session::adopt(core::mem::take(&mut s.graph), caps_session_vars, Mode::Eval);
        let enc = caps.encode(&mut caps_s, faces)?;
        let g = &mut caps_s.graph;
        let total = g.sum(enc.lengths, 1)?;
        let total = g.reshape(total, &[n, 1])?;
        let dist = g.div(enc.lengths, total)?;
        let avg = g.mean(dist, 0)?;
        let max = g.max(dist, 0)?;
        let min = g.min(dist, 0)?;
        let pooled = g.concat(&[avg, max, min], 0)?;
        let pooled = g.reshape(pooled, &[1, NUM_STATS, NUM_EMOTIONS])?;

        let mut head_s = Session::adopt(core::mem::take(&mut caps_s.graph), head_vars, Mode::Eval);
        let y = self.model.head.forward(&mut head_s, pooled)?;
        let y = head_s.graph.sum_all(y)?;
        s.graph = head_s.graph;
        Ok(y)
    }
}

// ---- image-level model ---------------------------------------------------

/// Feature extractor in front of the dense trunk.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "lowercase"))]
pub enum Backbone {
    /// Three 3x3 convolution blocks (strides 1, 2, 2) and global average
    /// pooling over a `[3, height, width]` input.
    Conv {
        height: usize,
        width: usize,
        channels: [usize; 3],
    },
    /// Precomputed feature vectors of the given width.
    Features { width: usize },
}

impl Backbone {
    pub fn desk() -> Self {
        Backbone::Conv {
            height: 32,
            width: 48,
            channels: [16, 32, 128],
        }
    }

    pub fn output_width(&self) -> usize {
        match self {
            Backbone::Conv { channels, .. } => channels[2],
            Backbone::Features { width } => *width,
        }
    }

    /// Unbatched input shape.
    pub fn input_shape(&self) -> Vec<usize> {
        match *self {
            Backbone::Conv { height, width, .. } => vec![3, height, width],
            Backbone::Features { width } => vec![width],
        }
    }

    fn describe(&self) -> String {
        match self {
            Backbone::Conv { height, width, channels } => format!(
                "conv({height}x{width};{},{},{})",
                channels[0], channels[1], channels[2]
            ),
            Backbone::Features { width } => format!("features({width})"),
        }
    }
}

const CONV_STRIDES: [usize; 3] = [1, 2, 2];
const CONV_KERNEL: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum HeadKind {
    Cohesion,
    Emotion,
    MultiTask,
}

impl HeadKind {
    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Cohesion => "cohesion",
            HeadKind::Emotion => "emotion",
            HeadKind::MultiTask => "multitask",
        }
    }

    pub fn has_cohesion(self) -> bool {
        self != HeadKind::Emotion
    }

    pub fn has_emotion(self) -> bool {
        self != HeadKind::Cohesion
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ImageModelConfig {
    pub backbone: Backbone,
    pub trunk: Vec<usize>,
    pub activation: Activation,
    pub kind: HeadKind,
    /// Weight of the cohesion error in the joint loss.
    pub alpha: f64,
}

impl ImageModelConfig {
    /// Small convolutional backbone and a 256-wide trunk.
    pub fn desk(kind: HeadKind) -> Self {
        ImageModelConfig {
            backbone: Backbone::desk(),
            trunk: vec![256; 3],
            activation: Activation::Swish,
            kind,
            alpha: 1.0,
        }
    }

    /// 2048-wide imported features and a 4096-wide trunk.
    pub fn reference(kind: HeadKind) -> Self {
        ImageModelConfig {
            backbone: Backbone::Features { width: 2048 },
            trunk: vec![4096; 3],
            ..Self::desk(kind)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.trunk.is_empty() || self.trunk.contains(&0) {
            return Err(Error::config("trunk widths must be positive"));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::config("alpha must be nonnegative"));
        }
        match self.backbone {
            Backbone::Conv { height, width, channels } => {
                if channels.contains(&0) {
                    return Err(Error::config("backbone channels must be positive"));
                }
                let mut hw = (height, width);
                for stride in CONV_STRIDES {
                    if hw.0 < CONV_KERNEL || hw.1 < CONV_KERNEL {
                        return Err(Error::Config(format!("backbone input {height}x{width} too small")));
                    }
                    hw = ((hw.0 - CONV_KERNEL) / stride + 1, (hw.1 - CONV_KERNEL) / stride + 1);
                }
                Ok(())
            }
            Backbone::Features { width: 0 } => Err(Error::config("feature width must be positive")),
            Backbone::Features { .. } => Ok(()),
        }
    }

    /// `(inputs, outputs)` of every dense layer, trunk first, then the
    /// emotion and cohesion outputs present for this kind.
    pub fn dense_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = Vec::new();
        let mut width = self.backbone.output_width();
        for &t in &self.trunk {
            shapes.push((width, t));
            width = t;
        }
        if self.kind.has_emotion() {
            shapes.push((width, NUM_GROUP_EMOTIONS));
        }
        if self.kind.has_cohesion() {
            shapes.push((width, 1));
        }
        shapes
    }

    pub fn fingerprint(&self) -> String {
        let trunk: Vec<String> = self.trunk.iter().map(|t| format!("{t}")).collect();
        format!(
            "image-head/v1 kind={} backbone={} trunk={} act={}",
            self.kind.name(),
            self.backbone.describe(),
            trunk.join(","),
            self.activation.name()
        )
    }
}

/// Network input with its group labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    /// Flattened [`Backbone::input_shape`] values.
    pub input: Vec<f64>,
    pub gcs: f64,
    pub emotion: GroupEmotion,
}

impl Labeled for ImageSample {
    fn target(&self) -> Target {
        Target {
            gcs: self.gcs,
            emotion: Some(self.emotion.index()),
        }
    }
}

pub struct ImageOutputs {
    /// `[b, 3]` group emotion probabilities.
    pub emotion: Option<Var>,
    /// `[b]` cohesion on `[0, 3]`.
    pub cohesion: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct ImageModel<T> {
    pub config: ImageModelConfig,
    pub store: ParamStore<T>,
    convs: Vec<Conv>,
    trunk: Vec<Dense>,
    emotion: Option<Dense>,
    cohesion: Option<Dense>,
}

impl<T: Real> ImageModel<T> {
    /// Initializes backbone, trunk, emotion output, cohesion output in that
    /// order, so kinds sharing a seed share every common parameter.
    pub fn new(config: ImageModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(seed);
        let mut store = ParamStore::new();
        let mut convs = Vec::new();
        if let Backbone::Conv { channels, .. } = config.backbone {
            let mut c_in = 3;
            for (i, (&c, &stride)) in channels.iter().zip(&CONV_STRIDES).enumerate() {
                let name = format!("backbone.conv{}", i + 1);
                convs.push(Conv::new(&mut store, &name, c_in, c, CONV_KERNEL, stride, &mut rng));
                c_in = c;
            }
        }
        let mut trunk = Vec::new();
        let mut width = config.backbone.output_width();
        for (i, &t) in config.trunk.iter().enumerate() {
            trunk.push(Dense::new(&mut store, &format!("trunk.dense{}", i + 1), width, t, &mut rng));
            width = t;
        }
        let emotion = config
            .kind
            .has_emotion()
            .then(|| Dense::new(&mut store, "head.emotion", width, NUM_GROUP_EMOTIONS, &mut rng));
        let cohesion = config
            .kind
            .has_cohesion()
            .then(|| Dense::new(&mut store, "head.cohesion", width, 1, &mut rng));
        Ok(ImageModel {
            config,
            store,
            convs,
            trunk,
            emotion,
            cohesion,
        })
    }

    pub fn fingerprint(&self) -> String {
        self.config.fingerprint()
    }

    /// Backbone output `[b, width]` for a batched input.
    pub fn features(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let shape = s.graph.shape(x).to_vec();
        let expected = self.config.backbone.input_shape();
        if shape.len() != expected.len() + 1 || shape[1..] != expected[..] {
            let mut want = vec![shape.first().copied().unwrap_or(1)];
            want.extend(&expected);
            return Err(Error::dim("image model input", &shape, &want));
        }
        if self.convs.is_empty() {
            return Ok(x);
        }
        let b = shape[0];
        let mut h = x;
        for conv in &self.convs {
            h = conv.forward(s, h)?;
            h = self.config.activation.apply(&mut s.graph, h)?;
        }
        let hs = s.graph.shape(h).to_vec();
        let h = s.graph.reshape(h, &[b, hs[1], hs[2] * hs[3]])?;
        s.graph.mean(h, 2)
    }

    pub fn forward(&self, s: &mut Session<T>, x: Var) -> Result<ImageOutputs> {
        let mut h = self.features(s, x)?;
        for dense in &self.trunk {
            h = dense.forward(s, h)?;
            h = self.config.activation.apply(&mut s.graph, h)?;
        }
        let emotion = match &self.emotion {
            Some(d) => {
                let z = d.forward(s, h)?;
                Some(s.graph.softmax(z, 1)?)
            }
            None => None,
        };
        let cohesion = match &self.cohesion {
            Some(d) => {
                let z = d.forward(s, h)?;
                Some(cohesion_unit(&mut s.graph, z)?)
            }
            None => None,
        };
        Ok(ImageOutputs { emotion, cohesion })
    }

    /// Resizes a group image to the backbone input.
    pub fn prepare(&self, sample: &GroupSample) -> Result<ImageSample> {
        let Backbone::Conv { height, width, .. } = self.config.backbone else {
            return Err(Error::config("a feature backbone needs precomputed features"));
        };
        Ok(ImageSample {
            input: resize_planar(&sample.image.to_planar(), sample.image.height, sample.image.width, height, width),
            gcs: sample.gcs,
            emotion: sample.emotion,
        })
    }

    fn batch_tensor(&self, batch: &[&ImageSample]) -> Result<Tensor<T>> {
        let per = self.config.backbone.input_shape();
        let n: usize = per.iter().product();
        let mut data = Vec::with_capacity(batch.len() * n);
        for s in batch {
            if s.input.len() != n {
                return Err(Error::dim("image model input", &[s.input.len()], &per));
            }
            data.extend(s.input.iter().map(|&v| T::lit(v)));
        }
        let mut shape = vec![batch.len()];
        shape.extend(per);
        Tensor::new(&shape, data)
    }

    pub fn predict_batch(&self, batch: &[&ImageSample]) -> Result<Vec<Prediction>> {
        let mut s = Session::frozen(&self.store, Mode::Eval);
        let x = s.graph.constant(&self.batch_tensor(batch)?);
        let out = self.forward(&mut s, x)?;
        let gcs: Option<Vec<f64>> = out.cohesion.map(|c| s.graph.value(c).iter().map(|v| v.as_f64()).collect());
        let probs: Option<Vec<f64>> = out.emotion.map(|e| s.graph.value(e).iter().map(|v| v.as_f64()).collect());
        Ok((0..batch.len())
            .map(|i| Prediction {
                gcs: gcs.as_ref().map(|g| g[i]),
                emotion: probs.as_ref().map(|p| {
                    let mut row = [0.0; NUM_GROUP_EMOTIONS];
                    row.copy_from_slice(&p[i * NUM_GROUP_EMOTIONS..(i + 1) * NUM_GROUP_EMOTIONS]);
                    row
                }),
            })
            .collect())
    }
}

/// Bilinear resize of `[3, h, w]` planes.
pub fn resize_planar(planar: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    planar
        .chunks(h * w)
        .flat_map(|plane| resize_bilinear(plane, h, w, oh, ow))
        .collect()
}

impl<T: Real> Learner<T> for ImageModel<T> {
    type Sample = ImageSample;

    fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    fn loss(&self, s: &mut Session<T>, batch: &[&ImageSample]) -> Result<LossTerms> {
        let x = s.graph.constant(&self.batch_tensor(batch)?);
        let out = self.forward(s, x)?;
        let gcs: Vec<f64> = batch.iter().map(|b| b.gcs).collect();
        let classes: Vec<usize> = batch.iter().map(|b| b.emotion.index()).collect();
        match (out.emotion, out.cohesion) {
            (Some(p), Some(c)) => {
                let j = joint_loss(&mut s.graph, p, &classes, c, &gcs, self.config.alpha)?;
                Ok(LossTerms {
                    total: j.total,
                    parts: vec![("ce", j.cross_entropy), ("mse", j.squared_error)],
                })
            }
            (Some(p), None) => {
                let ce = cross_entropy(&mut s.graph, p, &classes)?;
                Ok(LossTerms {
                    total: ce,
                    parts: vec![("ce", ce)],
                })
            }
            (None, Some(c)) => {
                let mse = squared_error(&mut s.graph, c, &gcs)?;
                Ok(LossTerms {
                    total: mse,
                    parts: vec![("mse", mse)],
                })
            }
            (None, None) => Err(Error::config("model has no output")),
        }
    }
}

impl<T: Real> Predictor<ImageSample> for ImageModel<T> {
    fn predict(&self, sample: &ImageSample) -> Result<Prediction> {
        Ok(self.predict_batch(&[sample])?[0])
    }

    fn predict_many(&self, samples: &[ImageSample]) -> Vec<Result<Prediction>> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(64) {
            let refs: Vec<&ImageSample> = chunk.iter().collect();
            match self.predict_batch(&refs) {
                Ok(p) => out.extend(p.into_iter().map(Ok)),
                Err(e) => out.extend(chunk.iter().map(|_| Err(e.clone()))),
            }
        }
        out
    }
}

/// Cohesion (or, for emotion-only models, the winning emotion probability)
/// of one unbatched input. Convolutional models accept a `[3, H, W]` image
/// of any size and resize it in the graph.
impl<T: Real> InputScorer<T> for ImageModel<T> {
    fn params(&self) -> Option<&ParamStore<T>> {
        Some(&self.store)
    }

    fn score(&self, s: &mut Session<T>, input: Var) -> Result<Var> {
        let shape = s.graph.shape(input).to_vec();
        let x = match self.config.backbone {
            Backbone::Conv { height, width, .. } if shape.len() == 3 && shape[0] == 3 => {
                let (h, w) = (shape[1], shape[2]);
                let mut x = input;
                if (h, w) != (height, width) {
                    let ry = bilinear_matrix(height, h).repeat(3);
                    let rx = transpose(&bilinear_matrix(width, w), width, w).repeat(3);
                    let ry = s.graph.constant(&Tensor::from_f64(&[3, height, h], &ry)?);
                    let rx = s.graph.constant(&Tensor::from_f64(&[3, w, width], &rx)?);
                    x = s.graph.matmul(ry, x)?;
                    x = s.graph.matmul(x, rx)?;
                }
                s.graph.reshape(x, &[1, 3, height, width])?
            }
            _ => {
                let mut one = vec![1];
                one.extend(&shape);
                s.graph.reshape(input, &one)?
            }
        };
        let out = self.forward(s, x)?;
        if let Some(c) = out.cohesion {
            return s.graph.sum_all(c);
        }
        let p = out.emotion.ok_or_else(|| Error::config("model has no output"))?;
        let probs: Vec<f64> = s.graph.value(p).iter().map(|v| v.as_f64()).collect();
        let pick = s.graph.constant(&one_hot::<T>(&[argmax(&probs)], NUM_GROUP_EMOTIONS)?);
        let chosen = s.graph.mul(p, pick)?;
        s.graph.sum_all(chosen)
    }
}

// ---- background ablation -------------------------------------------------

/// Zeroes background pixels; the sample is kept for analysis only when
/// the person mask covers strictly less than half of the image.
pub fn apply_mask_crop(sample: &GroupSample) -> Result<(GroupSample, bool)> {
    let mask = sample.mask.as_ref().ok_or(Error::MissingMask)?;
    let img = &sample.image;
    if mask.width != img.width || mask.height != img.height || mask.data.len() != img.width * img.height {
        return Err(Error::dim("mask", &[mask.height, mask.width], &[img.height, img.width]));
    }
    let included = mask.coverage() < 0.5;
    let mut cropped = sample.clone();
    for (p, &keep) in mask.data.iter().enumerate() {
        if !keep {
            cropped.image.pixels[p * 3..p * 3 + 3].fill(0);
        }
    }
    Ok((cropped, included))
}

// ---- saliency ------------------------------------------------------------

/// `|d score / d input|`, max-reduced over the channel axis of a rank-3
/// input. Other ranks keep their shape.
pub fn saliency_raw<T: Real, M: InputScorer<T> + ?Sized>(model: &M, input: &Tensor<T>) -> Result<Tensor<T>> {
    let empty = ParamStore::new();
    let mut s = Session::frozen(model.params().unwrap_or(&empty), Mode::Eval);
    let x = s.graph.leaf(&input.clone().with_requires_grad(true));
    let y = model.score(&mut s, x)?;
    if s.graph.shape(y).iter().product::<usize>() != 1 {
        return Err(Error::Contract("saliency score must be a scalar".into()));
    }
    s.graph.backward(y)?;
    let grad: Vec<T> = match s.graph.grad(x) {
        Some(g) => g.iter().map(|v| v.abs()).collect(),
        None => vec![T::zero(); input.len()],
    };
    let shape = input.shape();
    if shape.len() != 3 {
        return Tensor::new(shape, grad);
    }
    let plane = shape[1] * shape[2];
    let mut map = vec![T::zero(); plane];
    for c in 0..shape[0] {
        for (m, &g) in map.iter_mut().zip(&grad[c * plane..(c + 1) * plane]) {
            *m = m.max(g);
        }
    }
    Tensor::new(&shape[1..], map)
}

/// Min-max scaling into `[0, 1]`; a constant map becomes all zeros.
pub fn normalize_map<T: Real>(map: &Tensor<T>) -> Tensor<T> {
    let lo = map.data().iter().copied().fold(T::infinity(), T::min);
    let hi = map.data().iter().copied().fold(T::neg_infinity(), T::max);
    let range = hi - lo;
    let data = if range.is_nan() || range <= T::zero() {
        vec![T::zero(); map.len()]
    } else {
        map.data().iter().map(|&v| ((v - lo) / range).min(T::one())).collect()
    };
    Tensor::new(map.shape(), data).expect("same shape")
}

pub fn saliency_map<T: Real, M: InputScorer<T> + ?Sized>(model: &M, input: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(normalize_map(&saliency_raw(model, input)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::capsnet::CapsNetConfig;
    use crate::data::{Mask, RgbImage, Split};
    use approx::assert_abs_diff_eq;

    fn dist(p: &[f64]) -> EmotionDistribution {
        let mut d = [0.0; NUM_EMOTIONS];
        d[..p.len()].copy_from_slice(p);
        EmotionDistribution(d)
    }

    #[test]
    fn pooling_example() {
        let f = pool_face_emotions(&[dist(&[0.7, 0.3]), dist(&[0.1, 0.9])]).unwrap();
        assert_abs_diff_eq!(f.average()[0], 0.4, epsilon = 1e-15);
        assert_abs_diff_eq!(f.average()[1], 0.6, epsilon = 1e-15);
        assert_eq!(&f.maximum()[..2], &[0.7, 0.9]);
        assert_eq!(&f.minimum()[..2], &[0.1, 0.3]);
        assert_eq!(f.average()[2], 0.0);
    }

    #[test]
    fn single_face_pools_to_itself() {
        let d = dist(&[0.2, 0.1, 0.3, 0.1, 0.1, 0.1, 0.1]);
        let f = pool_face_emotions(&[d]).unwrap();
        for row in f.rows {
            assert_eq!(row, d.0);
        }
        assert!(matches!(pool_face_emotions(&[]), Err(Error::NoFaces)));
    }

    #[test]
    fn joint_loss_examples() {
        let mut g = Graph::<f64>::new();
        let probs = g.constant(&Tensor::full(&[1, 3], 1.0 / 3.0));
        let pred = g.constant(&Tensor::from_f64(&[1], &[2.0]).unwrap());
        let j = joint_loss(&mut g, probs, &[1], pred, &[1.0], 1.0).unwrap();
        assert_abs_diff_eq!(g.scalar(j.total), 3.0f64.ln() + 1.0, epsilon = 1e-12);
        let j0 = joint_loss(&mut g, probs, &[1], pred, &[1.0], 0.0).unwrap();
        assert_eq!(g.scalar(j0.total), g.scalar(j0.cross_entropy));
        let exact = g.constant(&Tensor::from_f64(&[1, 3], &[0.0, 0.0, 1.0]).unwrap());
        assert!(joint_loss(&mut g, exact, &[2], pred, &[2.0], 1.0).map(|j| g.scalar(j.total)).unwrap() == 0.0);
        assert!(matches!(
            joint_loss(&mut g, probs, &[3], pred, &[1.0], 1.0),
            Err(Error::Index { .. })
        ));
        assert!(joint_loss(&mut g, probs, &[0], pred, &[1.0], -1.0).is_err());
    }

    #[test]
    fn face_head_shapes_follow_the_table() {
        let head = FaceHead::<f64>::new(FaceHeadConfig::default(), 3).unwrap();
        let mut s = Session::new(&head.store, Mode::Train);
        let x = s.graph.constant(&Tensor::full(&[4, 3, 7], 0.2));
        let (_, trace) = head.forward_traced(&mut s, x).unwrap();
        let expected: [&[usize]; 6] = [&[4, 3, 7], &[4, 3, 16], &[4, 3, 32], &[4, 1, 32], &[4, 32], &[4, 1]];
        assert_eq!(trace.len(), expected.len());
        for (t, e) in trace.iter().zip(expected) {
            assert_eq!(t.as_slice(), e);
        }
        let bad = s.graph.constant(&Tensor::full(&[4, 3, 6], 0.2));
        assert!(matches!(head.forward(&mut s, bad), Err(Error::Dimension { .. })));
    }

    #[test]
    fn face_head_output_in_range() {
        let head = FaceHead::<f64>::new(FaceHeadConfig::default(), 5).unwrap();
        let f = pool_face_emotions(&[dist(&[1.0]), dist(&[0.0, 1.0])]).unwrap();
        let c = head.predict(&f).unwrap().value();
        assert!((0.0..=3.0).contains(&c));
    }

    #[test]
    fn reference_shapes() {
        let cfg = ImageModelConfig::reference(HeadKind::Cohesion);
        assert_eq!(cfg.dense_shapes(), vec![(2048, 4096), (4096, 4096), (4096, 4096), (4096, 1)]);
    }

    #[test]
    fn multitask_probabilities_and_range() {
        let cfg = ImageModelConfig {
            backbone: Backbone::Features { width: 12 },
            trunk: vec![8, 8, 8],
            ..ImageModelConfig::desk(HeadKind::MultiTask)
        };
        let model = ImageModel::<f64>::new(cfg, 1).unwrap();
        let samples: Vec<ImageSample> = (0..3)
            .map(|i| ImageSample {
                input: (0..12).map(|j| ((i * 12 + j) as f64).sin() * 3.0).collect(),
                gcs: 1.0,
                emotion: GroupEmotion::Neutral,
            })
            .collect();
        let refs: Vec<&ImageSample> = samples.iter().collect();
        for p in model.predict_batch(&refs).unwrap() {
            assert!((0.0..=3.0).contains(&p.gcs.unwrap()));
            GroupEmotionDistribution::new(p.emotion.unwrap()).unwrap();
        }
    }

    #[test]
    fn heads_share_trunk_parameter_counts() {
        let models: Vec<ImageModel<f32>> = [HeadKind::Cohesion, HeadKind::Emotion, HeadKind::MultiTask]
            .into_iter()
            .map(|k| ImageModel::new(ImageModelConfig::desk(k), 2).unwrap())
            .collect();
        let trunk: Vec<usize> = models
            .iter()
            .map(|m| m.store.count_trainable("trunk.") + m.store.count_trainable("backbone."))
            .collect();
        assert!(trunk.windows(2).all(|w| w[0] == w[1]));
        assert_eq!(models[0].store.count_trainable("head."), 257);
        assert_eq!(models[1].store.count_trainable("head."), 257 * 3);
        assert_eq!(models[2].store.count_trainable("head."), 257 * 4);
    }

    #[test]
    fn feature_width_mismatch_is_a_dimension_error() {
        let cfg = ImageModelConfig {
            backbone: Backbone::Features { width: 4 },
            trunk: vec![4],
            ..ImageModelConfig::desk(HeadKind::Cohesion)
        };
        let model = ImageModel::<f64>::new(cfg, 1).unwrap();
        let mut s = Session::frozen(&model.store, Mode::Eval);
        let x = s.graph.constant(&Tensor::zeros(&[2, 5]));
        assert!(matches!(model.forward(&mut s, x), Err(Error::Dimension { .. })));
    }

    fn masked_sample(person: usize) -> GroupSample {
        let (w, h) = (10, 10);
        let mut data = vec![false; w * h];
        data[..person].fill(true);
        GroupSample {
            id: "m".into(),
            image: RgbImage::filled(w, h, [200, 100, 50]),
            faces: vec![],
            face_emotions: None,
            mask: Some(Mask { width: w, height: h, data }),
            gcs: 1.0,
            emotion: GroupEmotion::Neutral,
            split: Split::Train,
        }
    }

    #[test]
    fn mask_crop_threshold() {
        let (cropped, included) = apply_mask_crop(&masked_sample(40)).unwrap();
        assert!(included);
        assert_eq!(cropped.image.get(0, 0), [200, 100, 50]);
        assert_eq!(cropped.image.get(9, 9), [0, 0, 0]);
        assert!(!apply_mask_crop(&masked_sample(50)).unwrap().1);
        let full = masked_sample(100);
        let (same, included) = apply_mask_crop(&full).unwrap();
        assert!(!included);
        assert_eq!(same.image, full.image);
        let mut none = full;
        none.mask = None;
        assert!(matches!(apply_mask_crop(&none), Err(Error::MissingMask)));
    }

    struct Linear(Vec<f64>);

    impl InputScorer<f64> for Linear {
        fn score(&self, s: &mut Session<f64>, input: Var) -> Result<Var> {
            let w = s.graph.constant(&Tensor::new(s.graph.shape(input), self.0.clone())?);
            let p = s.graph.mul(w, input)?;
            s.graph.sum_all(p)
        }
    }

    #[test]
    fn saliency_of_linear_and_constant_models() {
        let w: Vec<f64> = (0..12).map(|i| (i as f64 - 5.5) * 0.3).collect();
        let x = Tensor::from_f64(&[3, 2, 2], &[0.5; 12]).unwrap();
        let raw = saliency_raw(&Linear(w.clone()), &x).unwrap();
        for p in 0..4 {
            let expect = (0..3).map(|c| w[c * 4 + p].abs()).fold(0.0, f64::max);
            assert_abs_diff_eq!(raw.data()[p], expect, epsilon = 1e-12);
        }
        let zero = saliency_map(&Linear(vec![0.0; 12]), &x).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
        let m = saliency_map(&Linear(w), &x).unwrap();
        assert!(m.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn image_saliency_reaches_full_resolution() {
        let model = ImageModel::<f64>::new(
            ImageModelConfig {
                backbone: Backbone::Conv { height: 9, width: 9, channels: [2, 2, 3] },
                trunk: vec![4],
                ..ImageModelConfig::desk(HeadKind::Cohesion)
            },
            4,
        )
        .unwrap();
        let img = Tensor::from_f64(&[3, 12, 14], &(0..504).map(|i| (i as f64 * 0.37).sin()).collect::<Vec<_>>()).unwrap();
        let m = saliency_map(&model, &img).unwrap();
        assert_eq!(m.shape(), &[12, 14]);
        assert!(m.data().iter().any(|&v| v > 0.0));
    }

    #[test]
    fn face_level_scorer_matches_direct_prediction() {
        let caps = CapsNet::<f64>::new(
            CapsNetConfig {
                input_size: 12,
                conv_filters: 2,
                conv_kernel: 3,
                primary_kernel: 3,
                primary_stride: 2,
                primary_channels: 2,
                decoder_widths: vec![8],
                ..CapsNetConfig::default()
            },
            1,
        )
        .unwrap();
        let model = FaceLevelModel {
            capsnet: caps,
            head: FaceHead::new(FaceHeadConfig::default(), 2).unwrap(),
        };
        let mut image = RgbImage::filled(20, 16, [30, 60, 90]);
        for y in 0..16 {
            for x in 0..20 {
                image.set(x, y, [(x * 12) as u8, (y * 15) as u8, ((x + y) * 7) as u8]);
            }
        }
        let faces = vec![FaceBox { x: 1, y: 2, w: 8, h: 9 }, FaceBox { x: 10, y: 4, w: 9, h: 11 }];
        let sample = GroupSample {
            id: "f".into(),
            image,
            faces: faces.clone(),
            face_emotions: None,
            mask: None,
            gcs: 1.0,
            emotion: GroupEmotion::Positive,
            split: Split::Train,
        };
        let direct = Predictor::predict(&model, &sample).unwrap().gcs.unwrap();
        let planar = Tensor::from_f64(&[3, 16, 20], &sample.image.to_planar()).unwrap();
        let scorer = model.image_scorer(&faces);
        let mut s = Session::frozen(&ParamStore::new(), Mode::Eval);
        let x = s.graph.constant(&planar);
        let y = scorer.score(&mut s, x).unwrap();
        assert_abs_diff_eq!(s.graph.scalar(y), direct, epsilon = 1e-9);
        let m = saliency_map(&scorer, &planar).unwrap();
        assert_eq!(m.shape(), &[16, 20]);
    }
}
