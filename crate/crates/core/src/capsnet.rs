//! Capsule network for seven-class facial emotion.
//!
//! A ReLU convolution feeds a convolutional primary-capsule layer whose
//! outputs are squashed into capsule vectors. Every primary capsule
//! predicts every emotion capsule through its own transform matrix;
//! routing by agreement combines the predictions. Training minimizes the
//! margin loss on capsule lengths plus a small reconstruction penalty from
//! a decoder fed the (masked) winning capsule.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::data::{FaceSample, NUM_EMOTIONS};
use crate::error::{Error, Result};
use crate::graph::{Graph, Mode, Var};
use crate::heads::InputScorer;
use crate::nn::{one_hot, Conv, Dense, ParamId, ParamStore, Session};
use crate::real::Real;
use crate::rng::{seeded, truncated_normal};
use crate::tensor::Tensor;
use crate::training::{Learner, LossTerms};

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CapsuleLayerConfig {
    pub num_lower: usize,
    pub lower_dim: usize,
    pub num_upper: usize,
    pub upper_dim: usize,
    pub routing_iterations: usize,
}

impl CapsuleLayerConfig {
    pub fn validate(&self) -> Result<()> {
        if [self.num_lower, self.lower_dim, self.num_upper, self.upper_dim].contains(&0) {
            return Err(Error::config("capsule counts and dimensions must be positive"));
        }
        if self.routing_iterations == 0 {
            return Err(Error::config("routing needs at least one iteration"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MarginLossConfig {
    pub m_plus: f64,
    pub m_minus: f64,
    pub lambda_down: f64,
}

impl Default for MarginLossConfig {
    fn default() -> Self {
        MarginLossConfig {
            m_plus: 0.9,
            m_minus: 0.1,
            lambda_down: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CapsNetConfig {
    /// Side of the square grayscale input.
    pub input_size: usize,
    pub conv_filters: usize,
    pub conv_kernel: usize,
    pub primary_kernel: usize,
    pub primary_stride: usize,
    pub primary_channels: usize,
    pub primary_dim: usize,
    pub emotion_dim: usize,
    pub routing_iterations: usize,
    pub decoder_widths: Vec<usize>,
    pub transform_init_std: f64,
    pub margin: MarginLossConfig,
    pub recon_weight: f64,
}

impl Default for CapsNetConfig {
    fn default() -> Self {
        CapsNetConfig {
            input_size: 28,
            conv_filters: 16,
            conv_kernel: 9,
            primary_kernel: 9,
            primary_stride: 2,
            primary_channels: 32,
            primary_dim: 4,
            emotion_dim: 8,
            routing_iterations: 3,
            decoder_widths: vec![64, 128],
            transform_init_std: 0.1,
            margin: MarginLossConfig::default(),
            recon_weight: 0.0005,
        }
    }
}

impl CapsNetConfig {
    /// Side of the primary-capsule grid.
    pub fn primary_grid(&self) -> Result<usize> {
        let conv_out = self
            .input_size
            .checked_sub(self.conv_kernel)
            .map(|d| d + 1)
            .ok_or_else(|| Error::config("conv kernel larger than input"))?;
        let grid = conv_out
            .checked_sub(self.primary_kernel)
            .map(|d| d / self.primary_stride.max(1) + 1)
            .ok_or_else(|| Error::config("primary kernel larger than feature map"))?;
        Ok(grid)
    }

    pub fn capsule_layer(&self) -> Result<CapsuleLayerConfig> {
        let grid = self.primary_grid()?;
        let layer = CapsuleLayerConfig {
            num_lower: self.primary_channels * grid * grid,
            lower_dim: self.primary_dim,
            num_upper: NUM_EMOTIONS,
            upper_dim: self.emotion_dim,
            routing_iterations: self.routing_iterations,
        };
        layer.validate()?;
        Ok(layer)
    }

    pub fn fingerprint(&self) -> String {
        format!(
            "capsnet/v1 input={} conv={}k{} primary={}x{}k{}s{} emotion={}x{} routing={} decoder={:?}",
            self.input_size,
            self.conv_filters,
            self.conv_kernel,
            self.primary_channels,
            self.primary_dim,
            self.primary_kernel,
            self.primary_stride,
            NUM_EMOTIONS,
            self.emotion_dim,
            self.routing_iterations,
            self.decoder_widths,
        )
    }
}

/// Squash along `axis`: `s * |s| / (1 + |s|^2)`, which equals
/// `|s|^2 / (1 + |s|^2) * s / |s|` and maps the zero vector to zero.
pub fn squash<T: Real>(g: &mut Graph<T>, s: Var, axis: usize) -> Result<Var> {
    let norm = g.l2_norm(s, axis)?;
    let mut keep = g.shape(s).to_vec();
    keep[axis] = 1;
    let norm = g.reshape(norm, &keep)?;
    let sq = g.square(norm)?;
    let denom = g.add_scalar(sq, T::one())?;
    let factor = g.div(norm, denom)?;
    g.mul(s, factor)
}

/// Squash of a plain vector.
pub fn squash_vector(s: &[f64]) -> Vec<f64> {
    let norm = s.iter().map(|x| x * x).sum::<f64>();
    let norm = num_traits::Float::sqrt(norm);
    let factor = norm / (1.0 + norm * norm);
    s.iter().map(|x| x * factor).collect()
}

/// Routing logits and couplings of one example at one iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingState {
    pub num_lower: usize,
    pub num_upper: usize,
    /// `num_lower x num_upper`, row-major.
    pub logits: Vec<f64>,
    pub couplings: Vec<f64>,
}

/// Output of [`dynamic_routing`].
#[derive(Debug, Clone)]
pub struct Routed {
    /// Squashed upper capsules, `[batch, num_upper, upper_dim]`.
    pub output: Var,
    logits: Vec<Var>,
    couplings: Vec<Var>,
}

impl Routed {
    pub fn iterations(&self) -> usize {
        self.couplings.len()
    }

    /// State used at each iteration for example `item` of the batch.
    pub fn states<T: Real>(&self, g: &Graph<T>, item: usize) -> Vec<RoutingState> {
        self.logits
            .iter()
            .zip(&self.couplings)
            .map(|(&b, &c)| {
                let shape = g.shape(c);
                let (l, u) = (shape[1], shape[2]);
                let span = item * l * u..(item + 1) * l * u;
                RoutingState {
                    num_lower: l,
                    num_upper: u,
                    logits: g.value(b)[span.clone()].iter().map(|x| x.as_f64()).collect(),
                    couplings: g.value(c)[span].iter().map(|x| x.as_f64()).collect(),
                }
            })
            .collect()
    }
}

/// Routing by agreement over predictions `[batch, lower, upper, dim]`.
///
/// Logits start at zero. Each iteration takes couplings as the softmax of
/// the logits over the upper axis, forms coupling-weighted sums of the
/// predictions, squashes them, and (except after the last iteration) adds
/// the prediction/output dot products to the logits.
pub fn dynamic_routing<T: Real>(g: &mut Graph<T>, predictions: Var, iterations: usize) -> Result<Routed> {
    if iterations == 0 {
        return Err(Error::config("routing needs at least one iteration"));
    }
    let shape = g.shape(predictions).to_vec();
    let [b, l, u, d] = shape[..] else {
        return Err(Error::dim("dynamic_routing", &shape, &[0, 0, 0, 0]));
    };
    let mut logits = g.constant_from(&[b, l, u], vec![T::zero(); b * l * u])?;
    let mut all_logits = Vec::with_capacity(iterations);
    let mut all_couplings = Vec::with_capacity(iterations);
    let mut output = logits;
    for it in 0..iterations {
        let c = g.softmax(logits, 2)?;
        all_logits.push(logits);
        all_couplings.push(c);
        let c4 = g.reshape(c, &[b, l, u, 1])?;
        let weighted = g.mul(c4, predictions)?;
        let s = g.sum(weighted, 1)?;
        output = squash(g, s, 2)?;
        if it + 1 < iterations {
            let v4 = g.reshape(output, &[b, 1, u, d])?;
            let agree = g.mul(predictions, v4)?;
            let delta = g.sum(agree, 3)?;
            logits = g.add(logits, delta)?;
        }
    }
    Ok(Routed {
        output,
        logits: all_logits,
        couplings: all_couplings,
    })
}

/// Margin loss on capsule lengths `[batch, classes]`, averaged over the batch.
pub fn margin_loss<T: Real>(
    g: &mut Graph<T>,
    lengths: Var,
    targets: &[usize],
    cfg: &MarginLossConfig,
) -> Result<Var> {
    let shape = g.shape(lengths).to_vec();
    let [b, classes] = shape[..] else {
        return Err(Error::dim("margin_loss", &shape, &[targets.len(), NUM_EMOTIONS]));
    };
    if b != targets.len() {
        return Err(Error::dim("margin_loss", &shape, &[targets.len(), classes]));
    }
    let present_mask = one_hot::<T>(targets, classes)?;
    let absent_mask = Tensor::new(
        &[b, classes],
        present_mask
            .data()
            .iter()
            .map(|&t| T::one() - t)
            .collect(),
    )?;
    let present_mask = g.constant(&present_mask);
    let absent_mask = g.constant(&absent_mask);

    let neg = g.scale(lengths, -T::one())?;
    let gap = g.add_scalar(neg, T::lit(cfg.m_plus))?;
    let gap = g.relu(gap)?;
    let gap = g.square(gap)?;
    let present = g.mul(gap, present_mask)?;

    let over = g.add_scalar(lengths, T::lit(-cfg.m_minus))?;
    let over = g.relu(over)?;
    let over = g.square(over)?;
    let absent = g.mul(over, absent_mask)?;
    let absent = g.scale(absent, T::lit(cfg.lambda_down))?;

    let per_class = g.add(present, absent)?;
    let total = g.sum_all(per_class)?;
    g.scale(total, T::lit(1.0 / b as f64))
}

/// `weight * sum((decoded - original)^2)`, averaged over the leading batch axis.
pub fn reconstruction_loss<T: Real>(g: &mut Graph<T>, decoded: Var, original: Var, weight: f64) -> Result<Var> {
    if g.shape(decoded) != g.shape(original) {
        return Err(Error::dim("reconstruction_loss", g.shape(decoded), g.shape(original)));
    }
    let batch = g.shape(decoded)[0];
    let diff = g.sub(decoded, original)?;
    let sq = g.square(diff)?;
    let total = g.sum_all(sq)?;
    g.scale(total, T::lit(weight / batch as f64))
}

/// Per-face emotion probabilities over the seven basic emotions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmotionDistribution(pub [f64; NUM_EMOTIONS]);

impl EmotionDistribution {
    /// Normalizes capsule lengths by their sum (uniform if all are zero).
    pub fn from_lengths(lengths: &[f64; NUM_EMOTIONS]) -> Self {
        let total: f64 = lengths.iter().sum();
        if total <= 0.0 {
            return EmotionDistribution([1.0 / NUM_EMOTIONS as f64; NUM_EMOTIONS]);
        }
        EmotionDistribution(lengths.map(|l| l / total))
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmotionPrediction {
    pub distribution: EmotionDistribution,
    pub lengths: [f64; NUM_EMOTIONS],
}

/// Graph handles produced by [`CapsNet::encode`].
pub struct Encoded {
    /// `[batch, 7, emotion_dim]`
    pub capsules: Var,
    /// `[batch, 7]`
    pub lengths: Var,
    pub routing: Routed,
}

pub struct CapsLoss {
    pub total: Var,
    pub margin: Var,
    pub reconstruction: Var,
}

#[derive(Debug, Clone)]
pub struct CapsNet<T> {
    pub config: CapsNetConfig,
    pub store: ParamStore<T>,
    layer: CapsuleLayerConfig,
    conv: Conv,
    primary: Conv,
    transform: ParamId,
    decoder: Vec<Dense>,
}

impl<T: Real> CapsNet<T> {
    pub fn new(config: CapsNetConfig, seed: u64) -> Result<Self> {
        let layer = config.capsule_layer()?;
        if config.decoder_widths.is_empty() {
            return Err(Error::config("decoder needs at least one hidden layer"));
        }
        let mut rng = seeded(seed);
        let mut store = ParamStore::new();
        let conv = Conv::new(&mut store, "conv", 1, config.conv_filters, config.conv_kernel, 1, &mut rng);
        let primary = Conv::new(
            &mut store,
            "primary",
            config.conv_filters,
            config.primary_channels * config.primary_dim,
            config.primary_kernel,
            config.primary_stride,
            &mut rng,
        );
        let shape = [layer.num_lower, layer.lower_dim, layer.num_upper * layer.upper_dim];
        let data = (0..shape.iter().product::<usize>())
            .map(|_| T::lit(truncated_normal(&mut rng, config.transform_init_std)))
            .collect();
        let transform = store.add(
            "transform",
            Tensor::new(&shape, data)?.with_requires_grad(true),
        );
        let mut decoder = Vec::new();
        let mut width = NUM_EMOTIONS * config.emotion_dim;
        for (i, &w) in config.decoder_widths.iter().enumerate() {
            decoder.push(Dense::new(&mut store, &format!("decoder.{i}"), width, w, &mut rng));
            width = w;
        }
        let pixels = config.input_size * config.input_size;
        decoder.push(Dense::new(&mut store, "decoder.out", width, pixels, &mut rng));
        Ok(CapsNet {
            config,
            store,
            layer,
            conv,
            primary,
            transform,
            decoder,
        })
    }

    pub fn fingerprint(&self) -> String {
        self.config.fingerprint()
    }

    pub fn capsule_layer(&self) -> CapsuleLayerConfig {
        self.layer
    }

    /// `faces` is `[batch, 1, size, size]`.
    pub fn encode(&self, s: &mut Session<T>, faces: Var) -> Result<Encoded> {
        let size = self.config.input_size;
        let shape = s.graph.shape(faces).to_vec();
        if shape.len() != 4 || shape[1..] != [1, size, size] {
            return Err(Error::dim("capsnet input", &shape, &[shape.first().copied().unwrap_or(1), 1, size, size]));
        }
        let b = shape[0];
        let CapsuleLayerConfig {
            num_lower,
            lower_dim,
            num_upper,
            upper_dim,
            routing_iterations,
        } = self.layer;
        let grid = self.config.primary_grid()?;

        let h = self.conv.forward(s, faces)?;
        let h = s.graph.relu(h)?;
        let p = self.primary.forward(s, h)?;
        // channel = capsule_channel * dim + component
        let g = &mut s.graph;
        let p = g.reshape(p, &[b, self.config.primary_channels, lower_dim, grid, grid])?;
        let p = g.permute(p, &[0, 1, 3, 4, 2])?;
        let p = g.reshape(p, &[b, num_lower, lower_dim])?;
        let u = squash(g, p, 2)?;

        let u = g.permute(u, &[1, 0, 2])?;
        let w = s.var(self.transform);
        let g = &mut s.graph;
        let u_hat = g.matmul(u, w)?;
        let u_hat = g.reshape(u_hat, &[num_lower, b, num_upper, upper_dim])?;
        let u_hat = g.permute(u_hat, &[1, 0, 2, 3])?;

        let routing = dynamic_routing(g, u_hat, routing_iterations)?;
        let lengths = g.l2_norm(routing.output, 2)?;
        Ok(Encoded {
            capsules: routing.output,
            lengths,
            routing,
        })
    }

    /// Decodes with every capsule but `classes[i]` zeroed, `[batch, pixels]`.
    pub fn decode(&self, s: &mut Session<T>, capsules: Var, classes: &[usize]) -> Result<Var> {
        let b = classes.len();
        let mask = one_hot::<T>(classes, NUM_EMOTIONS)?.reshape(&[b, NUM_EMOTIONS, 1])?;
        let mask = s.graph.constant(&mask);
        let masked = s.graph.mul(capsules, mask)?;
        let mut x = s.graph.reshape(masked, &[b, NUM_EMOTIONS * self.config.emotion_dim])?;
        let last = self.decoder.len() - 1;
        for (i, layer) in self.decoder.iter().enumerate() {
            x = layer.forward(s, x)?;
            x = if i == last {
                s.graph.sigmoid(x)?
            } else {
                s.graph.relu(x)?
            };
        }
        Ok(x)
    }

    /// Margin plus reconstruction loss; the decoder sees the true class.
    pub fn capsule_loss(&self, s: &mut Session<T>, faces: Var, targets: &[usize]) -> Result<CapsLoss> {
        let enc = self.encode(s, faces)?;
        let margin = margin_loss(&mut s.graph, enc.lengths, targets, &self.config.margin)?;
        let decoded = self.decode(s, enc.capsules, targets)?;
        let pixels = self.config.input_size * self.config.input_size;
        let flat = s.graph.reshape(faces, &[targets.len(), pixels])?;
        let reconstruction = reconstruction_loss(&mut s.graph, decoded, flat, self.config.recon_weight)?;
        let total = s.graph.add(margin, reconstruction)?;
        Ok(CapsLoss {
            total,
            margin,
            reconstruction,
        })
    }

    fn faces_tensor(&self, faces: &[&[f64]]) -> Result<Tensor<T>> {
        let size = self.config.input_size;
        let mut data = Vec::with_capacity(faces.len() * size * size);
        for f in faces {
            if f.len() != size * size {
                return Err(Error::dim("capsnet input", &[f.len()], &[size, size]));
            }
            data.extend(f.iter().map(|&v| T::lit(v)));
        }
        Tensor::new(&[faces.len(), 1, size, size], data)
    }

    /// Emotion prediction for a batch of `size x size` crops.
    pub fn predict_batch(&self, faces: &[&[f64]]) -> Result<Vec<EmotionPrediction>> {
        if faces.is_empty() {
            return Ok(Vec::new());
        }
        let input = self.faces_tensor(faces)?;
        let mut s = Session::frozen(&self.store, Mode::Eval);
        let x = s.graph.constant(&input);
        let enc = self.encode(&mut s, x)?;
        let lengths = s.graph.value(enc.lengths);
        Ok(lengths
            .chunks(NUM_EMOTIONS)
            .map(|row| {
                let mut l = [0.0; NUM_EMOTIONS];
                l.iter_mut().zip(row).for_each(|(d, s)| *d = s.as_f64());
                EmotionPrediction {
                    distribution: EmotionDistribution::from_lengths(&l),
                    lengths: l,
                }
            })
            .collect())
    }

    pub fn predict(&self, face: &[f64]) -> Result<EmotionPrediction> {
        Ok(self.predict_batch(&[face])?[0])
    }

    /// Reconstruction from the argmax capsule, `size * size` values.
    pub fn reconstruct(&self, face: &[f64]) -> Result<Vec<f64>> {
        let input = self.faces_tensor(&[face])?;
        let mut s = Session::frozen(&self.store, Mode::Eval);
        let x = s.graph.constant(&input);
        let enc = self.encode(&mut s, x)?;
        let lengths: Vec<f64> = s.graph.value(enc.lengths).iter().map(|v| v.as_f64()).collect();
        let decoded = self.decode(&mut s, enc.capsules, &[argmax(&lengths)])?;
        Ok(s.graph.value(decoded).iter().map(|v| v.as_f64()).collect())
    }
}

impl<T: Real> Learner<T> for CapsNet<T> {
    type Sample = FaceSample;

    fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    fn loss(&self, s: &mut Session<T>, batch: &[&FaceSample]) -> Result<LossTerms> {
        let crops: Vec<&[f64]> = batch.iter().map(|f| f.pixels.as_slice()).collect();
        let targets: Vec<usize> = batch.iter().map(|f| f.emotion.index()).collect();
        let input = self.faces_tensor(&crops)?;
        let x = s.graph.constant(&input);
        let l = self.capsule_loss(s, x, &targets)?;
        Ok(LossTerms {
            total: l.total,
            parts: vec![("margin", l.margin), ("reconstruction", l.reconstruction)],
        })
    }
}

/// Saliency target: length of the winning emotion capsule of a `[1, size, size]` crop.
impl<T: Real> InputScorer<T> for CapsNet<T> {
    fn params(&self) -> Option<&ParamStore<T>> {
        Some(&self.store)
    }

    fn score(&self, s: &mut Session<T>, input: Var) -> Result<Var> {
        let size = self.config.input_size;
        let x = s.graph.reshape(input, &[1, 1, size, size])?;
        let enc = self.encode(s, x)?;
        let lengths: Vec<f64> = s.graph.value(enc.lengths).iter().map(|v| v.as_f64()).collect();
        let pick = one_hot::<T>(&[argmax(&lengths)], NUM_EMOTIONS)?;
        let pick = s.graph.constant(&pick);
        let chosen = s.graph.mul(enc.lengths, pick)?;
        s.graph.sum_all(chosen)
    }
}

/// Random but reproducible faces for shape and determinism checks.
pub fn random_faces(rng: &mut impl Rng, count: usize, size: usize) -> Vec<Vec<f64>> {
    (0..count)
        .map(|_| (0..size * size).map(|_| rng.gen::<f64>()).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn lengths_loss(lengths: &[f64], target: usize) -> f64 {
        let mut g = Graph::<f64>::new();
        let l = g.constant(&Tensor::from_f64(&[1, lengths.len()], lengths).unwrap());
        let loss = margin_loss(&mut g, l, &[target], &MarginLossConfig::default()).unwrap();
        g.scalar(loss)
    }

    #[test]
    fn squash_examples() {
        let mut g = Graph::<f64>::new();
        let s = g.constant(&Tensor::from_f64(&[3, 2], &[0.0, 0.0, 0.6, 0.8, 3.0, 4.0]).unwrap());
        let v = squash(&mut g, s, 1).unwrap();
        let v = g.value(v);
        assert_eq!(&v[0..2], &[0.0, 0.0]);
        assert_abs_diff_eq!(v[2], 0.3, epsilon = 1e-15);
        assert_abs_diff_eq!(v[3], 0.4, epsilon = 1e-15);
        assert_abs_diff_eq!(v[4], 0.576923, epsilon = 1e-6);
        assert_abs_diff_eq!(v[5], 0.769231, epsilon = 1e-6);
    }

    #[test]
    fn margin_loss_examples() {
        let mut boundary = [0.1; 7];
        boundary[2] = 0.9;
        assert_abs_diff_eq!(lengths_loss(&boundary, 2), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(lengths_loss(&[0.5; 7], 0), 0.64, epsilon = 1e-12);
        assert_abs_diff_eq!(lengths_loss(&[0.0; 7], 4), 0.81, epsilon = 1e-12);
        let mut g = Graph::<f64>::new();
        let l = g.constant(&Tensor::full(&[1, 7], 0.5));
        assert!(matches!(
            margin_loss(&mut g, l, &[7], &MarginLossConfig::default()),
            Err(Error::Index { index: 7, .. })
        ));
    }

    #[test]
    fn reconstruction_loss_examples() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(&Tensor::full(&[1, 10], 0.25));
        let b = g.constant(&Tensor::full(&[1, 10], 1.25));
        let same = reconstruction_loss(&mut g, a, a, 0.0005).unwrap();
        assert_eq!(g.scalar(same), 0.0);
        let unit = reconstruction_loss(&mut g, a, b, 0.0005).unwrap();
        assert_abs_diff_eq!(g.scalar(unit), 0.005, epsilon = 1e-15);
        let c = g.constant(&Tensor::full(&[1, 9], 0.0));
        assert!(reconstruction_loss(&mut g, a, c, 0.0005).is_err());
    }

    #[test]
    fn routing_rejects_zero_iterations() {
        let mut g = Graph::<f64>::new();
        let u = g.constant(&Tensor::full(&[1, 2, 2, 3], 0.1));
        assert!(matches!(dynamic_routing(&mut g, u, 0), Err(Error::Config(_))));
    }

    #[test]
    fn single_upper_capsule_couples_fully() {
        let mut g = Graph::<f64>::new();
        let u = g.constant(&Tensor::from_f64(&[1, 3, 1, 2], &[0.1, 0.4, -0.3, 0.2, 0.5, 0.5]).unwrap());
        let routed = dynamic_routing(&mut g, u, 4).unwrap();
        for state in routed.states(&g, 0) {
            assert!(state.couplings.iter().all(|&c| c == 1.0));
        }
    }

    fn tiny() -> CapsNetConfig {
        CapsNetConfig {
            input_size: 12,
            conv_filters: 4,
            conv_kernel: 5,
            primary_kernel: 5,
            primary_stride: 2,
            primary_channels: 2,
            primary_dim: 4,
            emotion_dim: 4,
            decoder_widths: vec![8],
            ..CapsNetConfig::default()
        }
    }

    #[test]
    fn default_geometry() {
        let layer = CapsNetConfig::default().capsule_layer().unwrap();
        assert_eq!(layer.num_lower, 32 * 6 * 6);
        assert_eq!(layer.num_upper, 7);
    }

    #[test]
    fn untrained_prediction_is_a_distribution() {
        let net = CapsNet::<f64>::new(tiny(), 3).unwrap();
        let faces = random_faces(&mut seeded(5), 3, 12);
        let refs: Vec<&[f64]> = faces.iter().map(|f| f.as_slice()).collect();
        let preds = net.predict_batch(&refs).unwrap();
        for p in &preds {
            let total: f64 = p.distribution.0.iter().sum();
            assert_abs_diff_eq!(total, 1.0, epsilon = 1e-6);
            assert!(p.distribution.0.iter().all(|&x| (0.0..=1.0).contains(&x)));
            assert!(p.lengths.iter().all(|&x| (0.0..1.0).contains(&x)));
        }
        let again = net.predict(&faces[0]).unwrap();
        assert_eq!(again.distribution.0.map(f64::to_bits), preds[0].distribution.0.map(f64::to_bits));
        assert!(net.predict(&faces[0][..100]).is_err());
        assert_eq!(net.reconstruct(&faces[0]).unwrap().len(), 144);
    }
}
