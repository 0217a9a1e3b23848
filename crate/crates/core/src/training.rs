//! Optimizers, the training loop, k-fold splitting and evaluation metrics.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::data::NUM_GROUP_EMOTIONS;
use crate::error::{Error, Result};
use crate::graph::{Mode, Var};
use crate::nn::{ParamStore, Session};
use crate::real::Real;
use crate::rng::stream;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "lowercase"))]
pub enum OptimizerKind {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

/// Step decay: every `every` epochs the rate drops by `amount` times the
/// initial rate, never below a tenth of the initial rate.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LrDecay {
    pub amount: f64,
    pub every: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub decay: Option<LrDecay>,
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64, momentum: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd { momentum },
            learning_rate,
            decay: None,
        }
    }

    /// Adam with the usual defaults (0.9, 0.999, 1e-8).
    pub fn adam(learning_rate: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            learning_rate,
            decay: None,
        }
    }

    pub fn with_decay(mut self, amount: f64, every: usize) -> Self {
        self.decay = Some(LrDecay { amount, every });
        self
    }

    /// A zero rate is accepted so a run can be replayed without updates.
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning rate must be nonnegative"));
        }
        match self.kind {
            OptimizerKind::Sgd { momentum } if !(0.0..1.0).contains(&momentum) => {
                Err(Error::config("momentum must lie in [0,1)"))
            }
            OptimizerKind::Adam { beta1, beta2, eps }
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || eps <= 0.0 =>
            {
                Err(Error::config("adam betas must lie in [0,1) and eps be positive"))
            }
            _ => match self.decay {
                Some(d) if d.every == 0 || d.amount < 0.0 => {
                    Err(Error::config("decay needs a positive period and nonnegative amount"))
                }
                _ => Ok(()),
            },
        }
    }

    /// Learning rate in effect during `epoch` (1-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let lr0 = self.learning_rate;
        match self.decay {
            None => lr0,
            Some(d) => {
                let drops = (epoch.max(1) - 1) / d.every;
                (lr0 * (1.0 - d.amount * drops as f64)).max(0.1 * lr0)
            }
        }
    }
}

fn check_lengths(op: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::dim(op, &[a], &[b]));
    }
    Ok(())
}

/// `v <- momentum * v + g; p <- p - lr * v`.
pub fn sgd_step<T: Real>(params: &mut [T], grads: &[T], velocity: &mut [T], lr: T, momentum: T) -> Result<()> {
    check_lengths("sgd_step", params.len(), grads.len())?;
    check_lengths("sgd_step", params.len(), velocity.len())?;
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *p = *p - lr * *v;
    }
    Ok(())
}

/// Bias-corrected Adam update; `step` counts from 1.
#[allow(clippy::too_many_arguments)]
pub fn adam_step<T: Real>(
    params: &mut [T],
    grads: &[T],
    m: &mut [T],
    v: &mut [T],
    step: u64,
    lr: T,
    beta1: T,
    beta2: T,
    eps: T,
) -> Result<()> {
    check_lengths("adam_step", params.len(), grads.len())?;
    check_lengths("adam_step", params.len(), m.len())?;
    check_lengths("adam_step", params.len(), v.len())?;
    let t = step.max(1) as i32;
    let c1 = T::one() - beta1.powi(t);
    let c2 = T::one() - beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = beta1 * m[i] + (T::one() - beta1) * g;
        v[i] = beta2 * v[i] + (T::one() - beta2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        params[i] = params[i] - lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Moment buffers for every parameter of a store, index-aligned with it.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer<T> {
    pub config: OptimizerConfig,
    pub step: u64,
    /// One entry per parameter: `[velocity]` for SGD, `[m, v]` for Adam.
    pub slots: Vec<Vec<Vec<T>>>,
}

impl<T: Real> Optimizer<T> {
    pub fn new(config: OptimizerConfig, store: &ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let per_param = match config.kind {
            OptimizerKind::Sgd { .. } => 1,
            OptimizerKind::Adam { .. } => 2,
        };
        let slots = store
            .iter()
            .map(|p| vec![vec![T::zero(); p.tensor.len()]; per_param])
            .collect();
        Ok(Optimizer {
            config,
            step: 0,
            slots,
        })
    }

    pub fn slot_names(&self) -> &'static [&'static str] {
        match self.config.kind {
            OptimizerKind::Sgd { .. } => &["velocity"],
            OptimizerKind::Adam { .. } => &["m", "v"],
        }
    }

    /// Applies one update to every trainable parameter; a parameter the
    /// backward pass did not reach is treated as having zero gradient.
    pub fn apply(&mut self, store: &mut ParamStore<T>, epoch: usize) -> Result<()> {
        if self.slots.len() != store.len() {
            return Err(Error::config("optimizer state does not match parameter store"));
        }
        self.step += 1;
        let lr = T::lit(self.config.lr_at(epoch));
        for (param, slots) in store.iter_mut().zip(self.slots.iter_mut()) {
            if !param.tensor.requires_grad() {
                continue;
            }
            let zeros;
            let grads = match param.tensor.grad() {
                Some(g) => g.to_vec(),
                None => {
                    zeros = vec![T::zero(); param.tensor.len()];
                    zeros
                }
            };
            match self.config.kind {
                OptimizerKind::Sgd { momentum } => {
                    sgd_step(param.tensor.data_mut(), &grads, &mut slots[0], lr, T::lit(momentum))?
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let (m, v) = slots.split_at_mut(1);
                    adam_step(
                        param.tensor.data_mut(),
                        &grads,
                        &mut m[0],
                        &mut v[0],
                        self.step,
                        lr,
                        T::lit(beta1),
                        T::lit(beta2),
                        T::lit(eps),
                    )?
                }
            }
        }
        Ok(())
    }
}

/// Loss graph of one batch: the optimized total and named components.
pub struct LossTerms {
    pub total: Var,
    pub parts: Vec<(&'static str, Var)>,
}

/// A model that can be fitted by [`fit`].
pub trait Learner<T: Real> {
    type Sample;

    fn params(&self) -> &ParamStore<T>;

    fn params_mut(&mut self) -> &mut ParamStore<T>;

    /// Smallest batch the model accepts in train mode (2 with batch norm).
    fn min_batch(&self) -> usize {
        1
    }

    /// Builds the mean loss of `batch` on the session's graph.
    fn loss(&self, s: &mut Session<T>, batch: &[&Self::Sample]) -> Result<LossTerms>;
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FitConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub shuffle: bool,
    pub optimizer: OptimizerConfig,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    /// Mean batch loss while training.
    pub train_loss: f64,
    pub train_parts: BTreeMap<String, f64>,
    pub val_loss: Option<f64>,
    pub val_parts: BTreeMap<String, f64>,
    /// Lowest selection loss seen up to and including this epoch.
    pub best_so_far: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainRunReport {
    pub fingerprint: String,
    pub seed: u64,
    pub config: FitConfig,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_loss: f64,
    pub final_metrics: BTreeMap<String, f64>,
    pub duration_secs: Option<f64>,
}

pub struct FitOutcome<T> {
    pub report: TrainRunReport,
    /// Parameters after the epoch with the lowest validation loss.
    pub best: ParamStore<T>,
    pub optimizer: Optimizer<T>,
}

/// Mean loss and components of `samples` in eval mode, without gradients.
pub fn mean_loss<T: Real, L: Learner<T>>(
    learner: &L,
    samples: &[L::Sample],
    batch_size: usize,
) -> Result<(f64, BTreeMap<String, f64>)> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut total = 0.0;
    let mut parts: BTreeMap<String, f64> = BTreeMap::new();
    for chunk in samples.chunks(batch_size.max(1)) {
        let batch: Vec<&L::Sample> = chunk.iter().collect();
        let mut s = Session::frozen(learner.params(), Mode::Eval);
        let terms = learner.loss(&mut s, &batch)?;
        let w = chunk.len() as f64;
        total += s.graph.scalar(terms.total).as_f64() * w;
        for (name, v) in terms.parts {
            *parts.entry(name.to_string()).or_insert(0.0) += s.graph.scalar(v).as_f64() * w;
        }
    }
    let n = samples.len() as f64;
    parts.values_mut().for_each(|v| *v /= n);
    Ok((total / n, parts))
}

fn diverged(epoch: usize, batch: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { op } => Error::Diverged {
            epoch,
            batch,
            reason: format!("{op} produced a non-finite value"),
        },
        other => other,
    }
}

/// Trains `learner` in place. Deterministic given `cfg.seed`: batch order
/// per epoch is a seeded shuffle (or the identity with shuffling off).
/// A trailing batch smaller than [`Learner::min_batch`] is skipped.
pub fn fit<T: Real, L: Learner<T>>(
    learner: &mut L,
    train: &[L::Sample],
    val: &[L::Sample],
    cfg: &FitConfig,
    fingerprint: &str,
) -> Result<FitOutcome<T>> {
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::config("epochs and batch size must be positive"));
    }
    if cfg.batch_size < learner.min_batch() {
        return Err(Error::Config(format!(
            "batch size {} below the model minimum {}",
            cfg.batch_size,
            learner.min_batch()
        )));
    }
    let mut optimizer = Optimizer::new(cfg.optimizer, learner.params())?;
    let mut best = learner.params().clone();
    let mut best_loss = f64::INFINITY;
    let mut best_epoch = 0;
    let mut epochs = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        if cfg.shuffle {
            order.shuffle(&mut stream(cfg.seed, epoch as u64));
        }
        let mut sum = 0.0;
        let mut seen = 0usize;
        let mut parts: BTreeMap<String, f64> = BTreeMap::new();
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if chunk.len() < learner.min_batch() {
                continue;
            }
            let on_err = diverged(epoch, bi + 1);
            let batch: Vec<&L::Sample> = chunk.iter().map(|&i| &train[i]).collect();
            let mut s = Session::new(learner.params(), Mode::Train);
            let terms = learner.loss(&mut s, &batch).map_err(&on_err)?;
            let loss = s.graph.scalar(terms.total).as_f64();
            if !loss.is_finite() {
                return Err(on_err(Error::NonFinite { op: "loss" }));
            }
            s.graph.backward(terms.total)?;
            let w = chunk.len() as f64;
            sum += loss * w;
            seen += chunk.len();
            for (name, v) in &terms.parts {
                *parts.entry(name.to_string()).or_insert(0.0) += s.graph.scalar(*v).as_f64() * w;
            }
            let store = learner.params_mut();
            s.finish(store)?;
            optimizer.apply(store, epoch)?;
            store.zero_grads();
            if store.iter().any(|p| !p.tensor.is_finite()) {
                return Err(on_err(Error::NonFinite { op: "parameter update" }));
            }
        }
        if seen == 0 {
            return Err(Error::config("no batch satisfied the minimum batch size"));
        }
        parts.values_mut().for_each(|v| *v /= seen as f64);
        let train_loss = sum / seen as f64;
        let (val_loss, val_parts) = if val.is_empty() {
            (None, BTreeMap::new())
        } else {
            let (l, p) = mean_loss(&*learner, val, cfg.batch_size).map_err(diverged(epoch, 0))?;
            (Some(l), p)
        };
        let selection = val_loss.unwrap_or(train_loss);
        if selection < best_loss {
            best_loss = selection;
            best_epoch = epoch;
            best = learner.params().clone();
        }
        epochs.push(EpochRecord {
            epoch,
            learning_rate: cfg.optimizer.lr_at(epoch),
            train_loss,
            train_parts: parts,
            val_loss,
            val_parts,
            best_so_far: best_loss,
        });
    }

    Ok(FitOutcome {
        report: TrainRunReport {
            fingerprint: fingerprint.to_string(),
            seed: cfg.seed,
            config: cfg.clone(),
            epochs,
            best_epoch,
            best_loss,
            final_metrics: BTreeMap::new(),
            duration_secs: None,
        },
        best,
        optimizer,
    })
}

// ---- k-fold -------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FoldAssignment {
    pub k: usize,
    /// Fold index of every sample.
    pub fold_of: Vec<usize>,
}

impl FoldAssignment {
    pub fn fold(&self, f: usize) -> Vec<usize> {
        (0..self.fold_of.len()).filter(|&i| self.fold_of[i] == f).collect()
    }

    pub fn complement(&self, f: usize) -> Vec<usize> {
        (0..self.fold_of.len()).filter(|&i| self.fold_of[i] != f).collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        self.fold_of.iter().for_each(|&f| sizes[f] += 1);
        sizes
    }
}

/// Seeded shuffle dealt round-robin into `k` folds, so the first `n % k`
/// folds hold one extra sample.
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::config("k-fold needs k >= 2"));
    }
    if k > n {
        return Err(Error::Config(format!("k = {k} exceeds sample count {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, 0x006b_666f_6c64));
    let mut fold_of = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        fold_of[i] = pos % k;
    }
    Ok(FoldAssignment { k, fold_of })
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FoldResult {
    pub fold: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub mse: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CrossValReport {
    pub k: usize,
    pub learning_rate: f64,
    pub folds: Vec<FoldResult>,
    pub average_mse: f64,
}

impl CrossValReport {
    pub fn new(learning_rate: f64, folds: Vec<FoldResult>) -> Self {
        let average_mse = folds.iter().map(|f| f.mse).sum::<f64>() / folds.len().max(1) as f64;
        CrossValReport {
            k: folds.len(),
            learning_rate,
            folds,
            average_mse,
        }
    }

    /// Fold rows followed by an average row.
    pub fn table(&self) -> String {
        let mut out = format!("{:<10}{:>14}\n", "Fold", format!("lr = {}", self.learning_rate));
        for f in &self.folds {
            out += &format!("{:<10}{:>14.5}\n", f.fold + 1, f.mse);
        }
        out += &format!("{:<10}{:>14.5}\n", "Average", self.average_mse);
        out
    }
}

// ---- evaluation ---------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    /// Absent for emotion-only models.
    pub gcs: Option<f64>,
    pub emotion: Option<[f64; NUM_GROUP_EMOTIONS]>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Target {
    pub gcs: f64,
    pub emotion: Option<usize>,
}

pub trait Labeled {
    fn target(&self) -> Target;
}

pub trait Predictor<S> {
    fn predict(&self, sample: &S) -> Result<Prediction>;

    fn predict_many(&self, samples: &[S]) -> Vec<Result<Prediction>> {
        samples.iter().map(|s| self.predict(s)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Metrics {
    pub count: usize,
    /// Samples the model refused (no faces).
    pub skipped: usize,
    /// Absent when the model predicts no cohesion.
    pub mse: Option<f64>,
    pub accuracy: Option<f64>,
    /// `confusion[true][predicted]`.
    pub confusion: Option<[[usize; NUM_GROUP_EMOTIONS]; NUM_GROUP_EMOTIONS]>,
}

/// Scores predictions against targets; `None` predictions count as skipped.
pub fn score(predictions: &[Option<Prediction>], targets: &[Target]) -> Result<Metrics> {
    check_lengths("score", predictions.len(), targets.len())?;
    let mut count = 0;
    let mut sq = 0.0;
    let mut scored = 0;
    let mut confusion = [[0usize; NUM_GROUP_EMOTIONS]; NUM_GROUP_EMOTIONS];
    let mut labeled = 0;
    let mut hits = 0;
    for (p, t) in predictions.iter().zip(targets) {
        let Some(p) = p else { continue };
        count += 1;
        if let Some(g) = p.gcs {
            sq += (g - t.gcs) * (g - t.gcs);
            scored += 1;
        }
        if let (Some(probs), Some(truth)) = (p.emotion, t.emotion) {
            let guess = crate::capsnet::argmax(&probs);
            confusion[truth][guess] += 1;
            labeled += 1;
            hits += usize::from(guess == truth);
        }
    }
    if count == 0 {
        return Err(Error::EmptyDataset);
    }
    Ok(Metrics {
        count,
        skipped: predictions.len() - count,
        mse: (scored > 0).then(|| sq / scored as f64),
        accuracy: (labeled > 0).then(|| hits as f64 / labeled as f64),
        confusion: (labeled > 0).then_some(confusion),
    })
}

/// MSE of cohesion on the label scale, plus accuracy and confusion when the
/// model predicts group emotion. Samples rejected with
/// [`Error::NoFaces`] are skipped.
pub fn evaluate<S: Labeled, P: Predictor<S>>(model: &P, samples: &[S]) -> Result<Metrics> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut preds = Vec::with_capacity(samples.len());
    for r in model.predict_many(samples) {
        match r {
            Ok(p) => preds.push(Some(p)),
            Err(Error::NoFaces) => preds.push(None),
            Err(e) => return Err(e),
        }
    }
    let targets: Vec<Target> = samples.iter().map(Labeled::target).collect();
    score(&preds, &targets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn sgd_hand_iteration() {
        let (mut p, mut v) = ([1.0f64], [0.0f64]);
        sgd_step(&mut p, &[1.0], &mut v, 0.1, 0.9).unwrap();
        assert_abs_diff_eq!(p[0], 0.9, epsilon = 1e-15);
        assert_eq!(v[0], 1.0);
        sgd_step(&mut p, &[1.0], &mut v, 0.1, 0.9).unwrap();
        assert_abs_diff_eq!(v[0], 1.9, epsilon = 1e-15);
        assert_abs_diff_eq!(p[0], 0.71, epsilon = 1e-15);
    }

    #[test]
    fn sgd_without_momentum_is_gradient_descent() {
        let (mut p, mut v) = ([2.0f64, -1.0], [0.0f64; 2]);
        sgd_step(&mut p, &[0.5, -3.0], &mut v, 0.1, 0.0).unwrap();
        assert_eq!(p, [2.0 - 0.1 * 0.5, -1.0 + 0.1 * 3.0]);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point_with_decaying_velocity() {
        let (mut p, mut v) = ([2.0f64], [1.0f64]);
        sgd_step(&mut p, &[0.0], &mut v, 0.0, 0.9).unwrap();
        assert_eq!(p[0], 2.0);
        assert_abs_diff_eq!(v[0], 0.9, epsilon = 1e-15);
        let (mut p, mut m, mut s) = ([2.0f64], [0.0], [0.0]);
        adam_step(&mut p, &[0.0], &mut m, &mut s, 1, 0.001, 0.9, 0.999, 1e-8).unwrap();
        assert_eq!(p[0], 2.0);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let (mut p, mut m, mut v) = ([0.0f64], [0.0], [0.0]);
        adam_step(&mut p, &[1.0], &mut m, &mut v, 1, 0.001, 0.9, 0.999, 1e-8).unwrap();
        assert_abs_diff_eq!(p[0], -0.001, epsilon = 1e-10);
    }

    #[test]
    fn step_shapes_must_agree() {
        let mut p = [0.0f64; 2];
        assert!(sgd_step(&mut p, &[1.0], &mut [0.0; 2], 0.1, 0.0).is_err());
    }

    #[test]
    fn decay_schedule() {
        let cfg = OptimizerConfig::adam(0.001).with_decay(0.001, 10);
        assert_eq!(cfg.lr_at(1), 0.001);
        assert_eq!(cfg.lr_at(10), 0.001);
        assert_abs_diff_eq!(cfg.lr_at(11), 0.000999, epsilon = 1e-15);
        assert_abs_diff_eq!(cfg.lr_at(21), 0.001 * (1.0 - 0.002), epsilon = 1e-15);
        let steep = OptimizerConfig::sgd(0.01, 0.9).with_decay(0.5, 1);
        assert_abs_diff_eq!(steep.lr_at(50), 0.001, epsilon = 1e-15);
    }

    #[test]
    fn kfold_examples() {
        let a = kfold_split(100, 5, 1).unwrap();
        assert_eq!(a.sizes(), vec![20; 5]);
        let b = kfold_split(102, 5, 1).unwrap();
        assert_eq!(b.sizes(), vec![21, 21, 20, 20, 20]);
        let mut all: Vec<usize> = (0..5).flat_map(|f| b.fold(f)).collect();
        all.sort();
        assert_eq!(all, (0..102).collect::<Vec<_>>());
        assert!(kfold_split(3, 5, 1).is_err());
        assert!(kfold_split(10, 1, 1).is_err());
        assert_eq!(kfold_split(50, 5, 9).unwrap(), kfold_split(50, 5, 9).unwrap());
    }

    #[test]
    fn score_examples() {
        let targets: Vec<Target> = [0.0, 1.0, 2.0, 3.0]
            .iter()
            .map(|&g| Target { gcs: g, emotion: None })
            .collect();
        let exact: Vec<_> = targets
            .iter()
            .map(|t| Some(Prediction { gcs: Some(t.gcs), emotion: None }))
            .collect();
        assert_eq!(score(&exact, &targets).unwrap().mse, Some(0.0));
        let constant = vec![Some(Prediction { gcs: Some(1.5), emotion: None }); 4];
        assert_abs_diff_eq!(score(&constant, &targets).unwrap().mse.unwrap(), 1.25, epsilon = 1e-15);
        assert!(score(&[None, None, None, None], &targets).is_err());
    }

    #[test]
    fn accuracy_and_confusion() {
        let targets = [
            Target { gcs: 1.0, emotion: Some(0) },
            Target { gcs: 1.0, emotion: Some(2) },
        ];
        let preds = [
            Some(Prediction { gcs: Some(1.0), emotion: Some([0.8, 0.1, 0.1]) }),
            Some(Prediction { gcs: Some(1.0), emotion: Some([0.1, 0.8, 0.1]) }),
        ];
        let m = score(&preds, &targets).unwrap();
        assert_eq!(m.accuracy, Some(0.5));
        assert_eq!(m.confusion.unwrap()[2][1], 1);
    }

    #[test]
    fn crossval_table_has_average_row() {
        let folds = (0..5)
            .map(|f| FoldResult { fold: f, train_size: 8, test_size: 2, mse: f as f64 * 0.1 })
            .collect();
        let r = CrossValReport::new(0.01, folds);
        assert_abs_diff_eq!(r.average_mse, 0.2, epsilon = 1e-12);
        let table = r.table();
        assert_eq!(table.lines().count(), 7);
        assert!(table.lines().last().unwrap().starts_with("Average"));
    }
}
