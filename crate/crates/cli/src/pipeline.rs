//! Training, evaluation and cross-validation over decoded group samples.

use std::collections::BTreeMap;
use std::time::Instant;

use cohesion_core::capsnet::CapsNet;
use cohesion_core::data::{face_samples, FaceSample, GroupSample};
use cohesion_core::heads::{pooled_samples, FaceHead, FaceLevelModel, ImageModel, ImageSample, PooledSample};
use cohesion_core::training::{evaluate, fit, kfold_split, CrossValReport, FoldResult, Metrics, TrainRunReport};
use rayon::prelude::*;
use serde::Serialize;

use crate::checkpoint::StoredOptimizer;
use crate::config::{ModelKind, PretrainSettings, TrainSettings};
use crate::error::{Error, Result};
use crate::models::{Float, Model};

/// Faces held out of pretraining to report capsule-network accuracy.
pub const PRETRAIN_VAL_FACES: usize = 500;

pub struct TrainOutput {
    pub model: Model,
    pub report: TrainRunReport,
    /// Present when a face-level run pretrained its capsule network.
    pub pretrain: Option<TrainRunReport>,
    pub optimizer: StoredOptimizer,
    pub metrics: BTreeMap<String, f64>,
}

/// Flattens metrics to `prefix_name` keys.
pub fn metric_map(prefix: &str, m: &Metrics) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    out.insert(format!("{prefix}_count"), m.count as f64);
    out.insert(format!("{prefix}_skipped"), m.skipped as f64);
    if let Some(v) = m.mse {
        out.insert(format!("{prefix}_mse"), v);
    }
    if let Some(v) = m.accuracy {
        out.insert(format!("{prefix}_accuracy"), v);
    }
    out
}

/// Fraction of faces whose longest capsule is the labeled emotion.
pub fn face_accuracy(net: &CapsNet<Float>, faces: &[FaceSample]) -> Result<f64> {
    if faces.is_empty() {
        return Err(Error::Core(cohesion_core::Error::EmptyDataset));
    }
    let hits: usize = faces
        .par_chunks(64)
        .map(|chunk| -> Result<usize> {
            let refs: Vec<&[f64]> = chunk.iter().map(|f| f.pixels.as_slice()).collect();
            let preds = net.predict_batch(&refs)?;
            Ok(preds
                .iter()
                .zip(chunk)
                .filter(|(p, f)| p.distribution.argmax() == f.emotion.index())
                .count())
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum();
    Ok(hits as f64 / faces.len() as f64)
}

/// Number of faces of `groups` taken in order until `limit` is reached.
fn leading_faces(groups: &[GroupSample], size: usize, limit: usize) -> Result<Vec<FaceSample>> {
    let mut faces = Vec::new();
    for g in groups {
        if faces.len() >= limit {
            break;
        }
        faces.extend(face_samples(std::slice::from_ref(g), size)?);
    }
    faces.truncate(limit);
    Ok(faces)
}

fn timed(mut report: TrainRunReport, start: Instant) -> TrainRunReport {
    report.duration_secs = Some(start.elapsed().as_secs_f64());
    report
}

pub struct Pretrained {
    pub net: CapsNet<Float>,
    pub report: TrainRunReport,
    pub optimizer: StoredOptimizer,
    pub val_accuracy: Option<f64>,
}

/// Trains the capsule network on labeled faces of `train`, reporting
/// face accuracy on up to [`PRETRAIN_VAL_FACES`] faces of `val`.
pub fn pretrain_capsnet(
    settings: &TrainSettings,
    pretrain: &PretrainSettings,
    train: &[GroupSample],
    val: &[GroupSample],
) -> Result<Pretrained> {
    let start = Instant::now();
    let size = settings.capsnet.input_size;
    let faces = leading_faces(train, size, pretrain.max_faces)?;
    if faces.is_empty() {
        return Err(Error::config("pretraining needs groups with per-face emotion labels"));
    }
    let held_out = leading_faces(val, size, PRETRAIN_VAL_FACES)?;
    let mut net = CapsNet::<Float>::new(settings.capsnet.clone(), pretrain.fit.seed)?;
    let fingerprint = net.fingerprint();
    let outcome = fit(&mut net, &faces, &held_out, &pretrain.fit, &fingerprint)?;
    net.store = outcome.best;
    let mut report = outcome.report;
    let val_accuracy = if held_out.is_empty() {
        None
    } else {
        Some(face_accuracy(&net, &held_out)?)
    };
    report.final_metrics.insert("train_faces".into(), faces.len() as f64);
    if let Some(a) = val_accuracy {
        report.final_metrics.insert("val_face_accuracy".into(), a);
    }
    Ok(Pretrained {
        net,
        report: timed(report, start),
        optimizer: StoredOptimizer::capture(&outcome.optimizer),
        val_accuracy,
    })
}

/// Pooled features of every sample that has faces.
pub fn pool(net: &CapsNet<Float>, groups: &[GroupSample]) -> Result<Vec<PooledSample>> {
    let chunks: Vec<Vec<Option<PooledSample>>> = groups
        .par_chunks(32)
        .map(|c| pooled_samples(net, c).map_err(Error::from))
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().flatten().collect())
}

/// Trains the face head on frozen capsule-network features.
pub fn train_face_head(
    settings: &TrainSettings,
    net: &CapsNet<Float>,
    train: &[GroupSample],
    val: &[GroupSample],
) -> Result<(FaceLevelModel<Float>, TrainRunReport, StoredOptimizer)> {
    let start = Instant::now();
    let train_pooled = pool(net, train)?;
    let val_pooled = pool(net, val)?;
    let mut head = FaceHead::<Float>::new(settings.face_head, settings.fit.seed)?;
    let model_fingerprint = FaceLevelModel {
        capsnet: net.clone(),
        head: head.clone(),
    }
    .fingerprint();
    let outcome = fit(&mut head, &train_pooled, &val_pooled, &settings.fit, &model_fingerprint)?;
    head.store = outcome.best;
    let mut report = outcome.report;
    let eval_on = if val_pooled.is_empty() { &train_pooled } else { &val_pooled };
    let split = if val_pooled.is_empty() { "train" } else { "val" };
    let m = evaluate(&head, eval_on)?;
    report.final_metrics.extend(metric_map(split, &m));
    let model = FaceLevelModel {
        capsnet: net.clone(),
        head,
    };
    Ok((model, timed(report, start), StoredOptimizer::capture(&outcome.optimizer)))
}

pub fn prepare_images(model: &ImageModel<Float>, groups: &[GroupSample]) -> Result<Vec<ImageSample>> {
    groups.par_iter().map(|g| model.prepare(g).map_err(Error::from)).collect()
}

pub fn train_image(
    settings: &TrainSettings,
    train: &[GroupSample],
    val: &[GroupSample],
) -> Result<(ImageModel<Float>, TrainRunReport, StoredOptimizer)> {
    let start = Instant::now();
    let mut model = ImageModel::<Float>::new(settings.image.clone(), settings.fit.seed)?;
    let train_s = prepare_images(&model, train)?;
    let val_s = prepare_images(&model, val)?;
    let fingerprint = model.fingerprint();
    let outcome = fit(&mut model, &train_s, &val_s, &settings.fit, &fingerprint)?;
    model.store = outcome.best;
    let mut report = outcome.report;
    let (split, eval_on) = if val_s.is_empty() { ("train", &train_s) } else { ("val", &val_s) };
    report.final_metrics.extend(metric_map(split, &evaluate(&model, eval_on)?));
    Ok((model, timed(report, start), StoredOptimizer::capture(&outcome.optimizer)))
}

/// Runs the training protocol of `settings.kind`. A face-level run uses
/// `capsnet` when given and pretrains one otherwise.
pub fn train(
    settings: &TrainSettings,
    train: &[GroupSample],
    val: &[GroupSample],
    capsnet: Option<CapsNet<Float>>,
) -> Result<TrainOutput> {
    match settings.kind {
        ModelKind::CapsnetPretrain => {
            let pretrain = PretrainSettings {
                fit: settings.fit.clone(),
                max_faces: usize::MAX,
            };
            let p = pretrain_capsnet(settings, &pretrain, train, val)?;
            let metrics = p.report.final_metrics.clone();
            Ok(TrainOutput {
                model: Model::Capsnet(p.net),
                report: p.report,
                pretrain: None,
                optimizer: p.optimizer,
                metrics,
            })
        }
        ModelKind::FaceLevel => {
            let (net, pretrain) = match capsnet {
                Some(net) => (net, None),
                None => {
                    let p = pretrain_capsnet(settings, &settings.pretrain, train, val)?;
                    (p.net, Some(p.report))
                }
            };
            let (model, report, optimizer) = train_face_head(settings, &net, train, val)?;
            let mut metrics = report.final_metrics.clone();
            if let Some(a) = pretrain.as_ref().and_then(|p| p.final_metrics.get("val_face_accuracy")) {
                metrics.insert("capsnet_val_face_accuracy".into(), *a);
            }
            Ok(TrainOutput {
                model: Model::FaceLevel(model),
                report,
                pretrain,
                optimizer,
                metrics,
            })
        }
        ModelKind::ImageLevel | ModelKind::Multitask => {
            let (model, report, optimizer) = train_image(settings, train, val)?;
            let metrics = report.final_metrics.clone();
            Ok(TrainOutput {
                model: Model::Image(model),
                report,
                pretrain: None,
                optimizer,
                metrics,
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Evaluation {
    pub model: String,
    pub metrics: BTreeMap<String, f64>,
    /// `confusion[true][predicted]` over group emotions, when predicted.
    pub confusion: Option<Vec<Vec<usize>>>,
}

pub fn evaluate_model(model: &Model, groups: &[GroupSample], split: &str) -> Result<Evaluation> {
    let (metrics, confusion) = match model {
        Model::Capsnet(net) => {
            let faces = face_samples(groups, net.config.input_size)?;
            let mut m = BTreeMap::new();
            m.insert(format!("{split}_face_count"), faces.len() as f64);
            m.insert(format!("{split}_face_accuracy"), face_accuracy(net, &faces)?);
            (m, None)
        }
        Model::FaceLevel(f) => {
            let pooled = pool(&f.capsnet, groups)?;
            let mut m = metric_map(split, &evaluate(&f.head, &pooled)?);
            m.insert(format!("{split}_skipped"), (groups.len() - pooled.len()) as f64);
            (m, None)
        }
        Model::Image(im) => {
            let samples = prepare_images(im, groups)?;
            let m = evaluate(im, &samples)?;
            let confusion = m.confusion.map(|c| c.iter().map(|r| r.to_vec()).collect());
            (metric_map(split, &m), confusion)
        }
    };
    Ok(Evaluation {
        model: model.kind_name().into(),
        metrics,
        confusion,
    })
}

/// k-fold protocol: every fold trains a fresh model on the other folds
/// and reports its cohesion MSE on the held-out fold. Folds run in
/// parallel. Face-level folds share one frozen capsule network.
pub fn crossval(
    settings: &TrainSettings,
    groups: &[GroupSample],
    k: usize,
    capsnet: Option<&CapsNet<Float>>,
) -> Result<CrossValReport> {
    let folds = kfold_split(groups.len(), k, settings.fit.seed)?;
    let results: Vec<FoldResult> = match settings.kind {
        ModelKind::CapsnetPretrain => {
            return Err(Error::config("cross-validation reports cohesion MSE; choose a cohesion model"))
        }
        ModelKind::FaceLevel => {
            let net = capsnet.ok_or_else(|| Error::config("face-level cross-validation needs a capsule network"))?;
            let pooled: Vec<Option<PooledSample>> = groups
                .par_chunks(32)
                .map(|c| pooled_samples(net, c).map_err(Error::from))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .flatten()
                .collect();
            (0..k)
                .into_par_iter()
                .map(|f| {
                    let pick = |idx: Vec<usize>| -> Vec<PooledSample> {
                        idx.into_iter().filter_map(|i| pooled[i].clone()).collect()
                    };
                    let train = pick(folds.complement(f));
                    let test = pick(folds.fold(f));
                    let mut head = FaceHead::<Float>::new(settings.face_head, settings.fit.seed)?;
                    let out = fit(&mut head, &train, &[], &settings.fit, "")?;
                    head.store = out.best;
                    let mse = evaluate(&head, &test)?.mse.expect("face head predicts cohesion");
                    Ok(FoldResult {
                        fold: f,
                        train_size: train.len(),
                        test_size: test.len(),
                        mse,
                    })
                })
                .collect::<Result<_>>()?
        }
        ModelKind::ImageLevel | ModelKind::Multitask => {
            let template = ImageModel::<Float>::new(settings.image.clone(), settings.fit.seed)?;
            let samples = prepare_images(&template, groups)?;
            (0..k)
                .into_par_iter()
                .map(|f| {
                    let pick = |idx: Vec<usize>| -> Vec<ImageSample> { idx.into_iter().map(|i| samples[i].clone()).collect() };
                    let train = pick(folds.complement(f));
                    let test = pick(folds.fold(f));
                    let mut model = template.clone();
                    let out = fit(&mut model, &train, &[], &settings.fit, "")?;
                    model.store = out.best;
                    let mse = evaluate(&model, &test)?.mse.expect("cohesion head present");
                    Ok(FoldResult {
                        fold: f,
                        train_size: train.len(),
                        test_size: test.len(),
                        mse,
                    })
                })
                .collect::<Result<_>>()?
        }
    };
    Ok(CrossValReport::new(settings.fit.optimizer.learning_rate, results))
}
