//! Run settings. Command-line flags override a JSON config file, which
//! overrides the built-in defaults for the chosen model kind.

use std::path::{Path, PathBuf};

use cohesion_core::capsnet::CapsNetConfig;
use cohesion_core::heads::{FaceHeadConfig, HeadKind, ImageModelConfig};
use cohesion_core::training::{FitConfig, OptimizerConfig};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// Pretrained capsule network, pooled face emotions, face head.
    FaceLevel,
    /// Image backbone with a cohesion head.
    ImageLevel,
    /// Image backbone with joint cohesion and group-emotion heads.
    Multitask,
    /// The seven-class facial emotion capsule network alone.
    CapsnetPretrain,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::FaceLevel => "face-level",
            ModelKind::ImageLevel => "image-level",
            ModelKind::Multitask => "multitask",
            ModelKind::CapsnetPretrain => "capsnet-pretrain",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerChoice {
    Sgd,
    Adam,
}

/// Budget of the capsule-network pretraining that face-level runs perform
/// when no pretrained checkpoint is given.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainFile {
    pub epochs: Option<usize>,
    pub batch: Option<usize>,
    pub lr: Option<f64>,
    pub max_faces: Option<usize>,
}

/// Everything a config file may set; every field is optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub manifest: Option<PathBuf>,
    pub model: Option<ModelKind>,
    pub optimizer: Option<OptimizerChoice>,
    pub epochs: Option<usize>,
    pub batch: Option<usize>,
    pub lr: Option<f64>,
    pub momentum: Option<f64>,
    pub alpha: Option<f64>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub capsnet_checkpoint: Option<PathBuf>,
    pub folds: Option<usize>,
    pub pretrain: Option<PretrainFile>,
    pub capsnet: Option<CapsNetConfig>,
    pub face_head: Option<FaceHeadConfig>,
    pub image: Option<ImageModelConfig>,
}

impl FileConfig {
    /// Reads a config file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        let mut cfg: FileConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.manifest, &mut cfg.out, &mut cfg.capsnet_checkpoint].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// `self` with every field that `over` sets replaced.
    pub fn overlay(self, over: FileConfig) -> FileConfig {
        let pretrain = match (self.pretrain, over.pretrain) {
            (Some(a), Some(b)) => Some(PretrainFile {
                epochs: b.epochs.or(a.epochs),
                batch: b.batch.or(a.batch),
                lr: b.lr.or(a.lr),
                max_faces: b.max_faces.or(a.max_faces),
            }),
            (a, b) => b.or(a),
        };
        FileConfig {
            manifest: over.manifest.or(self.manifest),
            model: over.model.or(self.model),
            optimizer: over.optimizer.or(self.optimizer),
            epochs: over.epochs.or(self.epochs),
            batch: over.batch.or(self.batch),
            lr: over.lr.or(self.lr),
            momentum: over.momentum.or(self.momentum),
            alpha: over.alpha.or(self.alpha),
            seed: over.seed.or(self.seed),
            out: over.out.or(self.out),
            capsnet_checkpoint: over.capsnet_checkpoint.or(self.capsnet_checkpoint),
            folds: over.folds.or(self.folds),
            pretrain,
            capsnet: over.capsnet.or(self.capsnet),
            face_head: over.face_head.or(self.face_head),
            image: over.image.or(self.image),
        }
    }
}

pub const DEFAULT_EPOCHS: usize = 30;
pub const DEFAULT_BATCH: usize = 16;
pub const DEFAULT_SEED: u64 = 0;
/// Image-level SGD: learning rate 0.001, momentum 0.9.
pub const IMAGE_LR: f64 = 0.001;
pub const IMAGE_MOMENTUM: f64 = 0.9;
/// Face head SGD learning rate.
pub const FACE_HEAD_LR: f64 = 0.01;
pub const FACE_HEAD_MOMENTUM: f64 = 0.9;
/// Capsule network Adam with a 0.001 step decay every 10 epochs.
pub const CAPSNET_LR: f64 = 0.001;
pub const CAPSNET_DECAY: (f64, usize) = (0.001, 10);
pub const PRETRAIN_EPOCHS: usize = 3;
pub const PRETRAIN_BATCH: usize = 32;
pub const PRETRAIN_MAX_FACES: usize = 2000;

/// Capsule-network pretraining inside a face-level run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PretrainSettings {
    pub fit: FitConfig,
    /// Faces drawn, in manifest order, from the training split.
    pub max_faces: usize,
}

/// Fully resolved training settings.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSettings {
    pub kind: ModelKind,
    pub fit: FitConfig,
    pub pretrain: PretrainSettings,
    pub capsnet: CapsNetConfig,
    pub face_head: FaceHeadConfig,
    pub image: ImageModelConfig,
    pub capsnet_checkpoint: Option<PathBuf>,
}

impl TrainSettings {
    pub fn defaults(kind: ModelKind) -> Self {
        Self::resolve(&FileConfig {
            model: Some(kind),
            ..FileConfig::default()
        })
        .expect("defaults are valid")
    }

    /// Fills gaps with defaults and rejects contradictory settings.
    pub fn resolve(cfg: &FileConfig) -> Result<Self> {
        let kind = cfg.model.ok_or_else(|| Error::config("no model kind given (--model)"))?;
        let default_choice = match kind {
            ModelKind::CapsnetPretrain => OptimizerChoice::Adam,
            _ => OptimizerChoice::Sgd,
        };
        let choice = cfg.optimizer.unwrap_or(default_choice);
        let (lr0, m0) = match kind {
            ModelKind::FaceLevel => (FACE_HEAD_LR, FACE_HEAD_MOMENTUM),
            ModelKind::CapsnetPretrain => (CAPSNET_LR, 0.0),
            ModelKind::ImageLevel | ModelKind::Multitask => (IMAGE_LR, IMAGE_MOMENTUM),
        };
        let lr = cfg.lr.unwrap_or(lr0);
        let optimizer = match choice {
            OptimizerChoice::Sgd => OptimizerConfig::sgd(lr, cfg.momentum.unwrap_or(m0)),
            OptimizerChoice::Adam => {
                if cfg.momentum.is_some() {
                    return Err(Error::config("momentum applies to SGD only, not Adam"));
                }
                let adam = OptimizerConfig::adam(lr);
                if kind == ModelKind::CapsnetPretrain {
                    adam.with_decay(CAPSNET_DECAY.0, CAPSNET_DECAY.1)
                } else {
                    adam
                }
            }
        };
        optimizer.validate()?;
        let seed = cfg.seed.unwrap_or(DEFAULT_SEED);
        let fit = FitConfig {
            epochs: cfg.epochs.unwrap_or(DEFAULT_EPOCHS),
            batch_size: cfg.batch.unwrap_or(match kind {
                ModelKind::CapsnetPretrain => PRETRAIN_BATCH,
                _ => DEFAULT_BATCH,
            }),
            seed,
            shuffle: true,
            optimizer,
        };
        if fit.epochs == 0 || fit.batch_size == 0 {
            return Err(Error::config("epochs and batch size must be positive"));
        }
        if cfg.alpha.is_some() && kind != ModelKind::Multitask {
            return Err(Error::Config(format!("--alpha applies to multitask runs, not {}", kind.name())));
        }
        if cfg.capsnet_checkpoint.is_some() && kind != ModelKind::FaceLevel {
            return Err(Error::Config(format!("--capsnet applies to face-level runs, not {}", kind.name())));
        }
        if cfg.pretrain.is_some() && kind != ModelKind::FaceLevel {
            return Err(Error::config("pretraining settings apply to face-level runs only"));
        }
        if cfg.pretrain.is_some() && cfg.capsnet_checkpoint.is_some() {
            return Err(Error::config("a pretrained capsule network makes pretraining settings meaningless"));
        }
        let p = cfg.pretrain.clone().unwrap_or_default();
        let pretrain = PretrainSettings {
            fit: FitConfig {
                epochs: p.epochs.unwrap_or(PRETRAIN_EPOCHS),
                batch_size: p.batch.unwrap_or(PRETRAIN_BATCH),
                seed,
                shuffle: true,
                optimizer: OptimizerConfig::adam(p.lr.unwrap_or(CAPSNET_LR))
                    .with_decay(CAPSNET_DECAY.0, CAPSNET_DECAY.1),
            },
            max_faces: p.max_faces.unwrap_or(PRETRAIN_MAX_FACES),
        };
        pretrain.fit.optimizer.validate()?;
        let head_kind = match kind {
            ModelKind::Multitask => HeadKind::MultiTask,
            _ => HeadKind::Cohesion,
        };
        let mut image = cfg.image.clone().unwrap_or_else(|| ImageModelConfig::desk(head_kind));
        image.kind = head_kind;
        if let Some(a) = cfg.alpha {
            image.alpha = a;
        }
        image.validate()?;
        let capsnet = cfg.capsnet.clone().unwrap_or_default();
        capsnet.capsule_layer()?;
        Ok(TrainSettings {
            kind,
            fit,
            pretrain,
            capsnet,
            face_head: cfg.face_head.unwrap_or_default(),
            image,
            capsnet_checkpoint: cfg.capsnet_checkpoint.clone(),
        })
    }
}
