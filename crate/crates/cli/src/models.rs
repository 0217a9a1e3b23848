//! The three trainable model families and their checkpoint mapping.

use std::path::Path;

use cohesion_core::capsnet::{CapsNet, CapsNetConfig};
use cohesion_core::data::{bilinear_matrix, FaceBox, RgbImage};
use cohesion_core::graph::Var;
use cohesion_core::heads::{saliency_map, FaceHead, FaceHeadConfig, FaceLevelModel, ImageModel, ImageModelConfig, InputScorer};
use cohesion_core::nn::{ParamStore, Session};
use cohesion_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{capture_params, restore_params, Checkpoint, Dtype, StoredOptimizer};
use crate::error::{Error, Result};

/// Precision of every model the command line trains.
pub type Float = f32;

/// Serialized into checkpoints so a model can be rebuilt before its
/// parameters are restored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "kebab-case")]
pub enum Architecture {
    Capsnet { capsnet: CapsNetConfig },
    FaceLevel { capsnet: CapsNetConfig, head: FaceHeadConfig },
    Image { image: ImageModelConfig },
}

// Models are few and long-lived; boxing buys nothing.
#[allow(clippy::large_enum_variant)]
#[derive(Debug, Clone)]
pub enum Model {
    Capsnet(CapsNet<Float>),
    FaceLevel(FaceLevelModel<Float>),
    Image(ImageModel<Float>),
}

const CAPSNET_PREFIX: &str = "capsnet.";
const HEAD_PREFIX: &str = "head.";

impl Model {
    pub fn build(arch: &Architecture, seed: u64) -> Result<Self> {
        Ok(match arch {
            Architecture::Capsnet { capsnet } => Model::Capsnet(CapsNet::new(capsnet.clone(), seed)?),
            Architecture::FaceLevel { capsnet, head } => Model::FaceLevel(FaceLevelModel {
                capsnet: CapsNet::new(capsnet.clone(), seed)?,
                head: FaceHead::new(*head, seed)?,
            }),
            Architecture::Image { image } => Model::Image(ImageModel::new(image.clone(), seed)?),
        })
    }

    pub fn architecture(&self) -> Architecture {
        match self {
            Model::Capsnet(c) => Architecture::Capsnet {
                capsnet: c.config.clone(),
            },
            Model::FaceLevel(f) => Architecture::FaceLevel {
                capsnet: f.capsnet.config.clone(),
                head: f.head.config,
            },
            Model::Image(m) => Architecture::Image {
                image: m.config.clone(),
            },
        }
    }

    pub fn fingerprint(&self) -> String {
        match self {
            Model::Capsnet(c) => c.fingerprint(),
            Model::FaceLevel(f) => f.fingerprint(),
            Model::Image(m) => m.fingerprint(),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Model::Capsnet(_) => "capsnet",
            Model::FaceLevel(_) => "face-level",
            Model::Image(_) => "image-level",
        }
    }

    pub fn to_checkpoint(&self, seed: u64, metrics: Vec<(String, f64)>, optimizer: Option<StoredOptimizer>) -> Checkpoint {
        let params = match self {
            Model::Capsnet(c) => capture_params(&c.store, ""),
            Model::FaceLevel(f) => {
                let mut p = capture_params(&f.capsnet.store, CAPSNET_PREFIX);
                p.extend(capture_params(&f.head.store, HEAD_PREFIX));
                p
            }
            Model::Image(m) => capture_params(&m.store, ""),
        };
        Checkpoint {
            dtype: Dtype::of::<Float>(),
            fingerprint: self.fingerprint(),
            architecture: serde_json::to_string(&self.architecture()).expect("architecture serializes"),
            seed,
            metrics,
            params,
            optimizer,
        }
    }

    /// Rebuilds the architecture recorded in `c` and installs its parameters.
    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let arch: Architecture = serde_json::from_str(&c.architecture)
            .map_err(|e| Error::Architecture(format!("unreadable architecture record: {e}")))?;
        let mut model = Model::build(&arch, c.seed)?;
        if model.fingerprint() != c.fingerprint {
            return Err(Error::Architecture(format!(
                "fingerprint {:?} does not describe architecture {:?}",
                c.fingerprint,
                model.fingerprint()
            )));
        }
        match &mut model {
            Model::Capsnet(m) => restore_params(&mut m.store, &c.params, "")?,
            Model::FaceLevel(f) => {
                restore_params(&mut f.capsnet.store, &c.params, CAPSNET_PREFIX)?;
                restore_params(&mut f.head.store, &c.params, HEAD_PREFIX)?;
            }
            Model::Image(m) => restore_params(&mut m.store, &c.params, "")?,
        }
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<(Self, Checkpoint)> {
        let c = Checkpoint::read(path)?;
        Ok((Model::from_checkpoint(&c)?, c))
    }

    /// Normalized `|d score / d pixel|` over the full image, `height x width`.
    pub fn saliency(&self, image: &RgbImage, faces: &[FaceBox]) -> Result<Vec<f64>> {
        let input = Tensor::<Float>::from_f64(&[3, image.height, image.width], &image.to_planar())?;
        let map = match self {
            Model::Capsnet(c) => saliency_map(&GrayCrop(c), &input)?,
            Model::FaceLevel(f) => saliency_map(&f.image_scorer(faces), &input)?,
            Model::Image(m) => saliency_map(m, &input)?,
        };
        Ok(map.data().iter().map(|&v| v as f64).collect())
    }
}

/// Capsule network scored on a whole RGB image: luminance, then a
/// bilinear resize to the network input, both as graph products.
struct GrayCrop<'a>(&'a CapsNet<Float>);

impl InputScorer<Float> for GrayCrop<'_> {
    fn params(&self) -> Option<&ParamStore<Float>> {
        Some(&self.0.store)
    }

    fn score(&self, s: &mut Session<Float>, input: Var) -> cohesion_core::Result<Var> {
        let shape = s.graph.shape(input).to_vec();
        let (h, w) = (shape[1], shape[2]);
        let size = self.0.config.input_size;
        let lum = s.graph.constant(&Tensor::from_f64(&[1, 3], &[0.299, 0.587, 0.114])?);
        let flat = s.graph.reshape(input, &[3, h * w])?;
        let gray = s.graph.matmul(lum, flat)?;
        let gray = s.graph.reshape(gray, &[h, w])?;
        let ry = s.graph.constant(&Tensor::from_f64(&[size, h], &bilinear_matrix(size, h))?);
        let rx = bilinear_matrix(size, w);
        let mut rxt = vec![0.0; w * size];
        for o in 0..size {
            for x in 0..w {
                rxt[x * size + o] = rx[o * w + x];
            }
        }
        let rxt = s.graph.constant(&Tensor::from_f64(&[w, size], &rxt)?);
        let crop = s.graph.matmul(ry, gray)?;
        let crop = s.graph.matmul(crop, rxt)?;
        self.0.score(s, crop)
    }
}
