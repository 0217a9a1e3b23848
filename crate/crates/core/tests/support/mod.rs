//! Oracles and check harnesses shared by the integration and acceptance tests.
#![allow(dead_code)]

use cohesion_core::capsnet::{CapsNet, CapsNetConfig, EmotionDistribution};
use cohesion_core::data::{GroupEmotion, NUM_EMOTIONS};
use cohesion_core::gradcheck::{grad_check_many, grad_check_report, ParamCheck};
use cohesion_core::graph::{Graph, Mode, Var};
use cohesion_core::heads::{
    Backbone, FaceHead, FaceHeadConfig, HeadKind, ImageModel, ImageModelConfig, ImageSample,
    PooledSample,
};
use cohesion_core::nn::{ParamStore, Session};
use cohesion_core::rng::seeded;
use cohesion_core::training::Learner;
use cohesion_core::{Result, Tensor};
use rand::Rng;

pub const POINTS: u64 = 10;
pub const TOLERANCE: f64 = 1e-4;
pub const EPS: f64 = 1e-5;

pub fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_f64(shape, &data).unwrap()
}

/// Fixed, generic weights that turn any tensor into a scalar.
fn project(g: &mut Graph<f64>, v: Var) -> Result<Var> {
    let shape = g.shape(v).to_vec();
    let n = shape.iter().product::<usize>();
    let w: Vec<f64> = (0..n).map(|i| (i as f64 * 0.731 + 0.2).sin() + 0.1).collect();
    let w = g.constant(&Tensor::from_f64(&shape, &w)?);
    let p = g.mul(v, w)?;
    g.sum_all(p)
}

pub struct Input {
    pub shape: Vec<usize>,
    pub lo: f64,
    pub hi: f64,
}

fn any(shape: &[usize]) -> Input {
    Input { shape: shape.to_vec(), lo: -2.0, hi: 2.0 }
}

fn positive(shape: &[usize]) -> Input {
    Input { shape: shape.to_vec(), lo: 0.5, hi: 2.0 }
}

type CaseFn = fn(&mut Graph<f64>, &[Var]) -> Result<Var>;

pub struct Case {
    pub name: &'static str,
    pub inputs: Vec<Input>,
    pub f: CaseFn,
}

fn case(name: &'static str, inputs: Vec<Input>, f: CaseFn) -> Case {
    Case { name, inputs, f }
}

/// Every differentiable primitive, each projected to a scalar.
pub fn primitive_cases() -> Vec<Case> {
    vec![
        case("add", vec![any(&[2, 3]), any(&[2, 3])], |g, v| {
            let y = g.add(v[0], v[1])?;
            project(g, y)
        }),
        case("add broadcast", vec![any(&[2, 3]), any(&[3])], |g, v| {
            let y = g.add(v[0], v[1])?;
            project(g, y)
        }),
        case("sub broadcast", vec![any(&[2, 3]), any(&[1, 3])], |g, v| {
            let y = g.sub(v[0], v[1])?;
            project(g, y)
        }),
        case("mul broadcast", vec![any(&[2, 3]), any(&[2, 1])], |g, v| {
            let y = g.mul(v[0], v[1])?;
            project(g, y)
        }),
        case("div", vec![any(&[2, 3]), positive(&[3])], |g, v| {
            let y = g.div(v[0], v[1])?;
            project(g, y)
        }),
        case("add_scalar", vec![any(&[5])], |g, v| {
            let y = g.add_scalar(v[0], 0.7)?;
            let y = g.square(y)?;
            project(g, y)
        }),
        case("scale", vec![any(&[5])], |g, v| {
            let y = g.scale(v[0], -1.3)?;
            project(g, y)
        }),
        case("relu", vec![any(&[3, 4])], |g, v| {
            let y = g.relu(v[0])?;
            project(g, y)
        }),
        case("sigmoid", vec![any(&[3, 4])], |g, v| {
            let y = g.sigmoid(v[0])?;
            project(g, y)
        }),
        case("swish", vec![any(&[3, 4])], |g, v| {
            let y = g.swish(v[0])?;
            project(g, y)
        }),
        case("ln", vec![positive(&[6])], |g, v| {
            let y = g.ln(v[0])?;
            project(g, y)
        }),
        case("square", vec![any(&[6])], |g, v| {
            let y = g.square(v[0])?;
            project(g, y)
        }),
        case("sqrt", vec![positive(&[6])], |g, v| {
            let y = g.sqrt(v[0])?;
            project(g, y)
        }),
        case("matmul", vec![any(&[3, 4]), any(&[4, 2])], |g, v| {
            let y = g.matmul(v[0], v[1])?;
            project(g, y)
        }),
        case("batched matmul", vec![any(&[2, 3, 4]), any(&[2, 4, 2])], |g, v| {
            let y = g.matmul(v[0], v[1])?;
            project(g, y)
        }),
        case("conv2d", vec![any(&[2, 2, 5, 5]), any(&[3, 2, 3, 3])], |g, v| {
            let y = g.conv2d(v[0], v[1], 1)?;
            project(g, y)
        }),
        case("conv2d stride 2", vec![any(&[1, 2, 7, 7]), any(&[2, 2, 3, 3])], |g, v| {
            let y = g.conv2d(v[0], v[1], 2)?;
            project(g, y)
        }),
        case("softmax last axis", vec![any(&[3, 4])], |g, v| {
            let y = g.softmax(v[0], 1)?;
            project(g, y)
        }),
        case("softmax first axis", vec![any(&[3, 4])], |g, v| {
            let y = g.softmax(v[0], 0)?;
            project(g, y)
        }),
        case("sum", vec![any(&[2, 3, 4])], |g, v| {
            let y = g.sum(v[0], 1)?;
            let y = g.square(y)?;
            project(g, y)
        }),
        case("mean", vec![any(&[2, 3, 4])], |g, v| {
            let y = g.mean(v[0], 0)?;
            let y = g.square(y)?;
            project(g, y)
        }),
        case("max", vec![any(&[2, 3, 4])], |g, v| {
            let y = g.max(v[0], 2)?;
            project(g, y)
        }),
        case("min", vec![any(&[2, 3, 4])], |g, v| {
            let y = g.min(v[0], 1)?;
            project(g, y)
        }),
        case("sum_all", vec![any(&[2, 3])], |g, v| {
            let y = g.square(v[0])?;
            g.sum_all(y)
        }),
        case("mean_all", vec![any(&[2, 3])], |g, v| {
            let y = g.square(v[0])?;
            g.mean_all(y)
        }),
        case("l2_norm", vec![any(&[3, 4])], |g, v| {
            let y = g.l2_norm(v[0], 1)?;
            project(g, y)
        }),
        case("reshape", vec![any(&[2, 6])], |g, v| {
            let y = g.reshape(v[0], &[3, 4])?;
            let y = g.square(y)?;
            project(g, y)
        }),
        case("permute", vec![any(&[2, 3, 4])], |g, v| {
            let y = g.permute(v[0], &[2, 0, 1])?;
            let y = g.square(y)?;
            project(g, y)
        }),
        case("concat", vec![any(&[2, 3]), any(&[2, 2])], |g, v| {
            let y = g.concat(&[v[0], v[1]], 1)?;
            let y = g.square(y)?;
            project(g, y)
        }),
        case("batch_norm train", vec![any(&[4, 3]), positive(&[3]), any(&[3])], |g, v| {
            let (y, _) = g.batch_norm_moments(v[0], v[1], v[2], &[0.0; 3], &[1.0; 3], Mode::Train)?;
            project(g, y)
        }),
        case("batch_norm train rank 3", vec![any(&[3, 2, 4]), positive(&[4]), any(&[4])], |g, v| {
            let (y, _) = g.batch_norm_moments(v[0], v[1], v[2], &[0.0; 4], &[1.0; 4], Mode::Train)?;
            project(g, y)
        }),
        case("batch_norm eval", vec![any(&[4, 3]), positive(&[3]), any(&[3])], |g, v| {
            let (y, _) =
                g.batch_norm_moments(v[0], v[1], v[2], &[0.1, -0.2, 0.3], &[0.5, 1.5, 2.0], Mode::Eval)?;
            project(g, y)
        }),
    ]
}

/// Worst relative error of `case` over [`POINTS`] seeded random points.
pub fn check_case(case: &Case) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..POINTS {
        let mut rng = seeded(1000 + seed);
        let points: Vec<Tensor<f64>> = case
            .inputs
            .iter()
            .map(|i| uniform(&mut rng, &i.shape, i.lo, i.hi))
            .collect();
        let err = grad_check_many(case.f, &points, EPS).unwrap();
        worst = worst.max(err);
    }
    worst
}

// ---- composite models -----------------------------------------------------

/// Eight-pixel faces, two primary capsule channels on a 2x2 grid.
///
/// Transforms start wide enough that upper capsules leave the quadratic
/// regime of squash, and the reconstruction term weighs more than the
/// training default. With the defaults many transform and decoder
/// components sit near 1e-9, under the one-ulp noise of a finite
/// difference on a unit-scale loss.
pub fn tiny_capsnet_config() -> CapsNetConfig {
    CapsNetConfig {
        transform_init_std: 3.0,
        recon_weight: 0.5,
        input_size: 8,
        conv_filters: 2,
        conv_kernel: 3,
        primary_kernel: 3,
        primary_stride: 2,
        primary_channels: 2,
        decoder_widths: vec![8],
        ..CapsNetConfig::default()
    }
}

/// Adds a trainable copy of `input` to a clone of `store`, so one check
/// covers both parameters and the model input.
/// Moves every bias off its zero init so ReLU kinks sit at random
/// distances from the probed point instead of exactly on it.
fn jitter_biases(store: &mut ParamStore<f64>, rng: &mut impl Rng) {
    for p in store.iter_mut() {
        if p.name.ends_with(".bias") {
            for x in p.tensor.data_mut() {
                *x += rng.gen_range(-0.3..0.3);
            }
        }
    }
}

fn with_input(store: &ParamStore<f64>, input: &Tensor<f64>) -> (ParamStore<f64>, cohesion_core::nn::ParamId) {
    let mut s = store.clone();
    let id = s.add("check.input", input.clone().with_requires_grad(true));
    (s, id)
}

const PER_PARAM: usize = 60;

/// Worst probed coordinate across seeds, kept for the failure message.
#[derive(Debug, Default)]
pub struct Worst {
    pub error: f64,
    pub at: Option<(u64, ParamCheck)>,
}

impl Worst {
    fn absorb(&mut self, seed: u64, report: Vec<ParamCheck>) {
        for c in report {
            if c.error >= self.error {
                self.error = c.error;
                self.at = Some((seed, c));
            }
        }
    }
}

pub fn check_capsnet_loss() -> Worst {
    let mut worst = Worst::default();
    for seed in 0..POINTS {
        let net = CapsNet::<f64>::new(tiny_capsnet_config(), seed).unwrap();
        let mut rng = seeded(2000 + seed);
        let faces = uniform(&mut rng, &[2, 1, 8, 8], 0.0, 1.0);
        let targets = [rng.gen_range(0..NUM_EMOTIONS), rng.gen_range(0..NUM_EMOTIONS)];
        let (mut store, input) = with_input(&net.store, &faces);
        jitter_biases(&mut store, &mut rng);
        let err = grad_check_report(
            &store,
            |s: &mut Session<f64>| Ok(net.capsule_loss(s, s.var(input), &targets)?.total),
            EPS,
            PER_PARAM,
            seed,
        )
        .unwrap();
        worst.absorb(seed, err);
    }
    worst
}

pub fn random_pooled(rng: &mut impl Rng, faces: usize) -> cohesion_core::heads::PooledEmotionFeature {
    let dists: Vec<EmotionDistribution> = (0..faces)
        .map(|_| {
            let raw: [f64; NUM_EMOTIONS] = core::array::from_fn(|_| rng.gen_range(0.01..1.0));
            EmotionDistribution::from_lengths(&raw)
        })
        .collect();
    cohesion_core::heads::pool_face_emotions(&dists).unwrap()
}

pub fn check_face_head() -> Worst {
    let mut worst = Worst::default();
    for seed in 0..POINTS {
        let head = FaceHead::<f64>::new(FaceHeadConfig::default(), seed).unwrap();
        let mut rng = seeded(3000 + seed);
        let batch: Vec<PooledSample> = (0..4)
            .map(|_| PooledSample {
                feature: {
                    let faces = rng.gen_range(2..6);
                    random_pooled(&mut rng, faces)
                },
                gcs: rng.gen_range(0.0..3.0),
                emotion: None,
            })
            .collect();
        let data: Vec<f64> = batch.iter().flat_map(|p| p.feature.flat()).collect();
        let x = Tensor::from_f64(&[4, 3, NUM_EMOTIONS], &data).unwrap();
        let truth: Vec<f64> = batch.iter().map(|p| p.gcs).collect();
        let (mut store, input) = with_input(&head.store, &x);
        jitter_biases(&mut store, &mut rng);
        let err = grad_check_report(
            &store,
            |s: &mut Session<f64>| {
                let y = head.forward(s, s.var(input))?;
                cohesion_core::heads::squared_error(&mut s.graph, y, &truth)
            },
            EPS,
            PER_PARAM,
            seed,
        )
        .unwrap();
        worst.absorb(seed, err);
    }
    worst
}

/// Desk-scale trunk over 128-wide features.
pub fn desk_feature_config(kind: HeadKind) -> ImageModelConfig {
    ImageModelConfig {
        backbone: Backbone::Features { width: 128 },
        ..ImageModelConfig::desk(kind)
    }
}

/// Small convolutional backbone at a reduced trunk width.
pub fn tiny_conv_config(kind: HeadKind) -> ImageModelConfig {
    ImageModelConfig {
        backbone: Backbone::Conv {
            height: 9,
            width: 11,
            channels: [2, 3, 4],
        },
        trunk: vec![6, 6, 6],
        ..ImageModelConfig::desk(kind)
    }
}

pub fn check_image_model(config: &ImageModelConfig) -> Worst {
    let mut worst = Worst::default();
    for seed in 0..POINTS {
        let model = ImageModel::<f64>::new(config.clone(), seed).unwrap();
        let mut rng = seeded(4000 + seed);
        let mut shape = vec![3];
        shape.extend(config.backbone.input_shape());
        let x = uniform(&mut rng, &shape, 0.0, 1.0);
        let per: usize = config.backbone.input_shape().iter().product();
        let batch: Vec<ImageSample> = (0..3)
            .map(|i| ImageSample {
                input: x.data()[i * per..(i + 1) * per].to_vec(),
                gcs: rng.gen_range(0.0..3.0),
                emotion: GroupEmotion::ALL[rng.gen_range(0..3)],
            })
            .collect();
        let refs: Vec<&ImageSample> = batch.iter().collect();
        let mut store = model.store.clone();
        jitter_biases(&mut store, &mut rng);
        let err = grad_check_report(
            &store,
            |s: &mut Session<f64>| Ok(model.loss(s, &refs)?.total),
            EPS,
            PER_PARAM,
            seed,
        )
        .unwrap();
        worst.absorb(seed, err);
    }
    worst
}

// ---- routing oracle ---------------------------------------------------------

/// Plain-loop routing by agreement over one example's predictions
/// `[lower, upper, dim]`. Returns the outputs and the couplings used at
/// each iteration.
pub fn reference_routing(u_hat: &[f64], l: usize, u: usize, d: usize, iters: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut b = vec![0.0; l * u];
    let mut v = vec![0.0; u * d];
    let mut history = Vec::new();
    for it in 0..iters {
        let mut c = vec![0.0; l * u];
        for i in 0..l {
            let m = (0..u).map(|j| b[i * u + j]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..u).map(|j| (b[i * u + j] - m).exp()).sum();
            for j in 0..u {
                c[i * u + j] = (b[i * u + j] - m).exp() / z;
            }
        }
        for j in 0..u {
            let s: Vec<f64> = (0..d)
                .map(|k| (0..l).map(|i| c[i * u + j] * u_hat[(i * u + j) * d + k]).sum())
                .collect();
            let n2: f64 = s.iter().map(|x| x * x).sum();
            let n = n2.sqrt();
            for k in 0..d {
                v[j * d + k] = s[k] * n / (1.0 + n2);
            }
        }
        history.push(c);
        if it + 1 < iters {
            for i in 0..l {
                for j in 0..u {
                    b[i * u + j] += (0..d).map(|k| u_hat[(i * u + j) * d + k] * v[j * d + k]).sum::<f64>();
                }
            }
        }
    }
    (v, history)
}

// ---- agreement oracles --------------------------------------------------------

/// Per-item variance through the pairwise identity
/// `var = sum_ij (x_i - x_j)^2 / (2 R^2)`, averaged over items; std likewise.
pub fn brute_variance(rows: &[Vec<u8>]) -> (f64, f64) {
    let (mut v, mut s) = (0.0, 0.0);
    for row in rows {
        let r = row.len() as f64;
        let mut acc = 0.0;
        for &a in row {
            for &b in row {
                acc += (a as f64 - b as f64).powi(2);
            }
        }
        let var = acc / (2.0 * r * r);
        v += var;
        s += var.sqrt();
    }
    (v / rows.len() as f64, s / rows.len() as f64)
}

/// Covariance eigenvalues (descending) and trace from nalgebra.
pub fn nalgebra_spectrum(rows: &[Vec<u8>]) -> (Vec<f64>, f64) {
    let n = rows.len();
    let r = rows[0].len();
    let x = nalgebra::DMatrix::from_fn(n, r, |i, j| rows[i][j] as f64);
    let means = x.row_mean();
    let centered = nalgebra::DMatrix::from_fn(n, r, |i, j| x[(i, j)] - means[j]);
    let cov = centered.transpose() * &centered / n as f64;
    let trace = cov.trace();
    let mut eig: Vec<f64> = nalgebra::SymmetricEigen::new(cov).eigenvalues.iter().copied().collect();
    eig.sort_by(|a, b| b.total_cmp(a));
    (eig, trace)
}

/// Weighted kappa from its definition: agreement over matched items
/// against agreement over every cross pairing of items.
pub fn brute_kappa(a: &[u8], b: &[u8], levels: usize, quadratic: bool) -> f64 {
    let top = (levels - 1) as f64;
    let w = |x: u8, y: u8| {
        let d = (x as f64 - y as f64).abs() / top;
        if quadratic {
            1.0 - d * d
        } else {
            1.0 - d
        }
    };
    let n = a.len() as f64;
    let p_o = a.iter().zip(b).map(|(&x, &y)| w(x, y)).sum::<f64>() / n;
    let mut p_e = 0.0;
    for &x in a {
        for &y in b {
            p_e += w(x, y);
        }
    }
    p_e /= n * n;
    (p_o - p_e) / (1.0 - p_e)
}

pub fn random_annotations(rng: &mut impl Rng, items: usize, raters: usize) -> Vec<Vec<u8>> {
    (0..items)
        .map(|_| {
            // A shared latent level keeps the raters correlated.
            let base: i32 = rng.gen_range(0..4);
            (0..raters)
                .map(|_| (base + rng.gen_range(-1..=1)).clamp(0, 3) as u8)
                .collect()
        })
        .collect()
}
