//! Parameter storage, training sessions and the layers shared by every model.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{blend, Graph, Mode, Moments, Var};
use crate::real::Real;
use crate::rng::truncated_normal;
use crate::tensor::Tensor;

/// Index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub tensor: Tensor<T>,
}

/// Named parameters of one model, in creation order.
///
/// Trainable parameters have `requires_grad` set; batch-norm running
/// statistics are stored alongside them with it cleared.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            tensor,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].tensor
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.tensor)
    }

    /// Number of trainable scalars whose name starts with `prefix`.
    pub fn count_trainable(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.tensor.requires_grad() && p.name.starts_with(prefix))
            .map(|p| p.tensor.len())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                })
                .collect(),
        }
    }

    /// Replaces every value with the same-named, same-shaped entry of `other`.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::config("parameter count mismatch"));
        }
        for (mine, theirs) in self.params.iter_mut().zip(&other.params) {
            if mine.name != theirs.name || mine.tensor.shape() != theirs.tensor.shape() {
                return Err(Error::Config(alloc::format!(
                    "parameter {} {:?} does not match {} {:?}",
                    mine.name,
                    mine.tensor.shape(),
                    theirs.name,
                    theirs.tensor.shape()
                )));
            }
            mine.tensor.data_mut().copy_from_slice(theirs.tensor.data());
        }
        Ok(())
    }
}

struct PendingStats<T> {
    mean: ParamId,
    var: ParamId,
    moments: Moments<T>,
}

/// A graph with one model's parameters bound into it.
pub struct Session<T> {
    pub graph: Graph<T>,
    vars: Vec<Var>,
    mode: Mode,
    pending: Vec<PendingStats<T>>,
}

impl<T: Real> Session<T> {
    /// Trainable parameters enter as leaves.
    pub fn new(store: &ParamStore<T>, mode: Mode) -> Self {
        Self::bind(store, mode, true)
    }

    /// Every parameter enters as a constant.
    pub fn frozen(store: &ParamStore<T>, mode: Mode) -> Self {
        Self::bind(store, mode, false)
    }

    fn bind(store: &ParamStore<T>, mode: Mode, track: bool) -> Self {
        let mut graph = Graph::new();
        let vars = store
            .iter()
            .map(|p| {
                if track && p.tensor.requires_grad() {
                    graph.leaf(&p.tensor)
                } else {
                    graph.constant(&p.tensor)
                }
            })
            .collect();
        Session {
            graph,
            vars,
            mode,
            pending: Vec::new(),
        }
    }

    /// Continues an existing graph with parameters already bound as `vars`.
    pub fn adopt(graph: Graph<T>, vars: Vec<Var>, mode: Mode) -> Self {
        Session {
            graph,
            vars,
            mode,
            pending: Vec::new(),
        }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Adds leaf gradients into the store and folds batch moments into the
    /// running statistics.
    pub fn finish(self, store: &mut ParamStore<T>) -> Result<()> {
        for (i, &v) in self.vars.iter().enumerate() {
            if let Some(g) = self.graph.grad(v) {
                store.params[i].tensor.accumulate_grad(g)?;
            }
        }
        for p in self.pending {
            blend(store.get_mut(p.mean).data_mut(), &p.moments.mean);
            blend(store.get_mut(p.var).data_mut(), &p.moments.var);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Activation {
    Relu,
    Swish,
}

impl Activation {
    pub fn apply<T: Real>(self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Swish => g.swish(x),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Swish => "swish",
        }
    }
}

/// Truncated-normal fan-in initialization (He scaling).
pub fn init_weights<T: Real>(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let std = Float::sqrt(2.0 / fan_in as f64);
    let data = (0..shape.iter().product::<usize>())
        .map(|_| T::lit(truncated_normal(rng, std)))
        .collect();
    Tensor::new(shape, data).expect("init shape").with_requires_grad(true)
}

fn trainable_zeros<T: Real>(shape: &[usize]) -> Tensor<T> {
    Tensor::zeros(shape).with_requires_grad(true)
}

/// Fully connected layer `x W + b` over the last axis.
#[derive(Debug, Clone)]
pub struct Dense {
    pub weight: ParamId,
    /// Absent when a normalization layer follows; its shift would cancel
    /// the bias exactly and leave it with a zero gradient.
    pub bias: Option<ParamId>,
    pub inputs: usize,
    pub outputs: usize,
}

impl Dense {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let mut dense = Self::without_bias(store, name, inputs, outputs, rng);
        dense.bias = Some(store.add(name.to_string() + ".bias", trainable_zeros(&[outputs])));
        dense
    }

    /// `x W` only, for layers feeding a batch norm.
    pub fn without_bias<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(
            name.to_string() + ".weight",
            init_weights(rng, &[inputs, outputs], inputs),
        );
        Dense {
            weight,
            bias: None,
            inputs,
            outputs,
        }
    }

    /// Accepts `[.., inputs]` of any rank and returns `[.., outputs]`.
    pub fn forward<T: Real>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let shape = s.graph.shape(x).to_vec();
        if shape.last() != Some(&self.inputs) {
            return Err(Error::dim("dense", &shape, &[self.inputs, self.outputs]));
        }
        let rows = shape.iter().product::<usize>() / self.inputs;
        let flat = if shape.len() == 2 {
            x
        } else {
            s.graph.reshape(x, &[rows, self.inputs])?
        };
        let w = s.var(self.weight);
        let mut y = s.graph.matmul(flat, w)?;
        if let Some(bias) = self.bias {
            let b = s.var(bias);
            y = s.graph.add(y, b)?;
        }
        if shape.len() == 2 {
            Ok(y)
        } else {
            let mut out = shape;
            *out.last_mut().unwrap() = self.outputs;
            s.graph.reshape(y, &out)
        }
    }
}

/// Valid convolution with a per-filter bias.
#[derive(Debug, Clone)]
pub struct Conv {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub filters: usize,
}

impl Conv {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        filters: usize,
        size: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let kernel = store.add(
            name.to_string() + ".kernel",
            init_weights(rng, &[filters, channels, size, size], channels * size * size),
        );
        let bias = store.add(name.to_string() + ".bias", trainable_zeros(&[filters]));
        Conv {
            kernel,
            bias,
            stride,
            filters,
        }
    }

    pub fn forward<T: Real>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let k = s.var(self.kernel);
        let y = s.graph.conv2d(x, k, self.stride)?;
        let b = s.var(self.bias);
        let b = s.graph.reshape(b, &[self.filters, 1, 1])?;
        s.graph.add(y, b)
    }
}

/// Batch norm over the last axis with stored running statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, features: usize) -> Self {
        BatchNorm {
            gamma: store.add(
                name.to_string() + ".gamma",
                Tensor::full(&[features], T::one()).with_requires_grad(true),
            ),
            beta: store.add(name.to_string() + ".beta", trainable_zeros(&[features])),
            running_mean: store.add(name.to_string() + ".running_mean", Tensor::zeros(&[features])),
            running_var: store.add(
                name.to_string() + ".running_var",
                Tensor::full(&[features], T::one()),
            ),
        }
    }

    pub fn forward<T: Real>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let mean = s.graph.value(s.var(self.running_mean)).to_vec();
        let var = s.graph.value(s.var(self.running_var)).to_vec();
        let mode = s.mode;
        let (gamma, beta) = (s.var(self.gamma), s.var(self.beta));
        let (y, moments) = s.graph.batch_norm_moments(x, gamma, beta, &mean, &var, mode)?;
        if let Some(moments) = moments {
            s.pending.push(PendingStats {
                mean: self.running_mean,
                var: self.running_var,
                moments,
            });
        }
        Ok(y)
    }
}

/// `[n]` one-hot rows for class indices.
pub fn one_hot<T: Real>(classes: &[usize], width: usize) -> Result<Tensor<T>> {
    let mut data = vec![T::zero(); classes.len() * width];
    for (row, &c) in classes.iter().enumerate() {
        if c >= width {
            return Err(Error::Index { index: c, len: width });
        }
        data[row * width + c] = T::one();
    }
    Tensor::new(&[classes.len(), width], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn dense_applies_to_rows_of_higher_rank() {
        let mut store = ParamStore::<f64>::new();
        let dense = Dense::new(&mut store, "d", 7, 16, &mut seeded(1));
        let mut s = Session::new(&store, Mode::Train);
        let x = s.graph.constant(&Tensor::full(&[4, 3, 7], 0.5));
        let y = dense.forward(&mut s, x).unwrap();
        assert_eq!(s.graph.shape(y), &[4, 3, 16]);
        let bad = s.graph.constant(&Tensor::full(&[4, 6], 0.5));
        assert!(dense.forward(&mut s, bad).is_err());
    }

    #[test]
    fn session_updates_running_stats_only_in_training() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm::new(&mut store, "bn", 1);
        let x = Tensor::from_f64(&[2, 1], &[1.0, 3.0]).unwrap();
        let mut s = Session::new(&store, Mode::Eval);
        let xv = s.graph.constant(&x);
        bn.forward(&mut s, xv).unwrap();
        s.finish(&mut store).unwrap();
        assert_eq!(store.get(bn.running_mean).data(), &[0.0]);

        let mut s = Session::new(&store, Mode::Train);
        let xv = s.graph.constant(&x);
        bn.forward(&mut s, xv).unwrap();
        s.finish(&mut store).unwrap();
        assert!((store.get(bn.running_mean).data()[0] - 0.2).abs() < 1e-12);
        assert!((store.get(bn.running_var).data()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn one_hot_rejects_out_of_range() {
        assert!(one_hot::<f64>(&[0, 3], 3).is_err());
        let t = one_hot::<f64>(&[2], 3).unwrap();
        assert_eq!(t.data(), &[0.0, 0.0, 1.0]);
    }
}
