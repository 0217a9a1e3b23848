//! Central finite-difference gradient checking in 64-bit precision.

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::index::sample;

use crate::error::Result;
use crate::graph::{Graph, Mode, Var};
use crate::nn::{ParamStore, Session};
use crate::rng::seeded;
use crate::tensor::Tensor;

/// Relative error `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Max relative error between the analytic gradient of a scalar function
/// and its central differences `(f(x+eps) - f(x-eps)) / (2 eps)`.
pub fn grad_check<F>(f: F, point: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    grad_check_many(
        |g: &mut Graph<f64>, vars: &[Var]| f(g, vars[0]),
        core::slice::from_ref(point),
        eps,
    )
}

/// [`grad_check`] over several input tensors at once.
pub fn grad_check_many<F>(f: F, points: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t)).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.scalar(out))
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = points.iter().map(|t| g.leaf(t)).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor<f64>> = points.to_vec();
    for (which, &v) in vars.iter().enumerate() {
        let analytic = g.grad(v).map(|s| s.to_vec()).unwrap_or_else(|| alloc::vec![0.0; points[which].len()]);
        for (i, &a) in analytic.iter().enumerate() {
            let x0 = points[which].data()[i];
            probe[which].data_mut()[i] = x0 + eps;
            let up = eval(&probe)?;
            probe[which].data_mut()[i] = x0 - eps;
            let down = eval(&probe)?;
            probe[which].data_mut()[i] = x0;
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max(relative_error(a, numeric));
        }
    }
    Ok(worst)
}

/// Worst probed coordinate of one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub error: f64,
}

/// Max relative error of the gradient of `loss` w.r.t. the trainable
/// parameters of `store`, with the graph built in train mode.
///
/// Parameters with more than `per_param` scalars are probed at that many
/// coordinates drawn with `seed`; pass `usize::MAX` to probe everything.
pub fn grad_check_params<F>(store: &ParamStore<f64>, loss: F, eps: f64, per_param: usize, seed: u64) -> Result<f64>
where
    F: Fn(&mut Session<f64>) -> Result<Var>,
{
    let report = grad_check_report(store, loss, eps, per_param, seed)?;
    Ok(report.iter().fold(0.0, |w, c| w.max(c.error)))
}

/// Per-parameter detail behind [`grad_check_params`], in store order.
pub fn grad_check_report<F>(
    store: &ParamStore<f64>,
    loss: F,
    eps: f64,
    per_param: usize,
    seed: u64,
) -> Result<Vec<ParamCheck>>
where
    F: Fn(&mut Session<f64>) -> Result<Var>,
{
    let mut analytic = store.clone();
    analytic.zero_grads();
    let mut s = Session::new(store, Mode::Train);
    let out = loss(&mut s)?;
    s.graph.backward(out)?;
    s.finish(&mut analytic)?;

    let eval = |probe: &ParamStore<f64>| -> Result<f64> {
        let mut s = Session::frozen(probe, Mode::Train);
        let out = loss(&mut s)?;
        Ok(s.graph.scalar(out))
    };

    let mut rng = seeded(seed);
    let mut probe = store.clone();
    let mut report = Vec::new();
    for (id, (param, grads)) in store.ids().zip(store.iter().zip(analytic.iter())) {
        if !param.tensor.requires_grad() {
            continue;
        }
        let n = param.tensor.len();
        let coords: Vec<usize> = if n <= per_param {
            (0..n).collect()
        } else {
            sample(&mut rng, n, per_param).into_vec()
        };
        let mut worst = ParamCheck {
            name: param.name.clone(),
            index: 0,
            analytic: 0.0,
            numeric: 0.0,
            error: 0.0,
        };
        for i in coords {
            let a = grads.tensor.grad().map_or(0.0, |g| g[i]);
            let x0 = param.tensor.data()[i];
            probe.get_mut(id).data_mut()[i] = x0 + eps;
            let up = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = x0 - eps;
            let down = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = x0;
            let numeric = (up - down) / (2.0 * eps);
            let error = relative_error(a, numeric);
            if error >= worst.error {
                worst = ParamCheck {
                    name: worst.name,
                    index: i,
                    analytic: a,
                    numeric,
                    error,
                };
            }
        }
        report.push(worst);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::from_f64(&[4], &[0.3, -1.2, 5.0, 2.0]).unwrap();
        let err = grad_check(|g, x| g.sum_all(x), &x, 1e-5).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn detects_wrong_gradient() {
        // |x| via sqrt(x^2) is fine; a function whose value ignores the
        // tracked input entirely still reports zero error.
        let x = Tensor::from_f64(&[2], &[0.3, -1.2]).unwrap();
        let err = grad_check(
            |g, x| {
                let sq = g.square(x)?;
                g.sum_all(sq)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8);
        assert!(relative_error(1.0, 2.0) > 0.4);
    }
}
