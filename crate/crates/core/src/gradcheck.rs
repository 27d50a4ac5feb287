//! Central-finite-difference verification of the reverse-mode engine.
//!
//! The numeric route perturbs one parameter element at a time and never
//! touches the analytic backward pass, so the two stay independent.

use indexmap::IndexMap;

use crate::error::Result;
use crate::graph::{Gradients, Graph, NodeId};
use crate::params::ParamSet;
use crate::tensor::Tensor;

/// Builds the scalar loss node for a set of registered parameters. The
/// closure must be a pure function of the parameter values (inputs are
/// captured inside).
pub type LossBuilder = Box<dyn Fn(&mut Graph, &IndexMap<String, NodeId>) -> Result<NodeId>>;

/// How many fresh seeds to try when the sampled point sits too close to
/// a ReLU kink or pooling tie.
const MAX_RESAMPLES: usize = 10;

fn eval_loss(params: &ParamSet, build: &LossBuilder) -> Result<f64> {
    let mut g = Graph::new();
    let ids = params.register(&mut g)?;
    let loss = build(&mut g, &ids)?;
    g.value(loss).scalar_value()
}

/// Central finite differences of the loss with respect to every
/// parameter element, step `eps`.
pub fn finite_diff_grads(params: &ParamSet, build: &LossBuilder, eps: f64) -> Result<Gradients> {
    let mut out = Vec::new();
    for (name, tensor) in params.iter() {
        let mut grad = vec![0.0; tensor.numel()];
        for i in 0..tensor.numel() {
            let mut plus = params.clone();
            let mut minus = params.clone();
            nudge(&mut plus, name, i, eps);
            nudge(&mut minus, name, i, -eps);
            let lp = eval_loss(&plus, build)?;
            let lm = eval_loss(&minus, build)?;
            grad[i] = (lp - lm) / (2.0 * eps);
        }
        out.push((name.clone(), Tensor::new(tensor.shape().to_vec(), grad)?));
    }
    Ok(out.into_iter().collect())
}

fn nudge(params: &mut ParamSet, name: &str, idx: usize, delta: f64) {
    params
        .get_mut(name)
        .expect("name comes from iterating the set")
        .data_mut()[idx] += delta;
}

/// Worst element-wise relative error `|a - n| / max(1, |a|, |n|)`.
pub fn max_rel_error(analytic: &Gradients, numeric: &Gradients) -> f64 {
    let mut worst = 0.0_f64;
    for (name, a) in analytic.iter() {
        let n = numeric.get(name).expect("same parameter keys");
        for (&av, &nv) in a.data().iter().zip(n.data()) {
            let denom = 1.0_f64.max(av.abs()).max(nv.abs());
            worst = worst.max((av - nv).abs() / denom);
        }
    }
    worst
}

/// Compares analytic and numeric gradients for a seeded model.
///
/// `make_model(seed)` samples parameters and fixed inputs; if the
/// forward pass lands within `10 * eps` of a ReLU kink or pooling tie
/// the point is resampled with a stepped seed, up to [`MAX_RESAMPLES`]
/// times, after which the check runs at the last point regardless.
pub fn grad_check<F>(make_model: F, seed: u64, eps: f64) -> Result<f64>
where
    F: Fn(u64) -> Result<(ParamSet, LossBuilder)>,
{
    let mut s = seed;
    for attempt in 0..=MAX_RESAMPLES {
        let (params, build) = make_model(s)?;
        let mut g = Graph::new();
        let ids = params.register(&mut g)?;
        let loss = build(&mut g, &ids)?;
        if g.min_kink_gap() <= 10.0 * eps && attempt < MAX_RESAMPLES {
            s = s.wrapping_add(0x9e37_79b9_7f4a_7c15);
            continue;
        }
        let analytic = g.backward(loss)?;
        let numeric = finite_diff_grads(&params, &build, eps)?;
        return Ok(max_rel_error(&analytic, &numeric));
    }
    unreachable!("loop returns on the last attempt");
}
