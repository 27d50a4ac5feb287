//! Adam with bias correction, operating out-of-place on [`ParamSet`]s.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Gradients;
use crate::params::ParamSet;
use crate::tensor::Tensor;

/// First/second moment accumulators mirroring a [`ParamSet`], plus the
/// step counter used for bias correction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    first: ParamSet,
    second: ParamSet,
    step: u64,
}

impl AdamState {
    /// Zeroed accumulators shaped like `params`.
    pub fn new(params: &ParamSet) -> Self {
        let mut first = ParamSet::new();
        let mut second = ParamSet::new();
        for (name, t) in params.iter() {
            first.insert(name.clone(), Tensor::zeros(t.shape().to_vec())).expect("unique");
            second.insert(name.clone(), Tensor::zeros(t.shape().to_vec())).expect("unique");
        }
        AdamState { first, second, step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// Adam hyper-parameters; `β1 = 0.9`, `β2 = 0.999`, `ε = 1e-8` unless
/// overridden.
#[derive(Debug, Clone, Copy)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamParams {
    pub fn with_lr(lr: f64) -> Self {
        AdamParams { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One bias-corrected Adam update. Inputs are untouched; the returned
/// state's counter is one higher than the input's.
pub fn adam_step(
    params: &ParamSet,
    grads: &Gradients,
    state: &AdamState,
    hp: AdamParams,
) -> Result<(ParamSet, AdamState)> {
    if params.len() != grads.len() {
        return Err(Error::shape(format!(
            "adam_step: {} params but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    let t = state.step + 1;
    let bc1 = 1.0 - hp.beta1.powi(t as i32);
    let bc2 = 1.0 - hp.beta2.powi(t as i32);

    let mut out = ParamSet::new();
    let mut first = ParamSet::new();
    let mut second = ParamSet::new();
    for (name, p) in params.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::shape(format!("adam_step: missing gradient for {name}")))?;
        let m = state
            .first
            .get(name)
            .ok_or_else(|| Error::shape(format!("adam_step: state missing {name}")))?;
        let v = state.second.get(name).expect("first/second built together");
        if g.shape() != p.shape() || m.shape() != p.shape() {
            return Err(Error::shape(format!("adam_step: shape mismatch for {name}")));
        }

        let n = p.numel();
        let mut new_p = Vec::with_capacity(n);
        let mut new_m = Vec::with_capacity(n);
        let mut new_v = Vec::with_capacity(n);
        for i in 0..n {
            let gi = g.data()[i];
            let mi = hp.beta1 * m.data()[i] + (1.0 - hp.beta1) * gi;
            let vi = hp.beta2 * v.data()[i] + (1.0 - hp.beta2) * gi * gi;
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            new_p.push(p.data()[i] - hp.lr * m_hat / (v_hat.sqrt() + hp.eps));
            new_m.push(mi);
            new_v.push(vi);
        }
        out.insert(name.clone(), Tensor::new(p.shape().to_vec(), new_p)?)?;
        first.insert(name.clone(), Tensor::new(p.shape().to_vec(), new_m)?)?;
        second.insert(name.clone(), Tensor::new(p.shape().to_vec(), new_v)?)?;
    }
    Ok((out, AdamState { first, second, step: t }))
}
