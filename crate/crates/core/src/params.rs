//! Named collections of trainable tensors.
//!
//! A [`ParamSet`] is an immutable snapshot: optimizer steps build new
//! sets rather than mutating, which is what lets the meta-learners keep
//! the pre-adaptation parameters intact.

use indexmap::IndexMap;
use rand::distributions::{Distribution, Uniform};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, NodeId};
use crate::tensor::Tensor;

/// Ordered map from parameter name to tensor. Iteration order follows
/// insertion order and is stable across runs with the same construction
/// sequence.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamSet {
    entries: IndexMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name {name}")));
        }
        self.entries.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub(crate) fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn n_values(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    /// Registers every tensor on a graph, returning node handles in
    /// iteration order keyed by name.
    pub fn register(&self, graph: &mut Graph) -> Result<IndexMap<String, NodeId>> {
        let mut ids = IndexMap::new();
        for (name, tensor) in self.iter() {
            ids.insert(name.clone(), graph.param(name, tensor.clone())?);
        }
        Ok(ids)
    }

    /// Builds a new set with `other`'s entries added under a prefix.
    pub fn merged(prefix_a: &str, a: &ParamSet, prefix_b: &str, b: &ParamSet) -> Result<ParamSet> {
        let mut out = ParamSet::new();
        for (name, t) in a.iter() {
            out.insert(format!("{prefix_a}{name}"), t.clone())?;
        }
        for (name, t) in b.iter() {
            out.insert(format!("{prefix_b}{name}"), t.clone())?;
        }
        Ok(out)
    }

    /// Extracts the entries under a prefix, stripping it.
    pub fn strip_prefix(&self, prefix: &str) -> ParamSet {
        let mut out = ParamSet::new();
        for (name, t) in self.iter() {
            if let Some(stripped) = name.strip_prefix(prefix) {
                out.insert(stripped.to_string(), t.clone()).expect("unique names");
            }
        }
        out
    }

    /// Largest absolute element-wise difference against another set with
    /// identical keys and shapes.
    pub fn max_abs_diff(&self, other: &ParamSet) -> Result<f64> {
        if self.len() != other.len() {
            return Err(Error::shape("param sets have different sizes"));
        }
        let mut worst = 0.0_f64;
        for (name, t) in self.iter() {
            let o = other
                .get(name)
                .ok_or_else(|| Error::shape(format!("missing parameter {name}")))?;
            if o.shape() != t.shape() {
                return Err(Error::shape(format!("shape mismatch for {name}")));
            }
            for (a, b) in t.data().iter().zip(o.data()) {
                worst = worst.max((a - b).abs());
            }
        }
        Ok(worst)
    }

    /// Serializes to the checkpoint JSON document: name -> {shape, data}.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<ParamSet> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Uniform Glorot initialisation: weights drawn from
/// `±sqrt(6 / (fan_in + fan_out))`, biases zero.
pub fn glorot_uniform(shape: Vec<usize>, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound);
    let numel = shape.iter().product();
    let data = (0..numel).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape, data).expect("shape/data agree by construction")
}

/// One out-of-place gradient-descent step: `p' = p - lr * g`.
///
/// The input set is left untouched; keys of `grads` must match exactly.
pub fn sgd_step(params: &ParamSet, grads: &Gradients, lr: f64) -> Result<ParamSet> {
    if params.len() != grads.len() {
        return Err(Error::shape(format!(
            "sgd_step: {} params but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    let mut out = ParamSet::new();
    for (name, p) in params.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::shape(format!("sgd_step: missing gradient for {name}")))?;
        if g.shape() != p.shape() {
            return Err(Error::shape(format!("sgd_step: gradient shape mismatch for {name}")));
        }
        let data = p.data().iter().zip(g.data()).map(|(p, g)| p - lr * g).collect();
        out.insert(name.clone(), Tensor::new(p.shape().to_vec(), data)?)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grads_of(pairs: &[(&str, Tensor)]) -> Gradients {
        pairs
            .iter()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect()
    }

    #[test]
    fn sgd_matches_hand_arithmetic() {
        // p = 1.0, g = 0.5, lr = 0.4 -> 0.8
        let mut p = ParamSet::new();
        p.insert("w", Tensor::scalar(1.0)).unwrap();
        let g = grads_of(&[("w", Tensor::scalar(0.5))]);
        let next = sgd_step(&p, &g, 0.4).unwrap();
        assert!((next.get("w").unwrap().data()[0] - 0.8).abs() < 1e-15);
        // input unchanged
        assert_eq!(p.get("w").unwrap().data()[0], 1.0);
    }

    #[test]
    fn sgd_zero_gradient_is_identity() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::new(vec![2], vec![1.5, -2.0]).unwrap()).unwrap();
        let g = grads_of(&[("w", Tensor::zeros(vec![2]))]);
        let next = sgd_step(&p, &g, 0.4).unwrap();
        assert_eq!(next.get("w").unwrap(), p.get("w").unwrap());
    }

    #[test]
    fn two_steps_differ_from_one_summed_step_unless_equal() {
        // With g1 != g2 plain SGD is path-independent (linear), so the
        // counterexample needs the gradient to depend on the iterate:
        // g(p) = p. Two steps: p(1-lr)^2; one summed step: p(1-2lr).
        let lr = 0.4_f64;
        let p0 = 1.0_f64;
        let two_steps = p0 * (1.0 - lr) * (1.0 - lr);
        let summed = p0 * (1.0 - 2.0 * lr);
        assert!((two_steps - summed).abs() > 0.1);

        // And when the two gradients are equal constants the paths agree.
        let mut p = ParamSet::new();
        p.insert("w", Tensor::scalar(p0)).unwrap();
        let g = grads_of(&[("w", Tensor::scalar(0.3))]);
        let a = sgd_step(&sgd_step(&p, &g, lr).unwrap(), &g, lr).unwrap();
        let summed_g = grads_of(&[("w", Tensor::scalar(0.6))]);
        let b = sgd_step(&p, &summed_g, lr).unwrap();
        assert!((a.get("w").unwrap().data()[0] - b.get("w").unwrap().data()[0]).abs() < 1e-15);
    }

    #[test]
    fn sgd_rejects_key_mismatch() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::scalar(1.0)).unwrap();
        let g = grads_of(&[("v", Tensor::scalar(1.0))]);
        assert!(sgd_step(&p, &g, 0.1).is_err());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::scalar(1.0)).unwrap();
        assert!(p.insert("w", Tensor::scalar(2.0)).is_err());
    }

    #[test]
    fn glorot_bound_respected_and_seeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t = glorot_uniform(vec![4, 3], 4, 3, &mut rng);
        let bound = (6.0 / 7.0_f64).sqrt();
        assert!(t.data().iter().all(|v| v.abs() <= bound));

        let mut rng2 = ChaCha8Rng::seed_from_u64(7);
        let t2 = glorot_uniform(vec![4, 3], 4, 3, &mut rng2);
        assert_eq!(t, t2);
    }

    #[test]
    fn json_round_trip_is_exact() {
        let mut p = ParamSet::new();
        p.insert("a", Tensor::new(vec![2], vec![0.1, -1.0 / 3.0]).unwrap()).unwrap();
        p.insert("b", Tensor::new(vec![1], vec![6.02214076e23]).unwrap()).unwrap();
        let json = p.to_json().unwrap();
        let back = ParamSet::from_json(&json).unwrap();
        assert_eq!(p, back);
        // order preserved
        let names: Vec<_> = back.names().cloned().collect();
        assert_eq!(names, vec!["a", "b"]);
    }
}
