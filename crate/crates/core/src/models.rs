//! Network architecture descriptors and batch assembly helpers.
//!
//! A descriptor fully determines its parameter shapes, so checkpoints
//! can be validated against the architecture that wrote them.

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::WindowInstance;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{glorot_uniform, ParamSet};
use crate::tensor::Tensor;

/// Flatten -> dense(hidden) -> ReLU -> dense(n_classes) classifier head.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenseNetSpec {
    pub input_len: usize,
    pub hidden: usize,
    pub n_classes: usize,
}

impl DenseNetSpec {
    pub fn init(&self, seed: u64) -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        p.insert(
            "dense1.w",
            glorot_uniform(vec![self.input_len, self.hidden], self.input_len, self.hidden, &mut rng),
        )
        .expect("fresh set");
        p.insert("dense1.b", Tensor::zeros(vec![self.hidden])).expect("fresh set");
        p.insert(
            "dense2.w",
            glorot_uniform(vec![self.hidden, self.n_classes], self.hidden, self.n_classes, &mut rng),
        )
        .expect("fresh set");
        p.insert("dense2.b", Tensor::zeros(vec![self.n_classes])).expect("fresh set");
        p
    }

    pub fn matches(&self, params: &ParamSet) -> bool {
        params.get("dense1.w").map(Tensor::shape) == Some(&[self.input_len, self.hidden][..])
            && params.get("dense2.w").map(Tensor::shape) == Some(&[self.hidden, self.n_classes][..])
            && params.get("dense1.b").is_some()
            && params.get("dense2.b").is_some()
    }

    /// Class-probability forward pass for a `[batch, input_len]` input.
    pub fn probs(
        &self,
        g: &mut Graph,
        ids: &IndexMap<String, NodeId>,
        x: NodeId,
    ) -> Result<NodeId> {
        let h = g.dense(x, ids["dense1.w"], ids["dense1.b"])?;
        let h = g.relu(h)?;
        let logits = g.dense(h, ids["dense2.w"], ids["dense2.b"])?;
        g.softmax(logits)
    }
}

/// Flatten -> dense(hidden) -> ReLU embedding body (the classifier
/// head's trunk, reused by the cosine matcher).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenseEmbedSpec {
    pub input_len: usize,
    pub hidden: usize,
}

impl DenseEmbedSpec {
    pub fn init(&self, seed: u64) -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        p.insert(
            "dense1.w",
            glorot_uniform(vec![self.input_len, self.hidden], self.input_len, self.hidden, &mut rng),
        )
        .expect("fresh set");
        p.insert("dense1.b", Tensor::zeros(vec![self.hidden])).expect("fresh set");
        p
    }

    pub fn embed(
        &self,
        g: &mut Graph,
        ids: &IndexMap<String, NodeId>,
        x: NodeId,
    ) -> Result<NodeId> {
        let h = g.dense(x, ids["dense1.w"], ids["dense1.b"])?;
        g.relu(h)
    }
}

/// Single-convolution feature module: conv(kernels, kernel) -> ReLU ->
/// maxpool(pool) -> flatten.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbedSpec {
    /// 2-d input grid the flat features are reshaped onto.
    pub grid: (usize, usize),
    pub kernels: usize,
    pub kernel: (usize, usize),
    pub pool: (usize, usize),
}

impl EmbedSpec {
    pub fn with_grid(grid: (usize, usize)) -> Self {
        EmbedSpec { grid, kernels: 16, kernel: (3, 3), pool: (2, 2) }
    }

    fn conv_out(&self) -> Result<(usize, usize)> {
        let (h, w) = self.grid;
        let (kh, kw) = self.kernel;
        if kh > h || kw > w {
            return Err(Error::shape(format!(
                "kernel {kh}x{kw} larger than input grid {h}x{w}"
            )));
        }
        Ok((h - kh + 1, w - kw + 1))
    }

    fn pool_out(&self) -> Result<(usize, usize)> {
        let (ch, cw) = self.conv_out()?;
        let (ph, pw) = self.pool;
        if ph == 0 || pw == 0 || ch % ph != 0 || cw % pw != 0 {
            return Err(Error::shape(format!(
                "conv output {ch}x{cw} not divisible by pool {ph}x{pw}; pick a different pool"
            )));
        }
        Ok((ch / ph, cw / pw))
    }

    /// Flattened embedding width.
    pub fn embed_len(&self) -> Result<usize> {
        let (h, w) = self.pool_out()?;
        Ok(self.kernels * h * w)
    }

    pub fn init(&self, seed: u64) -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (kh, kw) = self.kernel;
        let fan_in = kh * kw;
        let fan_out = self.kernels * kh * kw;
        let mut p = ParamSet::new();
        p.insert(
            "conv.kernels",
            glorot_uniform(vec![self.kernels, 1, kh, kw], fan_in, fan_out, &mut rng),
        )
        .expect("fresh set");
        p.insert("conv.bias", Tensor::zeros(vec![self.kernels])).expect("fresh set");
        p
    }

    /// Embeds a `[batch, 1, grid.0, grid.1]` input to `[batch, embed_len]`.
    ///
    /// Parameter node names carry `prefix` so two modules can share a
    /// graph.
    pub fn embed(
        &self,
        g: &mut Graph,
        ids: &IndexMap<String, NodeId>,
        prefix: &str,
        x: NodeId,
    ) -> Result<NodeId> {
        let c = g.conv2d(x, ids[&format!("{prefix}conv.kernels")], ids[&format!("{prefix}conv.bias")], 1)?;
        let c = g.relu(c)?;
        let p = g.maxpool2d(c, self.pool.0, self.pool.1)?;
        g.flatten(p)
    }
}

/// Relation head: dense(hidden) -> ReLU -> dense(1) -> sigmoid over a
/// concatenated (aggregate, query) pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationSpec {
    /// Twice the embedding width.
    pub input_len: usize,
    pub hidden: usize,
}

impl RelationSpec {
    pub fn init(&self, seed: u64) -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        p.insert(
            "dense1.w",
            glorot_uniform(vec![self.input_len, self.hidden], self.input_len, self.hidden, &mut rng),
        )
        .expect("fresh set");
        p.insert("dense1.b", Tensor::zeros(vec![self.hidden])).expect("fresh set");
        p.insert(
            "dense2.w",
            glorot_uniform(vec![self.hidden, 1], self.hidden, 1, &mut rng),
        )
        .expect("fresh set");
        p.insert("dense2.b", Tensor::zeros(vec![1])).expect("fresh set");
        p
    }

    /// Scores each pair row in `(0, 1)`: `[rows, input_len]` -> `[rows, 1]`.
    pub fn score(
        &self,
        g: &mut Graph,
        ids: &IndexMap<String, NodeId>,
        prefix: &str,
        pairs: NodeId,
    ) -> Result<NodeId> {
        let h = g.dense(pairs, ids[&format!("{prefix}dense1.w")], ids[&format!("{prefix}dense1.b")])?;
        let h = g.relu(h)?;
        let s = g.dense(h, ids[&format!("{prefix}dense2.w")], ids[&format!("{prefix}dense2.b")])?;
        g.sigmoid(s)
    }
}

/// 2-d grid an instance's features are laid out on for the
/// convolutional feature module.
///
/// 2-d shapes are used as-is. For the standard 3-d layouts,
/// per-second DCT blocks `(secs, axes, coeffs)` become
/// `(secs, axes*coeffs)` and frame stacks `(frames, h, w)` become
/// `(frames*w, h)`.
pub fn rn_grid_for_shape(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        [a, b, c] if *c >= 2 * *b => Ok((*a, b * c)),
        [a, b, c] => Ok((a * c, *b)),
        other => Err(Error::shape(format!(
            "no 2-d grid mapping for feature shape {other:?}; provide one explicitly"
        ))),
    }
}

/// Stacks instances row-wise as flat vectors: `[n, numel]`.
pub fn dense_batch(instances: &[&WindowInstance]) -> Result<Tensor> {
    if instances.is_empty() {
        return Err(Error::data("empty batch"));
    }
    let len = instances[0].features.numel();
    let mut data = Vec::with_capacity(instances.len() * len);
    for inst in instances {
        if inst.features.numel() != len {
            return Err(Error::shape("instances have different feature sizes"));
        }
        data.extend_from_slice(inst.features.data());
    }
    Tensor::new(vec![instances.len(), len], data)
}

/// Stacks instances onto a single-channel grid: `[n, 1, grid.0, grid.1]`.
pub fn grid_batch(instances: &[&WindowInstance], grid: (usize, usize)) -> Result<Tensor> {
    if instances.is_empty() {
        return Err(Error::data("empty batch"));
    }
    let (h, w) = grid;
    let len = h * w;
    let mut data = Vec::with_capacity(instances.len() * len);
    for inst in instances {
        if inst.features.numel() != len {
            return Err(Error::shape(format!(
                "instance has {} values, grid {h}x{w} needs {len}",
                inst.features.numel()
            )));
        }
        data.extend_from_slice(inst.features.data());
    }
    Tensor::new(vec![instances.len(), 1, h, w], data)
}

/// One-hot targets from class indices.
pub fn one_hot(labels: &[usize], n_classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * n_classes];
    for (i, &c) in labels.iter().enumerate() {
        if c >= n_classes {
            return Err(Error::invalid(format!("label {c} out of range ({n_classes} classes)")));
        }
        data[i * n_classes + c] = 1.0;
    }
    Tensor::new(vec![labels.len(), n_classes], data)
}

/// Class indices for instances under a task's class ordering.
pub fn class_indices(instances: &[&WindowInstance], class_set: &[String]) -> Result<Vec<usize>> {
    instances
        .iter()
        .map(|inst| {
            class_set
                .iter()
                .position(|c| c == &inst.activity_id)
                .ok_or_else(|| Error::data(format!("activity {} not in class set", inst.activity_id)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_mapping_covers_standard_shapes() {
        assert_eq!(rn_grid_for_shape(&[6, 6]).unwrap(), (6, 6));
        assert_eq!(rn_grid_for_shape(&[5, 3, 60]).unwrap(), (5, 180));
        assert_eq!(rn_grid_for_shape(&[5, 12, 16]).unwrap(), (80, 12));
        assert_eq!(rn_grid_for_shape(&[5, 16, 16]).unwrap(), (80, 16));
        assert!(rn_grid_for_shape(&[36]).is_err());
    }

    #[test]
    fn embed_len_follows_conv_and_pool() {
        let spec = EmbedSpec::with_grid((6, 6));
        // conv 3x3 -> 4x4, pool 2x2 -> 2x2, 16 kernels
        assert_eq!(spec.embed_len().unwrap(), 16 * 2 * 2);
        let bad = EmbedSpec { pool: (2, 3), ..spec };
        assert!(bad.embed_len().is_err());
    }

    #[test]
    fn dense_net_params_match_descriptor() {
        let spec = DenseNetSpec { input_len: 9, hidden: 7, n_classes: 3 };
        let p = spec.init(1);
        assert!(spec.matches(&p));
        assert_eq!(p.get("dense1.w").unwrap().shape(), &[9, 7]);
        assert_eq!(p.get("dense2.b").unwrap().shape(), &[3]);
        let other = DenseNetSpec { input_len: 8, ..spec };
        assert!(!other.matches(&p));
    }

    #[test]
    fn one_hot_and_class_indices() {
        let t = one_hot(&[2, 0], 3).unwrap();
        assert_eq!(t.data(), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        assert!(one_hot(&[3], 3).is_err());
    }
}
