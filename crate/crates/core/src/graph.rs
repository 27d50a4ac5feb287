//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is a tape: operations append nodes holding their forward
//! value and the indices of their inputs, and [`Graph::backward`] walks
//! the tape in reverse to accumulate exact gradients. A graph lives for
//! one forward/backward pass and is confined to one thread.
//!
//! Every node value is checked for NaN/Inf on creation, and gradients
//! are checked after backpropagation; non-finite values are errors, not
//! silent poison.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor applied to predicted probabilities before `ln` in the
/// cross-entropy loss.
pub const CCE_EPS: f64 = 1e-12;

/// Handle to a node on a [`Graph`] tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Dense { x: usize, w: usize, b: usize },
    MatMul { a: usize, b: usize },
    Conv2d { x: usize, k: usize, b: usize, stride: usize },
    MaxPool2d { x: usize, argmax: Vec<usize> },
    Relu { x: usize },
    Sigmoid { x: usize },
    Softmax { x: usize },
    Reshape { x: usize },
    PairConcat { left: usize, right: usize },
    GroupSum { x: usize, groups: Vec<usize> },
    GroupMaxCols { x: usize, argmax: Vec<usize> },
    CosineScores { q: usize, s: usize },
    CceLoss { pred: usize, target: Tensor },
    MseLoss { pred: usize, target: Tensor },
}

struct Node {
    value: Tensor,
    param_name: Option<String>,
    op: Op,
    /// Smallest distance to a point of non-differentiability introduced
    /// by this node (ReLU kink, pooling tie); +inf for smooth ops.
    kink_gap: f64,
}

/// Gradients keyed by parameter name, in registration order.
#[derive(Debug, Clone)]
pub struct Gradients {
    by_name: IndexMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.by_name.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.by_name.iter()
    }

    pub fn len(&self) -> usize {
        self.by_name.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_name.is_empty()
    }

    /// Element-wise in-place accumulation; shapes and keys must agree.
    pub fn accumulate(&mut self, other: &Gradients) -> Result<()> {
        if self.by_name.len() != other.by_name.len() {
            return Err(Error::shape("gradient key sets differ"));
        }
        for (name, t) in self.by_name.iter_mut() {
            let o = other
                .by_name
                .get(name)
                .ok_or_else(|| Error::shape(format!("gradient key {name} missing")))?;
            if o.shape() != t.shape() {
                return Err(Error::shape(format!("gradient shape differs for {name}")));
            }
            for (a, b) in t.data_mut().iter_mut().zip(o.data()) {
                *a += b;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, t) in self.by_name.iter_mut() {
            for v in t.data_mut() {
                *v *= factor;
            }
        }
    }
}

impl FromIterator<(String, Tensor)> for Gradients {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        Gradients {
            by_name: iter.into_iter().collect(),
        }
    }
}

/// The reverse-mode tape.
pub struct Graph {
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor, op: Op, kink_gap: f64, what: &str) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::non_finite(format!("{what} produced NaN/Inf")));
        }
        self.nodes.push(Node {
            value,
            param_name: None,
            op,
            kink_gap,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Registers a non-trainable input.
    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(value, Op::Leaf, f64::INFINITY, "constant")
    }

    /// Registers a trainable input; its gradient is reported under `name`.
    pub fn param(&mut self, name: &str, value: Tensor) -> Result<NodeId> {
        let id = self.push(value, Op::Leaf, f64::INFINITY, "param")?;
        self.nodes[id.0].param_name = Some(name.to_string());
        Ok(id)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Smallest kink distance seen across the whole forward pass.
    pub fn min_kink_gap(&self) -> f64 {
        self.nodes
            .iter()
            .map(|n| n.kink_gap)
            .fold(f64::INFINITY, f64::min)
    }

    fn shape2(&self, id: NodeId, what: &str) -> Result<(usize, usize)> {
        let s = self.nodes[id.0].value.shape();
        if s.len() != 2 {
            return Err(Error::shape(format!("{what}: expected 2-d, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    /// Affine map `y = x·W + b` for `x: [batch, in]`, `W: [in, out]`,
    /// `b: [out]`.
    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (batch, n_in) = self.shape2(x, "dense x")?;
        let (w_in, n_out) = self.shape2(w, "dense W")?;
        let bs = self.nodes[b.0].value.shape();
        if w_in != n_in {
            return Err(Error::shape(format!(
                "dense: x has {n_in} columns but W has {w_in} rows"
            )));
        }
        if bs != [n_out] {
            return Err(Error::shape(format!(
                "dense: bias shape {bs:?} does not match {n_out} outputs"
            )));
        }
        let xd = self.nodes[x.0].value.data();
        let wd = self.nodes[w.0].value.data();
        let bd = self.nodes[b.0].value.data();
        let mut out = vec![0.0; batch * n_out];
        for i in 0..batch {
            for kk in 0..n_in {
                let xv = xd[i * n_in + kk];
                for j in 0..n_out {
                    out[i * n_out + j] += xv * wd[kk * n_out + j];
                }
            }
            for j in 0..n_out {
                out[i * n_out + j] += bd[j];
            }
        }
        let value = Tensor::new(vec![batch, n_out], out)?;
        self.push(
            value,
            Op::Dense { x: x.0, w: w.0, b: b.0 },
            f64::INFINITY,
            "dense",
        )
    }

    /// Plain matrix product `[m, k] × [k, n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.shape2(a, "matmul lhs")?;
        let (k2, n) = self.shape2(b, "matmul rhs")?;
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul: inner extents differ ({k} vs {k2})"
            )));
        }
        let ad = self.nodes[a.0].value.data();
        let bd = self.nodes[b.0].value.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for kk in 0..k {
                let av = ad[i * k + kk];
                for j in 0..n {
                    out[i * n + j] += av * bd[kk * n + j];
                }
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        self.push(value, Op::MatMul { a: a.0, b: b.0 }, f64::INFINITY, "matmul")
    }

    /// Valid (no padding) cross-correlation.
    ///
    /// `x: [batch, ch, h, w]`, `kernels: [n, ch, kh, kw]`, `bias: [n]`;
    /// the output is `[batch, n, (h-kh)/stride+1, (w-kw)/stride+1]`.
    pub fn conv2d(&mut self, x: NodeId, kernels: NodeId, bias: NodeId, stride: usize) -> Result<NodeId> {
        if stride == 0 {
            return Err(Error::invalid("conv2d: stride must be positive"));
        }
        let xs = self.nodes[x.0].value.shape().to_vec();
        let ks = self.nodes[kernels.0].value.shape().to_vec();
        let bs = self.nodes[bias.0].value.shape().to_vec();
        if xs.len() != 4 || ks.len() != 4 {
            return Err(Error::shape(format!(
                "conv2d: expected 4-d input/kernels, got {xs:?} and {ks:?}"
            )));
        }
        let (batch, ch, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (n, kch, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
        if kch != ch {
            return Err(Error::shape(format!(
                "conv2d: input has {ch} channels but kernels expect {kch}"
            )));
        }
        if bs != [n] {
            return Err(Error::shape(format!(
                "conv2d: bias shape {bs:?} does not match {n} kernels"
            )));
        }
        if kh > h || kw > w {
            return Err(Error::shape(format!(
                "conv2d: kernel {kh}x{kw} larger than input {h}x{w}"
            )));
        }
        if (h - kh) % stride != 0 || (w - kw) % stride != 0 {
            return Err(Error::shape(format!(
                "conv2d: non-integer output extent for input {h}x{w}, kernel {kh}x{kw}, stride {stride}"
            )));
        }
        let oh = (h - kh) / stride + 1;
        let ow = (w - kw) / stride + 1;
        let xd = self.nodes[x.0].value.data();
        let kd = self.nodes[kernels.0].value.data();
        let bd = self.nodes[bias.0].value.data();
        let mut out = vec![0.0; batch * n * oh * ow];
        for b in 0..batch {
            for f in 0..n {
                for oi in 0..oh {
                    for oj in 0..ow {
                        let mut acc = bd[f];
                        for c in 0..ch {
                            for p in 0..kh {
                                for q in 0..kw {
                                    let xi = oi * stride + p;
                                    let xj = oj * stride + q;
                                    acc += xd[((b * ch + c) * h + xi) * w + xj]
                                        * kd[((f * ch + c) * kh + p) * kw + q];
                                }
                            }
                        }
                        out[((b * n + f) * oh + oi) * ow + oj] = acc;
                    }
                }
            }
        }
        let value = Tensor::new(vec![batch, n, oh, ow], out)?;
        self.push(
            value,
            Op::Conv2d { x: x.0, k: kernels.0, b: bias.0, stride },
            f64::INFINITY,
            "conv2d",
        )
    }

    /// Per-window maxima over non-overlapping `ph × pw` windows.
    ///
    /// Spatial extents must divide evenly; the backward pass routes the
    /// gradient to each window's first maximum in scan order.
    pub fn maxpool2d(&mut self, x: NodeId, ph: usize, pw: usize) -> Result<NodeId> {
        if ph == 0 || pw == 0 {
            return Err(Error::invalid("maxpool2d: pool extents must be positive"));
        }
        let xs = self.nodes[x.0].value.shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::shape(format!("maxpool2d: expected 4-d input, got {xs:?}")));
        }
        let (batch, ch, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if h % ph != 0 || w % pw != 0 {
            return Err(Error::shape(format!(
                "maxpool2d: extents {h}x{w} not divisible by pool {ph}x{pw}"
            )));
        }
        let oh = h / ph;
        let ow = w / pw;
        let xd = self.nodes[x.0].value.data();
        let mut out = vec![0.0; batch * ch * oh * ow];
        let mut argmax = vec![0usize; out.len()];
        let mut kink_gap = f64::INFINITY;
        for b in 0..batch {
            for c in 0..ch {
                for oi in 0..oh {
                    for oj in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0;
                        let mut second = f64::NEG_INFINITY;
                        for p in 0..ph {
                            for q in 0..pw {
                                let xi = oi * ph + p;
                                let xj = oj * pw + q;
                                let idx = ((b * ch + c) * h + xi) * w + xj;
                                let v = xd[idx];
                                if v > best {
                                    second = best;
                                    best = v;
                                    best_idx = idx;
                                } else if v > second {
                                    second = v;
                                }
                            }
                        }
                        if second.is_finite() {
                            kink_gap = kink_gap.min(best - second);
                        }
                        let o = ((b * ch + c) * oh + oi) * ow + oj;
                        out[o] = best;
                        argmax[o] = best_idx;
                    }
                }
            }
        }
        let value = Tensor::new(vec![batch, ch, oh, ow], out)?;
        self.push(value, Op::MaxPool2d { x: x.0, argmax }, kink_gap, "maxpool2d")
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = &self.nodes[x.0].value;
        let kink_gap = xv
            .data()
            .iter()
            .map(|v| v.abs())
            .fold(f64::INFINITY, f64::min);
        let value = xv.map(|v| v.max(0.0));
        self.push(value, Op::Relu { x: x.0 }, kink_gap, "relu")
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let value = self.nodes[x.0].value.map(|v| {
            if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            }
        });
        self.push(value, Op::Sigmoid { x: x.0 }, f64::INFINITY, "sigmoid")
    }

    /// Row-wise softmax over the last axis of a `[batch, k]` tensor,
    /// computed with max subtraction.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let (batch, k) = self.shape2(x, "softmax")?;
        let xd = self.nodes[x.0].value.data();
        let mut out = vec![0.0; batch * k];
        for i in 0..batch {
            let row = &xd[i * k..(i + 1) * k];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..k {
                let e = (row[j] - m).exp();
                out[i * k + j] = e;
                sum += e;
            }
            for j in 0..k {
                out[i * k + j] /= sum;
            }
        }
        let value = Tensor::new(vec![batch, k], out)?;
        self.push(value, Op::Softmax { x: x.0 }, f64::INFINITY, "softmax")
    }

    /// Reinterprets a node's value under a new shape (same element count).
    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let value = self.nodes[x.0].value.reshaped(shape)?;
        self.push(value, Op::Reshape { x: x.0 }, f64::INFINITY, "reshape")
    }

    /// Flattens to `[batch, rest]`, keeping the leading axis.
    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.nodes[x.0].value.shape();
        if s.is_empty() {
            return Err(Error::shape("flatten: scalar input"));
        }
        let batch = s[0];
        let rest: usize = s[1..].iter().product::<usize>().max(1);
        self.reshape(x, vec![batch, rest])
    }

    /// All (left row, right row) concatenations.
    ///
    /// For `left: [ns, d]` and `right: [nq, d]` the output is
    /// `[nq*ns, 2d]`, row `q*ns + s` holding `[left_s ; right_q]`.
    pub fn pair_concat(&mut self, left: NodeId, right: NodeId) -> Result<NodeId> {
        let (ns, d) = self.shape2(left, "pair_concat left")?;
        let (nq, d2) = self.shape2(right, "pair_concat right")?;
        if d != d2 {
            return Err(Error::shape(format!(
                "pair_concat: widths differ ({d} vs {d2})"
            )));
        }
        let ld = self.nodes[left.0].value.data();
        let rd = self.nodes[right.0].value.data();
        let mut out = vec![0.0; nq * ns * 2 * d];
        for q in 0..nq {
            for s in 0..ns {
                let row = (q * ns + s) * 2 * d;
                out[row..row + d].copy_from_slice(&ld[s * d..(s + 1) * d]);
                out[row + d..row + 2 * d].copy_from_slice(&rd[q * d..(q + 1) * d]);
            }
        }
        let value = Tensor::new(vec![nq * ns, 2 * d], out)?;
        self.push(
            value,
            Op::PairConcat { left: left.0, right: right.0 },
            f64::INFINITY,
            "pair_concat",
        )
    }

    /// Sums rows of `x: [n, d]` into `n_groups` buckets given a group
    /// index per row.
    pub fn group_sum(&mut self, x: NodeId, groups: &[usize], n_groups: usize) -> Result<NodeId> {
        let (n, d) = self.shape2(x, "group_sum")?;
        if groups.len() != n {
            return Err(Error::shape(format!(
                "group_sum: {n} rows but {} group labels",
                groups.len()
            )));
        }
        if groups.iter().any(|&g| g >= n_groups) {
            return Err(Error::invalid("group_sum: group label out of range"));
        }
        let xd = self.nodes[x.0].value.data();
        let mut out = vec![0.0; n_groups * d];
        for (row, &g) in groups.iter().enumerate() {
            for j in 0..d {
                out[g * d + j] += xd[row * d + j];
            }
        }
        let value = Tensor::new(vec![n_groups, d], out)?;
        self.push(
            value,
            Op::GroupSum { x: x.0, groups: groups.to_vec() },
            f64::INFINITY,
            "group_sum",
        )
    }

    /// Per-row maximum over column buckets: `x: [r, n]` with a group
    /// index per column becomes `[r, n_groups]`.
    ///
    /// The backward pass routes each gradient to the first maximal
    /// column in scan order.
    pub fn group_max_cols(&mut self, x: NodeId, groups: &[usize], n_groups: usize) -> Result<NodeId> {
        let (r, n) = self.shape2(x, "group_max_cols")?;
        if groups.len() != n {
            return Err(Error::shape(format!(
                "group_max_cols: {n} columns but {} group labels",
                groups.len()
            )));
        }
        if groups.iter().any(|&g| g >= n_groups) {
            return Err(Error::invalid("group_max_cols: group label out of range"));
        }
        let xd = self.nodes[x.0].value.data();
        let mut out = vec![f64::NEG_INFINITY; r * n_groups];
        let mut argmax = vec![usize::MAX; r * n_groups];
        let mut second = vec![f64::NEG_INFINITY; r * n_groups];
        for i in 0..r {
            for (col, &g) in groups.iter().enumerate() {
                let v = xd[i * n + col];
                let o = i * n_groups + g;
                if v > out[o] {
                    second[o] = out[o];
                    out[o] = v;
                    argmax[o] = i * n + col;
                } else if v > second[o] {
                    second[o] = v;
                }
            }
        }
        if argmax.iter().any(|&a| a == usize::MAX) {
            return Err(Error::invalid("group_max_cols: a group has no columns"));
        }
        let kink_gap = out
            .iter()
            .zip(&second)
            .filter(|(_, s)| s.is_finite())
            .map(|(b, s)| b - s)
            .fold(f64::INFINITY, f64::min);
        let value = Tensor::new(vec![r, n_groups], out)?;
        self.push(value, Op::GroupMaxCols { x: x.0, argmax }, kink_gap, "group_max_cols")
    }

    /// Cosine similarity of every query row against every support row:
    /// `q: [nq, d]`, `s: [ns, d]` gives `[nq, ns]` values in `[-1, 1]`.
    pub fn cosine_scores(&mut self, q: NodeId, s: NodeId) -> Result<NodeId> {
        let (nq, d) = self.shape2(q, "cosine_scores q")?;
        let (ns, d2) = self.shape2(s, "cosine_scores s")?;
        if d != d2 {
            return Err(Error::shape(format!(
                "cosine_scores: widths differ ({d} vs {d2})"
            )));
        }
        let qd = self.nodes[q.0].value.data();
        let sd = self.nodes[s.0].value.data();
        let qn: Vec<f64> = (0..nq)
            .map(|i| qd[i * d..(i + 1) * d].iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let sn: Vec<f64> = (0..ns)
            .map(|i| sd[i * d..(i + 1) * d].iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        if qn.iter().chain(&sn).any(|&n| n == 0.0) {
            return Err(Error::invalid("cosine_scores: zero-norm embedding"));
        }
        let mut out = vec![0.0; nq * ns];
        for i in 0..nq {
            for j in 0..ns {
                let dot: f64 = (0..d).map(|k| qd[i * d + k] * sd[j * d + k]).sum();
                out[i * ns + j] = dot / (qn[i] * sn[j]);
            }
        }
        let value = Tensor::new(vec![nq, ns], out)?;
        self.push(
            value,
            Op::CosineScores { q: q.0, s: s.0 },
            f64::INFINITY,
            "cosine_scores",
        )
    }

    /// Categorical cross-entropy against one-hot targets: the mean over
    /// the batch of `-ln(max(p_true, CCE_EPS))`.
    pub fn cce_loss(&mut self, pred: NodeId, target: &Tensor) -> Result<NodeId> {
        let (batch, k) = self.shape2(pred, "cce_loss pred")?;
        if target.shape() != [batch, k] {
            return Err(Error::shape(format!(
                "cce_loss: target shape {:?} does not match [{batch}, {k}]",
                target.shape()
            )));
        }
        let pd = self.nodes[pred.0].value.data();
        let td = target.data();
        for i in 0..batch {
            let row = &pd[i * k..(i + 1) * k];
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-6 || row.iter().any(|&p| p < -1e-9) {
                return Err(Error::invalid(format!(
                    "cce_loss: prediction row {i} is not a probability vector (sum {sum})"
                )));
            }
            let trow = &td[i * k..(i + 1) * k];
            let ones = trow.iter().filter(|&&t| t == 1.0).count();
            if ones != 1 || trow.iter().any(|&t| t != 0.0 && t != 1.0) {
                return Err(Error::invalid(format!("cce_loss: target row {i} is not one-hot")));
            }
        }
        let mut total = 0.0;
        for i in 0..batch {
            for j in 0..k {
                if td[i * k + j] == 1.0 {
                    total -= pd[i * k + j].max(CCE_EPS).ln();
                }
            }
        }
        let value = Tensor::scalar(total / batch as f64);
        self.push(
            value,
            Op::CceLoss { pred: pred.0, target: target.clone() },
            f64::INFINITY,
            "cce_loss",
        )
    }

    /// Mean of squared element-wise differences.
    pub fn mse_loss(&mut self, pred: NodeId, target: &Tensor) -> Result<NodeId> {
        let ps = self.nodes[pred.0].value.shape();
        if target.shape() != ps {
            return Err(Error::shape(format!(
                "mse_loss: target shape {:?} does not match {:?}",
                target.shape(),
                ps
            )));
        }
        let pd = self.nodes[pred.0].value.data();
        let td = target.data();
        let n = pd.len() as f64;
        let total: f64 = pd.iter().zip(td).map(|(p, t)| (p - t) * (p - t)).sum();
        let value = Tensor::scalar(total / n);
        self.push(
            value,
            Op::MseLoss { pred: pred.0, target: target.clone() },
            f64::INFINITY,
            "mse_loss",
        )
    }

    /// Exact reverse-mode gradients of a scalar loss node with respect
    /// to every registered parameter.
    ///
    /// Parameters the loss does not depend on get zero gradients.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::shape(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|n| vec![0.0; n.value.numel()])
            .collect();
        grads[loss.0][0] = 1.0;

        for idx in (0..=loss.0).rev() {
            let go = std::mem::take(&mut grads[idx]);
            if go.iter().all(|&g| g == 0.0) {
                grads[idx] = go;
                continue;
            }
            match &self.nodes[idx].op {
                Op::Leaf => {}
                Op::Dense { x, w, b } => {
                    let (batch, n_in) = {
                        let s = self.nodes[*x].value.shape();
                        (s[0], s[1])
                    };
                    let n_out = self.nodes[*w].value.shape()[1];
                    let xd = self.nodes[*x].value.data();
                    let wd = self.nodes[*w].value.data();
                    for i in 0..batch {
                        for j in 0..n_out {
                            let g = go[i * n_out + j];
                            grads[*b][j] += g;
                            for kk in 0..n_in {
                                grads[*x][i * n_in + kk] += g * wd[kk * n_out + j];
                                grads[*w][kk * n_out + j] += g * xd[i * n_in + kk];
                            }
                        }
                    }
                }
                Op::MatMul { a, b } => {
                    let (m, k) = {
                        let s = self.nodes[*a].value.shape();
                        (s[0], s[1])
                    };
                    let n = self.nodes[*b].value.shape()[1];
                    let ad = self.nodes[*a].value.data();
                    let bd = self.nodes[*b].value.data();
                    for i in 0..m {
                        for j in 0..n {
                            let g = go[i * n + j];
                            for kk in 0..k {
                                grads[*a][i * k + kk] += g * bd[kk * n + j];
                                grads[*b][kk * n + j] += g * ad[i * k + kk];
                            }
                        }
                    }
                }
                Op::Conv2d { x, k, b, stride } => {
                    let xs = self.nodes[*x].value.shape().to_vec();
                    let ks = self.nodes[*k].value.shape().to_vec();
                    let (batch, ch, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                    let (n, _, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
                    let oh = (h - kh) / stride + 1;
                    let ow = (w - kw) / stride + 1;
                    let xd = self.nodes[*x].value.data();
                    let kd = self.nodes[*k].value.data();
                    for bi in 0..batch {
                        for f in 0..n {
                            for oi in 0..oh {
                                for oj in 0..ow {
                                    let g = go[((bi * n + f) * oh + oi) * ow + oj];
                                    grads[*b][f] += g;
                                    for c in 0..ch {
                                        for p in 0..kh {
                                            for q in 0..kw {
                                                let xi = oi * stride + p;
                                                let xj = oj * stride + q;
                                                let x_idx = ((bi * ch + c) * h + xi) * w + xj;
                                                let k_idx = ((f * ch + c) * kh + p) * kw + q;
                                                grads[*x][x_idx] += g * kd[k_idx];
                                                grads[*k][k_idx] += g * xd[x_idx];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                Op::MaxPool2d { x, argmax, .. } => {
                    for (o, &src) in argmax.iter().enumerate() {
                        grads[*x][src] += go[o];
                    }
                }
                Op::Relu { x } => {
                    let xd = self.nodes[*x].value.data();
                    for (i, &g) in go.iter().enumerate() {
                        if xd[i] > 0.0 {
                            grads[*x][i] += g;
                        }
                    }
                }
                Op::Sigmoid { x } => {
                    let yd = self.nodes[idx].value.data();
                    for (i, &g) in go.iter().enumerate() {
                        grads[*x][i] += g * yd[i] * (1.0 - yd[i]);
                    }
                }
                Op::Softmax { x } => {
                    let yd = self.nodes[idx].value.data();
                    let s = self.nodes[idx].value.shape();
                    let (batch, k) = (s[0], s[1]);
                    for i in 0..batch {
                        let dot: f64 = (0..k).map(|j| go[i * k + j] * yd[i * k + j]).sum();
                        for j in 0..k {
                            grads[*x][i * k + j] += yd[i * k + j] * (go[i * k + j] - dot);
                        }
                    }
                }
                Op::Reshape { x } => {
                    for (i, &g) in go.iter().enumerate() {
                        grads[*x][i] += g;
                    }
                }
                Op::PairConcat { left, right } => {
                    let (ns, d) = {
                        let s = self.nodes[*left].value.shape();
                        (s[0], s[1])
                    };
                    let nq = self.nodes[*right].value.shape()[0];
                    for q in 0..nq {
                        for s in 0..ns {
                            let row = (q * ns + s) * 2 * d;
                            for j in 0..d {
                                grads[*left][s * d + j] += go[row + j];
                                grads[*right][q * d + j] += go[row + d + j];
                            }
                        }
                    }
                }
                Op::GroupSum { x, groups } => {
                    let d = self.nodes[*x].value.shape()[1];
                    for (row, &g) in groups.iter().enumerate() {
                        for j in 0..d {
                            grads[*x][row * d + j] += go[g * d + j];
                        }
                    }
                }
                Op::GroupMaxCols { x, argmax, .. } => {
                    for (o, &src) in argmax.iter().enumerate() {
                        grads[*x][src] += go[o];
                    }
                }
                Op::CosineScores { q, s } => {
                    let (nq, d) = {
                        let sh = self.nodes[*q].value.shape();
                        (sh[0], sh[1])
                    };
                    let ns = self.nodes[*s].value.shape()[0];
                    let qd = self.nodes[*q].value.data();
                    let sd = self.nodes[*s].value.data();
                    let yd = self.nodes[idx].value.data();
                    let qn: Vec<f64> = (0..nq)
                        .map(|i| qd[i * d..(i + 1) * d].iter().map(|v| v * v).sum::<f64>().sqrt())
                        .collect();
                    let sn: Vec<f64> = (0..ns)
                        .map(|i| sd[i * d..(i + 1) * d].iter().map(|v| v * v).sum::<f64>().sqrt())
                        .collect();
                    for i in 0..nq {
                        for j in 0..ns {
                            let g = go[i * ns + j];
                            if g == 0.0 {
                                continue;
                            }
                            let c = yd[i * ns + j];
                            let denom = qn[i] * sn[j];
                            for kk in 0..d {
                                grads[*q][i * d + kk] +=
                                    g * (sd[j * d + kk] / denom - c * qd[i * d + kk] / (qn[i] * qn[i]));
                                grads[*s][j * d + kk] +=
                                    g * (qd[i * d + kk] / denom - c * sd[j * d + kk] / (sn[j] * sn[j]));
                            }
                        }
                    }
                }
                Op::CceLoss { pred, target } => {
                    let g = go[0];
                    let pd = self.nodes[*pred].value.data();
                    let td = target.data();
                    let s = self.nodes[*pred].value.shape();
                    let (batch, k) = (s[0], s[1]);
                    for i in 0..batch {
                        for j in 0..k {
                            let p = pd[i * k + j];
                            if td[i * k + j] == 1.0 && p >= CCE_EPS {
                                grads[*pred][i * k + j] -= g / (batch as f64 * p);
                            }
                        }
                    }
                }
                Op::MseLoss { pred, target } => {
                    let g = go[0];
                    let pd = self.nodes[*pred].value.data();
                    let td = target.data();
                    let n = pd.len() as f64;
                    for i in 0..pd.len() {
                        grads[*pred][i] += g * 2.0 * (pd[i] - td[i]) / n;
                    }
                }
            }
            grads[idx] = go;
        }

        let mut by_name = IndexMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Some(name) = &node.param_name {
                let g = std::mem::take(&mut grads[i]);
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::non_finite(format!("gradient of {name} is NaN/Inf")));
                }
                by_name.insert(name.clone(), Tensor::new(node.value.shape().to_vec(), g)?);
            }
        }
        Ok(Gradients { by_name })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn dense_identity_passthrough() {
        // x = [[1, 0]], W = I, b = 0 -> [[1, 0]]
        let mut g = Graph::new();
        let x = g.constant(t(vec![1, 2], vec![1.0, 0.0])).unwrap();
        let w = g.param("w", t(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0])).unwrap();
        let b = g.param("b", t(vec![2], vec![0.0, 0.0])).unwrap();
        let y = g.dense(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 0.0]);
    }

    #[test]
    fn dense_all_ones() {
        // x = [[1, 1]], W = [[1], [1]], b = [1] -> [[3]]
        let mut g = Graph::new();
        let x = g.constant(t(vec![1, 2], vec![1.0, 1.0])).unwrap();
        let w = g.param("w", t(vec![2, 1], vec![1.0, 1.0])).unwrap();
        let b = g.param("b", t(vec![1], vec![1.0])).unwrap();
        let y = g.dense(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[3.0]);
    }

    #[test]
    fn dense_rejects_shape_mismatch() {
        let mut g = Graph::new();
        let x = g.constant(t(vec![1, 3], vec![0.0; 3])).unwrap();
        let w = g.param("w", t(vec![2, 2], vec![0.0; 4])).unwrap();
        let b = g.param("b", t(vec![2], vec![0.0; 2])).unwrap();
        assert!(g.dense(x, w, b).is_err());
    }

    #[test]
    fn conv_identity_kernel() {
        let mut g = Graph::new();
        let x = g
            .constant(t(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]))
            .unwrap();
        let k = g.param("k", t(vec![1, 1, 1, 1], vec![1.0])).unwrap();
        let b = g.param("b", t(vec![1], vec![0.0])).unwrap();
        let y = g.conv2d(x, k, b, 1).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 2, 2]);
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn conv_all_ones_sums_window() {
        let mut g = Graph::new();
        let x = g.constant(t(vec![1, 1, 3, 3], vec![1.0; 9])).unwrap();
        let k = g.param("k", t(vec![1, 1, 3, 3], vec![1.0; 9])).unwrap();
        let b = g.param("b", t(vec![1], vec![0.0])).unwrap();
        let y = g.conv2d(x, k, b, 1).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(g.value(y).data(), &[9.0]);
    }

    #[test]
    fn conv_rejects_oversized_kernel_and_bad_stride() {
        let mut g = Graph::new();
        let x = g.constant(t(vec![1, 1, 2, 2], vec![0.0; 4])).unwrap();
        let k = g.param("k", t(vec![1, 1, 3, 3], vec![0.0; 9])).unwrap();
        let b = g.param("b", t(vec![1], vec![0.0])).unwrap();
        assert!(g.conv2d(x, k, b, 1).is_err());

        let mut g = Graph::new();
        // (4 - 2) % 3 != 0 -> non-integer output extent
        let x = g.constant(t(vec![1, 1, 4, 4], vec![0.0; 16])).unwrap();
        let k = g.param("k", t(vec![1, 1, 2, 2], vec![0.0; 4])).unwrap();
        let b = g.param("b", t(vec![1], vec![0.0])).unwrap();
        assert!(g.conv2d(x, k, b, 3).is_err());
    }

    #[test]
    fn maxpool_takes_window_max() {
        let mut g = Graph::new();
        let x = g
            .constant(t(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]))
            .unwrap();
        let y = g.maxpool2d(x, 2, 2).unwrap();
        assert_eq!(g.value(y).data(), &[4.0]);
    }

    #[test]
    fn maxpool_tie_routes_gradient_to_first() {
        let mut g = Graph::new();
        let x = g.param("x", t(vec![1, 1, 2, 2], vec![5.0; 4])).unwrap();
        let y = g.maxpool2d(x, 2, 2).unwrap();
        let loss = g.mse_loss(y, &t(vec![1, 1, 1, 1], vec![0.0])).unwrap();
        let grads = g.backward(loss).unwrap();
        let gx = grads.get("x").unwrap().data();
        assert_eq!(gx[0], 10.0); // d/dp of p^2 at 5
        assert_eq!(&gx[1..], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn maxpool_rejects_non_divisible() {
        let mut g = Graph::new();
        let x = g.constant(t(vec![1, 1, 3, 2], vec![0.0; 6])).unwrap();
        assert!(g.maxpool2d(x, 2, 2).is_err());
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut g = Graph::new();
        let x = g.constant(t(vec![1, 3], vec![0.0, 0.0, 0.0])).unwrap();
        let y = g.softmax(x).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }

        let x = g.constant(t(vec![1, 3], vec![1000.0, 1000.0, 999.0])).unwrap();
        let y = g.softmax(x).unwrap();
        let row = g.value(y).data();
        assert!(row.iter().all(|v| v.is_finite()));
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let mut g = Graph::new();
        let x = g.constant(t(vec![1, 1], vec![0.0])).unwrap();
        let y = g.sigmoid(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5]);
    }

    #[test]
    fn cce_uniform_is_ln3() {
        let mut g = Graph::new();
        let p = g
            .constant(t(vec![1, 3], vec![1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]))
            .unwrap();
        let loss = g.cce_loss(p, &t(vec![1, 3], vec![1.0, 0.0, 0.0])).unwrap();
        assert!((g.value(loss).scalar_value().unwrap() - 3.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cce_perfect_prediction_is_zero() {
        let mut g = Graph::new();
        let p = g.constant(t(vec![1, 2], vec![1.0, 0.0])).unwrap();
        let loss = g.cce_loss(p, &t(vec![1, 2], vec![1.0, 0.0])).unwrap();
        assert!(g.value(loss).scalar_value().unwrap().abs() < 1e-12);
    }

    #[test]
    fn cce_rejects_non_probability_rows() {
        let mut g = Graph::new();
        let p = g.constant(t(vec![1, 2], vec![0.9, 0.4])).unwrap();
        assert!(g.cce_loss(p, &t(vec![1, 2], vec![1.0, 0.0])).is_err());
    }

    #[test]
    fn mse_examples() {
        let mut g = Graph::new();
        let p = g.constant(t(vec![2], vec![1.0, 0.0])).unwrap();
        let loss = g.mse_loss(p, &t(vec![2], vec![0.0, 0.0])).unwrap();
        assert_eq!(g.value(loss).scalar_value().unwrap(), 0.5);

        let loss = g.mse_loss(p, &t(vec![2], vec![1.0, 0.0])).unwrap();
        assert_eq!(g.value(loss).scalar_value().unwrap(), 0.0);
    }

    #[test]
    fn backward_linear_sum_gives_ones() {
        // loss = mean((w - 0)^2) stand-in is quadratic; use matmul with
        // ones to get sum(w): loss = sum(w) via 1-row matmul and mse
        // against zero is quadratic, so instead check the linear case
        // directly: y = x . w with x = ones.
        let mut g = Graph::new();
        let w = g.param("w", t(vec![3, 1], vec![2.0, -1.0, 0.5])).unwrap();
        let x = g.constant(t(vec![1, 3], vec![1.0, 1.0, 1.0])).unwrap();
        let y = g.matmul(x, w).unwrap();
        let loss = g.reshape(y, vec![1]).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get("w").unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_disconnected_param_is_zero() {
        let mut g = Graph::new();
        let w = g.param("w", t(vec![1, 1], vec![3.0])).unwrap();
        let _unused = g.param("b", t(vec![2], vec![1.0, 2.0])).unwrap();
        let loss = g.mse_loss(w, &t(vec![1, 1], vec![0.0])).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get("b").unwrap().data(), &[0.0, 0.0]);
        assert_eq!(grads.get("w").unwrap().data(), &[6.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut g = Graph::new();
        let w = g.param("w", t(vec![2], vec![1.0, 2.0])).unwrap();
        assert!(g.backward(w).is_err());
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut g = Graph::new();
        assert!(g.constant(t(vec![1], vec![f64::NAN])).is_err());
    }
}
