//! Cosine-similarity matching baseline.
//!
//! Queries are classified by softmax attention over cosine similarities
//! to support embeddings, summed per class. The embedding body is the
//! classifier trunk of the dense net, trained episodically with
//! cross-entropy.

use serde::{Deserialize, Serialize};

use crate::datasets::{PersonDataset, WindowInstance};
use crate::episodes::{KQuery, SamplingMode, TaskConfig, TaskSampler};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::models::{class_indices, dense_batch, one_hot, DenseEmbedSpec};
use crate::optim::{adam_step, AdamParams, AdamState};
use crate::params::ParamSet;
use crate::tensor::argmax;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatcherConfig {
    pub alpha: f64,
    pub k_support: usize,
    pub k_query: KQuery,
    pub epochs: usize,
    pub mode: SamplingMode,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        MatcherConfig {
            alpha: 0.001,
            k_support: 5,
            k_query: KQuery::All,
            epochs: 20,
            mode: SamplingMode::Personalised,
            hidden: 128,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatcherModel {
    pub params: ParamSet,
    pub spec: DenseEmbedSpec,
    pub classes: Vec<String>,
    pub train_loss: Vec<f64>,
}

/// Attention-derived class probabilities for a query batch on a graph.
fn probs_on_graph(
    g: &mut Graph,
    ids: &indexmap::IndexMap<String, NodeId>,
    spec: &DenseEmbedSpec,
    support: &[&WindowInstance],
    support_labels: &[usize],
    query: &[&WindowInstance],
    n_classes: usize,
) -> Result<NodeId> {
    let sx = g.constant(dense_batch(support)?)?;
    let s_emb = spec.embed(g, ids, sx)?;
    let qx = g.constant(dense_batch(query)?)?;
    let q_emb = spec.embed(g, ids, qx)?;
    let sims = g.cosine_scores(q_emb, s_emb)?;
    let attention = g.softmax(sims)?;
    // per-class sums via a constant indicator matrix
    let indicator = one_hot(support_labels, n_classes)?;
    let ind = g.constant(indicator)?;
    g.matmul(attention, ind)
}

fn check_stratified(support: &[&WindowInstance], classes: &[String]) -> Result<Vec<usize>> {
    let labels = class_indices(support, classes)?;
    let mut counts = vec![0usize; classes.len()];
    for &l in &labels {
        counts[l] += 1;
    }
    if counts.iter().any(|&c| c == 0 || c != counts[0]) {
        return Err(Error::data(format!(
            "support is not stratified: per-class counts {counts:?}"
        )));
    }
    Ok(labels)
}

/// Trains the embedding episodically: one task and one Adam step per
/// epoch, cross-entropy on the attention-derived class probabilities.
pub fn mn_train(ds: &PersonDataset, cfg: &MatcherConfig) -> Result<MatcherModel> {
    if cfg.alpha <= 0.0 || cfg.epochs == 0 || cfg.k_support == 0 {
        return Err(Error::invalid("matcher config: alpha, epochs and k_support must be positive"));
    }
    let classes = ds.class_set().to_vec();
    let spec = DenseEmbedSpec {
        input_len: ds.feature_shape().iter().product(),
        hidden: cfg.hidden,
    };
    let mut params = spec.init(cfg.seed);
    let mut sampler = TaskSampler::new(
        ds,
        TaskConfig {
            k_support: cfg.k_support,
            k_query: cfg.k_query,
            mode: cfg.mode,
            seed: cfg.seed,
        },
    )?;
    let mut adam = AdamState::new(&params);
    let hp = AdamParams::with_lr(cfg.alpha);

    let mut train_loss = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let task = sampler.next_task()?;
        task.validate(cfg.k_support)?;
        let support: Vec<&WindowInstance> = task.support.iter().collect();
        let query: Vec<&WindowInstance> = task.query.iter().collect();
        let support_labels = check_stratified(&support, &classes)?;
        let query_labels = class_indices(&query, &classes)?;
        let targets = one_hot(&query_labels, classes.len())?;

        let mut g = Graph::new();
        let ids = params.register(&mut g)?;
        let probs = probs_on_graph(&mut g, &ids, &spec, &support, &support_labels, &query, classes.len())?;
        let loss = g.cce_loss(probs, &targets)?;
        train_loss.push(g.value(loss).scalar_value()?);
        let grads = g
            .backward(loss)
            .map_err(|e| Error::non_finite(format!("epoch {epoch}: {e}")))?;
        let (next, next_adam) = adam_step(&params, &grads, &adam, hp)?;
        params = next;
        adam = next_adam;
    }
    Ok(MatcherModel { params, spec, classes, train_loss })
}

/// Classifies queries by per-class attention mass; ties go to the
/// lowest class index.
pub fn mn_predict_batch(
    model: &MatcherModel,
    support: &[&WindowInstance],
    query: &[&WindowInstance],
) -> Result<Vec<usize>> {
    if query.is_empty() {
        return Ok(Vec::new());
    }
    let support_labels = check_stratified(support, &model.classes)?;
    let mut g = Graph::new();
    let mut ids = indexmap::IndexMap::new();
    for (name, t) in model.params.iter() {
        ids.insert(name.clone(), g.constant(t.clone())?);
    }
    let probs = probs_on_graph(
        &mut g,
        &ids,
        &model.spec,
        support,
        &support_labels,
        query,
        model.classes.len(),
    )?;
    let out = g.value(probs);
    let c = model.classes.len();
    Ok((0..query.len())
        .map(|i| argmax(&out.data()[i * c..(i + 1) * c]))
        .collect())
}

pub fn mn_predict(
    model: &MatcherModel,
    support: &[&WindowInstance],
    query: &WindowInstance,
) -> Result<usize> {
    Ok(mn_predict_batch(model, support, std::slice::from_ref(&query))?[0])
}
