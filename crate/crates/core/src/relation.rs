//! Relation Networks: a convolutional feature module and a learned
//! similarity head, trained end to end on episodic matching tasks and
//! applied at test time without any retraining.

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{PersonDataset, WindowInstance};
use crate::episodes::{KQuery, SamplingMode, TaskConfig, TaskSampler};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::models::{class_indices, grid_batch, one_hot, rn_grid_for_shape, EmbedSpec, RelationSpec};
use crate::optim::{adam_step, AdamParams, AdamState};
use crate::params::ParamSet;
use crate::tensor::{argmax, Tensor};

/// Training objective for the relation scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RnLoss {
    /// Mean squared error against one-hot targets.
    Mse,
    /// Categorical cross-entropy on the softmax over scores.
    Cce,
}

/// How a class's support exemplars combine when `k_support > 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    /// Element-wise sum of the class's embeddings, one relation
    /// evaluation per class.
    Sum,
    /// Score every exemplar and take the per-class maximum.
    PerExemplarMax,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RnConfig {
    /// Adam learning rate for the joint feature/relation update.
    pub alpha: f64,
    pub k_support: usize,
    pub k_query: KQuery,
    pub epochs: usize,
    pub mode: SamplingMode,
    pub loss: RnLoss,
    /// Early-stopping patience, in epochs without a validation
    /// accuracy improvement.
    pub patience: usize,
    pub kernels: usize,
    pub relation_hidden: usize,
    pub pool: (usize, usize),
    pub aggregation: Aggregation,
    pub checkpoint_every: Option<usize>,
    pub seed: u64,
}

impl Default for RnConfig {
    fn default() -> Self {
        RnConfig {
            alpha: 0.001,
            k_support: 5,
            k_query: KQuery::All,
            epochs: 300,
            mode: SamplingMode::Personalised,
            loss: RnLoss::Mse,
            patience: 10,
            kernels: 16,
            relation_hidden: 64,
            pool: (2, 2),
            aggregation: Aggregation::Sum,
            checkpoint_every: None,
            seed: 7,
        }
    }
}

impl RnConfig {
    fn validate(&self) -> Result<()> {
        if self.alpha <= 0.0 {
            return Err(Error::invalid("alpha must be positive"));
        }
        if self.patience == 0 {
            return Err(Error::invalid("patience must be at least 1"));
        }
        if self.k_support == 0 || self.epochs == 0 {
            return Err(Error::invalid("k_support and epochs must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RnEpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RnTrainLog {
    pub records: Vec<RnEpochRecord>,
    /// Epoch training stopped at, when patience ran out early.
    pub stopped_early_at: Option<usize>,
    /// Epoch whose parameters the returned model carries.
    pub best_epoch: usize,
}

/// A trained relation network: the two parameter sets and the
/// descriptors that shape them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RnModel {
    pub feature_params: ParamSet,
    pub relation_params: ParamSet,
    pub embed_spec: EmbedSpec,
    pub relation_spec: RelationSpec,
    pub aggregation: Aggregation,
    pub classes: Vec<String>,
    pub log: RnTrainLog,
    pub snapshots: Vec<(usize, ParamSet, ParamSet)>,
}

const FEATURE_PREFIX: &str = "feature.";
const RELATION_PREFIX: &str = "relation.";

fn register_constants(g: &mut Graph, params: &ParamSet) -> Result<IndexMap<String, NodeId>> {
    let mut ids = IndexMap::new();
    for (name, t) in params.iter() {
        ids.insert(name.clone(), g.constant(t.clone())?);
    }
    Ok(ids)
}

/// Embeds instances through the feature module: `[n, embed_len]`.
pub fn embed(
    spec: &EmbedSpec,
    feature_params: &ParamSet,
    instances: &[&WindowInstance],
) -> Result<Tensor> {
    let mut g = Graph::new();
    let ids = register_constants(&mut g, feature_params)?;
    let x = g.constant(grid_batch(instances, spec.grid)?)?;
    let e = spec.embed(&mut g, &ids, "", x)?;
    Ok(g.value(e).clone())
}

/// Element-wise sum of each class's support embeddings.
///
/// `embeddings` is `[n, d]` with a class label per row; every class
/// must contribute exactly `k_support` rows.
pub fn aggregate_support(
    embeddings: &Tensor,
    labels: &[usize],
    n_classes: usize,
    k_support: usize,
) -> Result<Tensor> {
    let s = embeddings.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::shape("aggregate_support: embeddings/labels mismatch"));
    }
    for c in 0..n_classes {
        let n = labels.iter().filter(|&&l| l == c).count();
        if n != k_support {
            return Err(Error::data(format!(
                "aggregate_support: class {c} has {n} embeddings, expected {k_support}"
            )));
        }
    }
    let d = s[1];
    let mut out = vec![0.0; n_classes * d];
    for (row, &c) in labels.iter().enumerate() {
        for j in 0..d {
            out[c * d + j] += embeddings.data()[row * d + j];
        }
    }
    Tensor::new(vec![n_classes, d], out)
}

/// Relation scores of one query embedding against per-class aggregates:
/// `|C|` values in `(0, 1)`.
pub fn relation_scores(
    spec: &RelationSpec,
    relation_params: &ParamSet,
    query_embedding: &Tensor,
    aggregates: &Tensor,
) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let ids = register_constants(&mut g, relation_params)?;
    let agg = g.constant(aggregates.clone())?;
    let q = g.constant(query_embedding.reshaped(vec![1, query_embedding.numel()])?)?;
    let pairs = g.pair_concat(agg, q)?;
    let scores = spec.score(&mut g, &ids, "", pairs)?;
    Ok(g.value(scores).data().to_vec())
}

/// Builds the `[nq, |C|]` score matrix on a shared graph, routing
/// through either per-class aggregation or per-exemplar max.
#[allow(clippy::too_many_arguments)]
fn scores_on_graph(
    g: &mut Graph,
    ids: &IndexMap<String, NodeId>,
    embed_spec: &EmbedSpec,
    relation_spec: &RelationSpec,
    aggregation: Aggregation,
    support: &[&WindowInstance],
    support_labels: &[usize],
    query: &[&WindowInstance],
    n_classes: usize,
    k_support: usize,
) -> Result<NodeId> {
    let sx = g.constant(grid_batch(support, embed_spec.grid)?)?;
    let s_emb = embed_spec.embed(g, ids, FEATURE_PREFIX, sx)?;
    let qx = g.constant(grid_batch(query, embed_spec.grid)?)?;
    let q_emb = embed_spec.embed(g, ids, FEATURE_PREFIX, qx)?;
    let nq = query.len();

    match aggregation {
        Aggregation::Sum => {
            let _ = k_support;
            let agg = g.group_sum(s_emb, support_labels, n_classes)?;
            let pairs = g.pair_concat(agg, q_emb)?;
            let scores = relation_spec.score(g, ids, RELATION_PREFIX, pairs)?;
            g.reshape(scores, vec![nq, n_classes])
        }
        Aggregation::PerExemplarMax => {
            let pairs = g.pair_concat(s_emb, q_emb)?;
            let scores = relation_spec.score(g, ids, RELATION_PREFIX, pairs)?;
            let per_exemplar = g.reshape(scores, vec![nq, support.len()])?;
            g.group_max_cols(per_exemplar, support_labels, n_classes)
        }
    }
}

fn check_stratified(
    support: &[&WindowInstance],
    classes: &[String],
) -> Result<(Vec<usize>, usize)> {
    let labels = class_indices(support, classes)?;
    let mut counts = vec![0usize; classes.len()];
    for &l in &labels {
        counts[l] += 1;
    }
    let k = counts[0];
    if k == 0 || counts.iter().any(|&c| c != k) {
        return Err(Error::data(format!(
            "support is not stratified: per-class counts {counts:?}"
        )));
    }
    Ok((labels, k))
}

struct RnNets {
    embed_spec: EmbedSpec,
    relation_spec: RelationSpec,
}

fn build_nets(ds: &PersonDataset, cfg: &RnConfig) -> Result<RnNets> {
    let grid = rn_grid_for_shape(ds.feature_shape())?;
    let embed_spec = EmbedSpec {
        grid,
        kernels: cfg.kernels,
        kernel: (3, 3),
        pool: cfg.pool,
    };
    let relation_spec = RelationSpec {
        input_len: 2 * embed_spec.embed_len()?,
        hidden: cfg.relation_hidden,
    };
    Ok(RnNets { embed_spec, relation_spec })
}

/// Trains feature and relation modules jointly, one episodic task per
/// epoch, with early stopping on a held-out validation person.
pub fn rn_train(ds: &PersonDataset, cfg: &RnConfig) -> Result<RnModel> {
    cfg.validate()?;
    let classes = ds.class_set().to_vec();
    let nets = build_nets(ds, cfg)?;
    let feature = nets.embed_spec.init(cfg.seed);
    let relation = nets.relation_spec.init(cfg.seed.wrapping_add(1));
    let mut params = ParamSet::merged(FEATURE_PREFIX, &feature, RELATION_PREFIX, &relation)?;

    // hold one person out of the task pool for early stopping when the
    // pool is big enough
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let persons = ds.person_ids();
    let (train_ds, val_task) = if persons.len() >= 2 {
        let val_person = persons[rng.gen_range(0..persons.len())].clone();
        let train: Vec<String> = persons.iter().filter(|p| **p != val_person).cloned().collect();
        let val_ds = ds.subset(std::slice::from_ref(&val_person))?;
        let mut val_sampler = TaskSampler::new(
            &val_ds,
            TaskConfig {
                k_support: cfg.k_support,
                k_query: KQuery::All,
                mode: SamplingMode::Personalised,
                seed: cfg.seed,
            },
        )?;
        let task = val_sampler.next_task()?;
        (ds.subset(&train)?, Some(task))
    } else {
        (ds.clone(), None)
    };

    let mut sampler = TaskSampler::new(
        &train_ds,
        TaskConfig {
            k_support: cfg.k_support,
            k_query: cfg.k_query,
            mode: cfg.mode,
            seed: cfg.seed,
        },
    )?;
    let mut adam = AdamState::new(&params);
    let hp = AdamParams::with_lr(cfg.alpha);

    let mut log = RnTrainLog::default();
    let mut snapshots = Vec::new();
    let mut best = (0usize, f64::NEG_INFINITY, params.clone());
    let mut stale = 0usize;
    for epoch in 1..=cfg.epochs {
        let task = sampler.next_task()?;
        task.validate(cfg.k_support)?;
        let support: Vec<&WindowInstance> = task.support.iter().collect();
        let query: Vec<&WindowInstance> = task.query.iter().collect();
        let (support_labels, _) = check_stratified(&support, &classes)?;
        let query_labels = class_indices(&query, &classes)?;
        let targets = one_hot(&query_labels, classes.len())?;

        let mut g = Graph::new();
        let ids = params.register(&mut g)?;
        let scores = scores_on_graph(
            &mut g,
            &ids,
            &nets.embed_spec,
            &nets.relation_spec,
            cfg.aggregation,
            &support,
            &support_labels,
            &query,
            classes.len(),
            cfg.k_support,
        )?;
        let loss = match cfg.loss {
            RnLoss::Mse => g.mse_loss(scores, &targets)?,
            RnLoss::Cce => {
                let probs = g.softmax(scores)?;
                g.cce_loss(probs, &targets)?
            }
        };
        let loss_value = g.value(loss).scalar_value()?;
        let grads = g
            .backward(loss)
            .map_err(|e| Error::non_finite(format!("epoch {epoch}: {e}")))?;
        let (next, next_adam) = adam_step(&params, &grads, &adam, hp)?;
        params = next;
        adam = next_adam;

        let val_accuracy = match &val_task {
            Some(task) => {
                let model = model_from(&nets, &params, &classes, cfg.aggregation);
                let support: Vec<&WindowInstance> = task.support.iter().collect();
                let query: Vec<&WindowInstance> = task.query.iter().collect();
                let predictions = rn_predict_batch(&model, &support, &query)?;
                let labels = class_indices(&query, &classes)?;
                let correct = predictions.iter().zip(&labels).filter(|(p, l)| p == l).count();
                Some(correct as f64 / labels.len() as f64)
            }
            None => None,
        };
        log.records.push(RnEpochRecord { epoch, train_loss: loss_value, val_accuracy });

        if let Some(every) = cfg.checkpoint_every {
            if every > 0 && epoch % every == 0 {
                snapshots.push((
                    epoch,
                    params.strip_prefix(FEATURE_PREFIX),
                    params.strip_prefix(RELATION_PREFIX),
                ));
            }
        }

        if let Some(acc) = val_accuracy {
            if acc > best.1 {
                best = (epoch, acc, params.clone());
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience {
                    log.stopped_early_at = Some(epoch);
                    break;
                }
            }
        }
    }

    let final_params = if val_task.is_some() {
        log.best_epoch = best.0;
        best.2
    } else {
        log.best_epoch = log.records.last().map_or(0, |r| r.epoch);
        params
    };
    let mut model = model_from(&nets, &final_params, &classes, cfg.aggregation);
    model.log = log;
    model.snapshots = snapshots;
    Ok(model)
}

fn model_from(
    nets: &RnNets,
    merged: &ParamSet,
    classes: &[String],
    aggregation: Aggregation,
) -> RnModel {
    RnModel {
        feature_params: merged.strip_prefix(FEATURE_PREFIX),
        relation_params: merged.strip_prefix(RELATION_PREFIX),
        embed_spec: nets.embed_spec.clone(),
        relation_spec: nets.relation_spec.clone(),
        aggregation,
        classes: classes.to_vec(),
        log: RnTrainLog::default(),
        snapshots: Vec::new(),
    }
}

/// Classifies a batch of queries against a stratified support set.
///
/// Pure with respect to the model: no parameters change.
pub fn rn_predict_batch(
    model: &RnModel,
    support: &[&WindowInstance],
    query: &[&WindowInstance],
) -> Result<Vec<usize>> {
    if query.is_empty() {
        return Ok(Vec::new());
    }
    let (support_labels, k) = check_stratified(support, &model.classes)?;
    let merged = ParamSet::merged(
        FEATURE_PREFIX,
        &model.feature_params,
        RELATION_PREFIX,
        &model.relation_params,
    )?;
    let mut g = Graph::new();
    let ids = register_constants(&mut g, &merged)?;
    let scores = scores_on_graph(
        &mut g,
        &ids,
        &model.embed_spec,
        &model.relation_spec,
        model.aggregation,
        support,
        &support_labels,
        query,
        model.classes.len(),
        k,
    )?;
    let out = g.value(scores);
    let c = model.classes.len();
    Ok((0..query.len())
        .map(|i| argmax(&out.data()[i * c..(i + 1) * c]))
        .collect())
}

/// Classifies one query instance; the full support-comparison path
/// (support embedding, aggregation, relation scoring) runs per call.
pub fn rn_predict(
    model: &RnModel,
    support: &[&WindowInstance],
    query: &WindowInstance,
) -> Result<usize> {
    Ok(rn_predict_batch(model, support, std::slice::from_ref(&query))?[0])
}
