//! First-order MAML: episodic meta-training and test-time adaptation.
//!
//! The inner loop is plain full-batch gradient descent on the support
//! loss; the meta-update applies Adam to the mean of the per-task query
//! gradients taken at the adapted parameters (the first-order
//! approximation). Test-time adaptation repeats the inner-loop rule
//! from the trained meta-parameters.

use serde::{Deserialize, Serialize};

use crate::datasets::{PersonDataset, WindowInstance};
use crate::episodes::{KQuery, SamplingMode, Task, TaskConfig, TaskSampler};
use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph};
use crate::models::{class_indices, dense_batch, one_hot, DenseNetSpec};
use crate::optim::{adam_step, AdamParams, AdamState};
use crate::params::{sgd_step, ParamSet};
use crate::tensor::{argmax, Tensor};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MamlConfig {
    /// Inner-loop (adaptation) step size.
    pub alpha: f64,
    /// Meta-update Adam learning rate.
    pub beta: f64,
    /// Tasks per meta-batch.
    pub n_tasks: usize,
    /// Inner gradient steps during meta-training.
    pub gs: usize,
    /// Adaptation steps at test time.
    pub meta_gs: usize,
    pub epochs: usize,
    pub k_support: usize,
    pub k_query: KQuery,
    pub mode: SamplingMode,
    pub hidden: usize,
    /// Snapshot the meta-parameters every this many epochs.
    pub checkpoint_every: Option<usize>,
    pub seed: u64,
}

impl Default for MamlConfig {
    fn default() -> Self {
        MamlConfig {
            alpha: 0.4,
            beta: 0.001,
            n_tasks: 32,
            gs: 5,
            meta_gs: 10,
            epochs: 100,
            k_support: 5,
            k_query: KQuery::All,
            mode: SamplingMode::Personalised,
            hidden: 128,
            checkpoint_every: None,
            seed: 7,
        }
    }
}

impl MamlConfig {
    fn validate(&self) -> Result<()> {
        if self.alpha <= 0.0 || self.beta <= 0.0 {
            return Err(Error::invalid("alpha and beta must be positive"));
        }
        if self.n_tasks == 0 || self.epochs == 0 {
            return Err(Error::invalid("n_tasks and epochs must be at least 1"));
        }
        if self.k_support == 0 {
            return Err(Error::invalid("k_support must be at least 1"));
        }
        Ok(())
    }

    pub fn task_config(&self) -> TaskConfig {
        TaskConfig {
            k_support: self.k_support,
            k_query: self.k_query,
            mode: self.mode,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub meta_train_loss: f64,
}

/// A trained meta-model: parameters, the architecture that shaped them,
/// the class ordering predictions index into, and the training trace.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetaModel {
    pub params: ParamSet,
    pub spec: DenseNetSpec,
    pub classes: Vec<String>,
    pub log: Vec<EpochRecord>,
    /// `(epoch, params)` snapshots taken every `checkpoint_every` epochs.
    pub snapshots: Vec<(usize, ParamSet)>,
}

/// Support-set CCE loss and its gradients at `params`.
fn support_grads(
    params: &ParamSet,
    spec: &DenseNetSpec,
    x: &Tensor,
    targets: &Tensor,
) -> Result<(f64, Gradients)> {
    let mut g = Graph::new();
    let ids = params.register(&mut g)?;
    let xn = g.constant(x.clone())?;
    let probs = spec.probs(&mut g, &ids, xn)?;
    let loss = g.cce_loss(probs, targets)?;
    let value = g.value(loss).scalar_value()?;
    let grads = g.backward(loss)?;
    Ok((value, grads))
}

fn batch_of(
    instances: &[WindowInstance],
    classes: &[String],
) -> Result<(Tensor, Tensor)> {
    let refs: Vec<&WindowInstance> = instances.iter().collect();
    let x = dense_batch(&refs)?;
    let labels = class_indices(&refs, classes)?;
    let targets = one_hot(&labels, classes.len())?;
    Ok((x, targets))
}

/// `steps` full-batch gradient-descent updates on the support loss,
/// starting from (and never touching) `params`.
pub fn inner_adapt(
    params: &ParamSet,
    spec: &DenseNetSpec,
    support: &[WindowInstance],
    classes: &[String],
    alpha: f64,
    steps: usize,
) -> Result<ParamSet> {
    if support.is_empty() {
        return Err(Error::data("inner_adapt: empty support set"));
    }
    let (x, targets) = batch_of(support, classes)?;
    let mut adapted = params.clone();
    for _ in 0..steps {
        let (_, grads) = support_grads(&adapted, spec, &x, &targets)?;
        adapted = sgd_step(&adapted, &grads, alpha)?;
    }
    Ok(adapted)
}

/// The first-order meta-gradient over a batch of tasks: each task is
/// adapted from `params`, and the mean of the query gradients at the
/// adapted parameters is returned together with the mean query loss.
pub fn fomaml_meta_gradient(
    params: &ParamSet,
    spec: &DenseNetSpec,
    tasks: &[Task],
    classes: &[String],
    alpha: f64,
    gs: usize,
) -> Result<(Gradients, f64)> {
    if tasks.is_empty() {
        return Err(Error::invalid("meta-gradient of an empty task batch"));
    }
    let mut total: Option<Gradients> = None;
    let mut total_loss = 0.0;
    for task in tasks {
        let adapted = inner_adapt(params, spec, &task.support, classes, alpha, gs)?;
        let (x, targets) = batch_of(&task.query, classes)?;
        let (loss, grads) = support_grads(&adapted, spec, &x, &targets)?;
        total_loss += loss;
        match &mut total {
            None => total = Some(grads),
            Some(t) => t.accumulate(&grads)?,
        }
    }
    let mut mean = total.expect("at least one task");
    mean.scale(1.0 / tasks.len() as f64);
    Ok((mean, total_loss / tasks.len() as f64))
}

/// Meta-trains on the given persons' data.
///
/// Per epoch: sample `n_tasks` episodes, adapt each with `gs` inner
/// steps, average the query gradients at the adapted parameters, and
/// apply one Adam step at rate `beta`. Every batch is consumed whole;
/// there is no mini-batching.
pub fn meta_train(ds: &PersonDataset, cfg: &MamlConfig) -> Result<MetaModel> {
    cfg.validate()?;
    let classes = ds.class_set().to_vec();
    let spec = DenseNetSpec {
        input_len: ds.feature_shape().iter().product(),
        hidden: cfg.hidden,
        n_classes: classes.len(),
    };
    let mut params = spec.init(cfg.seed);
    let mut sampler = TaskSampler::new(ds, cfg.task_config())?;
    let mut adam = AdamState::new(&params);
    let hp = AdamParams::with_lr(cfg.beta);

    let mut log = Vec::with_capacity(cfg.epochs);
    let mut snapshots = Vec::new();
    for epoch in 1..=cfg.epochs {
        let with_epoch = |e: Error| Error::non_finite(format!("epoch {epoch}: {e}"));
        let mut tasks = Vec::with_capacity(cfg.n_tasks);
        for _ in 0..cfg.n_tasks {
            let task = sampler.next_task()?;
            task.validate(cfg.k_support)?;
            tasks.push(task);
        }
        let (meta_grad, mean_loss) =
            fomaml_meta_gradient(&params, &spec, &tasks, &classes, cfg.alpha, cfg.gs)
                .map_err(|e| match e {
                    Error::NonFinite(_) => with_epoch(e),
                    other => other,
                })?;
        let (next, next_adam) = adam_step(&params, &meta_grad, &adam, hp)?;
        params = next;
        adam = next_adam;
        log.push(EpochRecord { epoch, meta_train_loss: mean_loss });
        if let Some(every) = cfg.checkpoint_every {
            if every > 0 && epoch % every == 0 {
                snapshots.push((epoch, params.clone()));
            }
        }
    }
    Ok(MetaModel { params, spec, classes, log, snapshots })
}

/// Adapts the meta-parameters to a test person's support set.
///
/// Returns the whole adaptation trajectory: element `s` holds the
/// parameters after `s` gradient steps, so the sequence has
/// `meta_gs + 1` entries and starts at the unadapted meta-model.
pub fn test_adapt(
    params: &ParamSet,
    spec: &DenseNetSpec,
    classes: &[String],
    support: &[WindowInstance],
    alpha: f64,
    meta_gs: usize,
) -> Result<Vec<ParamSet>> {
    if support.is_empty() {
        return Err(Error::data("test_adapt: empty support set"));
    }
    let (x, targets) = batch_of(support, classes)?;
    let mut trajectory = Vec::with_capacity(meta_gs + 1);
    trajectory.push(params.clone());
    for _ in 0..meta_gs {
        let current = trajectory.last().expect("seeded above");
        let (_, grads) = support_grads(current, spec, &x, &targets)?;
        trajectory.push(sgd_step(current, &grads, alpha)?);
    }
    Ok(trajectory)
}

/// Class predictions for a query batch: argmax of the class
/// probabilities, ties to the lowest index.
pub fn predict(
    params: &ParamSet,
    spec: &DenseNetSpec,
    query: &[WindowInstance],
) -> Result<Vec<usize>> {
    if query.is_empty() {
        return Ok(Vec::new());
    }
    let refs: Vec<&WindowInstance> = query.iter().collect();
    let x = dense_batch(&refs)?;
    let mut g = Graph::new();
    let ids = params.register(&mut g)?;
    let xn = g.constant(x)?;
    let probs = spec.probs(&mut g, &ids, xn)?;
    let out = g.value(probs);
    let k = spec.n_classes;
    Ok((0..query.len())
        .map(|i| argmax(&out.data()[i * k..(i + 1) * k]))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{synth_generate, SyntheticSpec};
    use crate::episodes::lopo_folds;

    fn small_ds() -> PersonDataset {
        synth_generate(&SyntheticSpec {
            n_persons: 4,
            n_classes: 3,
            instances_per_person_class: 8,
            feature_shape: vec![6],
            person_effect: 1.0,
            noise: 0.1,
            seed: 11,
        })
        .unwrap()
    }

    fn small_cfg() -> MamlConfig {
        MamlConfig {
            n_tasks: 4,
            gs: 2,
            meta_gs: 3,
            epochs: 3,
            k_support: 2,
            k_query: KQuery::Count(3),
            hidden: 16,
            seed: 3,
            ..MamlConfig::default()
        }
    }

    fn a_task(ds: &PersonDataset, seed: u64) -> Task {
        let mut sampler = TaskSampler::new(
            ds,
            TaskConfig {
                k_support: 2,
                k_query: KQuery::Count(3),
                mode: SamplingMode::Personalised,
                seed,
            },
        )
        .unwrap();
        sampler.next_task().unwrap()
    }

    #[test]
    fn zero_steps_is_identity() {
        let ds = small_ds();
        let task = a_task(&ds, 1);
        let spec = DenseNetSpec { input_len: 6, hidden: 8, n_classes: 3 };
        let params = spec.init(0);
        let adapted =
            inner_adapt(&params, &spec, &task.support, ds.class_set(), 0.4, 0).unwrap();
        assert_eq!(adapted.max_abs_diff(&params).unwrap(), 0.0);
    }

    #[test]
    fn one_step_matches_hand_applied_gradient() {
        let ds = small_ds();
        let task = a_task(&ds, 2);
        let spec = DenseNetSpec { input_len: 6, hidden: 8, n_classes: 3 };
        let params = spec.init(0);
        let alpha = 0.05;
        let adapted =
            inner_adapt(&params, &spec, &task.support, ds.class_set(), alpha, 1).unwrap();

        let (x, targets) = batch_of(&task.support, ds.class_set()).unwrap();
        let (_, grads) = support_grads(&params, &spec, &x, &targets).unwrap();
        let expected = sgd_step(&params, &grads, alpha).unwrap();
        assert!(adapted.max_abs_diff(&expected).unwrap() < 1e-15);
        // theta untouched
        assert_eq!(params, spec.init(0));
    }

    #[test]
    fn descent_reduces_support_loss() {
        let ds = small_ds();
        let task = a_task(&ds, 3);
        let spec = DenseNetSpec { input_len: 6, hidden: 8, n_classes: 3 };
        let params = spec.init(1);
        let (x, targets) = batch_of(&task.support, ds.class_set()).unwrap();
        let (before, _) = support_grads(&params, &spec, &x, &targets).unwrap();
        let adapted =
            inner_adapt(&params, &spec, &task.support, ds.class_set(), 0.01, 5).unwrap();
        let (after, _) = support_grads(&adapted, &spec, &x, &targets).unwrap();
        assert!(after <= before, "loss rose from {before} to {after}");
    }

    #[test]
    fn meta_gradient_of_identical_tasks_equals_single_task() {
        let ds = small_ds();
        let task = a_task(&ds, 4);
        let spec = DenseNetSpec { input_len: 6, hidden: 8, n_classes: 3 };
        let params = spec.init(2);
        let single = fomaml_meta_gradient(&params, &spec, &[task.clone()], ds.class_set(), 0.1, 1)
            .unwrap();
        let tasks = vec![task.clone(), task.clone(), task];
        let repeated =
            fomaml_meta_gradient(&params, &spec, &tasks, ds.class_set(), 0.1, 1).unwrap();
        for (name, g) in single.0.iter() {
            let r = repeated.0.get(name).unwrap();
            for (a, b) in g.data().iter().zip(r.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn meta_gradient_is_order_independent() {
        let ds = small_ds();
        let tasks: Vec<Task> = (0..4).map(|s| a_task(&ds, 10 + s)).collect();
        let spec = DenseNetSpec { input_len: 6, hidden: 8, n_classes: 3 };
        let params = spec.init(5);
        let (fwd, _) =
            fomaml_meta_gradient(&params, &spec, &tasks, ds.class_set(), 0.1, 2).unwrap();
        let mut reversed = tasks;
        reversed.reverse();
        let (bwd, _) =
            fomaml_meta_gradient(&params, &spec, &reversed, ds.class_set(), 0.1, 2).unwrap();
        for (name, g) in fwd.iter() {
            let r = bwd.get(name).unwrap();
            for (a, b) in g.data().iter().zip(r.data()) {
                assert!((a - b).abs() < 1e-12, "{name} differs under permutation");
            }
        }
    }

    #[test]
    fn meta_train_is_deterministic_and_logs_epochs() {
        let ds = small_ds();
        let cfg = small_cfg();
        let a = meta_train(&ds, &cfg).unwrap();
        let b = meta_train(&ds, &cfg).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.log.len(), 3);
    }

    #[test]
    fn checkpoints_every_n_epochs() {
        let ds = small_ds();
        let cfg = MamlConfig { epochs: 6, checkpoint_every: Some(2), ..small_cfg() };
        let model = meta_train(&ds, &cfg).unwrap();
        let epochs: Vec<usize> = model.snapshots.iter().map(|(e, _)| *e).collect();
        assert_eq!(epochs, vec![2, 4, 6]);
    }

    #[test]
    fn test_adapt_trajectory_shape() {
        let ds = small_ds();
        let cfg = small_cfg();
        let model = meta_train(&ds, &cfg).unwrap();
        let folds = lopo_folds(&ds).unwrap();
        let held_out = &folds[0].1;
        let support: Vec<WindowInstance> = ds
            .class_set()
            .iter()
            .flat_map(|c| ds.instances(held_out, c)[..2].to_vec())
            .collect();

        let traj =
            test_adapt(&model.params, &model.spec, &model.classes, &support, 0.4, 4).unwrap();
        assert_eq!(traj.len(), 5);
        assert_eq!(traj[0], model.params);

        let zero =
            test_adapt(&model.params, &model.spec, &model.classes, &support, 0.4, 0).unwrap();
        assert_eq!(zero.len(), 1);
        assert_eq!(zero[0], model.params);

        assert!(test_adapt(&model.params, &model.spec, &model.classes, &[], 0.4, 1).is_err());
    }

    #[test]
    fn predict_argmax_and_ties() {
        // hand-built params: identity-ish logits from 3 features
        let spec = DenseNetSpec { input_len: 3, hidden: 3, n_classes: 3 };
        let mut params = ParamSet::new();
        // dense1 = identity, dense2 = identity: logits == relu(features)
        params
            .insert(
                "dense1.w",
                Tensor::new(vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap(),
            )
            .unwrap();
        params.insert("dense1.b", Tensor::zeros(vec![3])).unwrap();
        params
            .insert(
                "dense2.w",
                Tensor::new(vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap(),
            )
            .unwrap();
        params.insert("dense2.b", Tensor::zeros(vec![3])).unwrap();

        let inst = |v: Vec<f64>| WindowInstance {
            features: Tensor::new(vec![3], v).unwrap(),
            activity_id: "c0".into(),
            person_id: "p".into(),
        };
        let query = vec![
            inst(vec![2.0, 1.0, 0.0]), // class 0
            inst(vec![1.0, 1.0, 1.0]), // tie -> class 0
            inst(vec![0.0, 0.0, 2.0]), // class 2
        ];
        let labels = predict(&params, &spec, &query).unwrap();
        assert_eq!(labels, vec![0, 0, 2]);
        assert!(predict(&params, &spec, &[]).unwrap().is_empty());
    }
}
