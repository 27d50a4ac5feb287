//! Leave-one-person-out evaluation, sweeps, adaptation curves, and
//! latency measurement.

mod wilcoxon;

pub use wilcoxon::{wilcoxon_signed_rank, SignificanceResult, EXACT_LIMIT};

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::{PersonDataset, WindowInstance};
use crate::episodes::{lopo_folds, KQuery, SamplingMode};
use crate::error::{Error, Result};
use crate::maml::{self, MamlConfig, MetaModel};
use crate::matcher::{self, MatcherConfig, MatcherModel};
use crate::models::DenseNetSpec;
use crate::params::ParamSet;
use crate::relation::{self, RnConfig, RnModel};

/// Fraction of predictions matching their labels.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} predictions but {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::invalid("accuracy of an empty prediction set"));
    }
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / predictions.len() as f64)
}

/// A trainable episodic learner the harness can evaluate.
pub trait MetaLearner: Sync {
    fn id(&self) -> String;
    fn k_support(&self) -> usize;
    /// Trains on the given persons, seeding all randomness from `seed`.
    fn train(&self, train: &PersonDataset, seed: u64) -> Result<Box<dyn SupportAdapter>>;
}

/// A trained model waiting for a test person's support set.
pub trait SupportAdapter: Send + Sync {
    fn with_support(&self, support: &[WindowInstance]) -> Result<Box<dyn Classifier>>;
}

/// A ready classifier; predictions are pure.
pub trait Classifier: Send + Sync {
    fn classify(&self, instance: &WindowInstance) -> Result<usize>;

    fn classify_batch(&self, instances: &[&WindowInstance]) -> Result<Vec<usize>> {
        instances.iter().map(|i| self.classify(i)).collect()
    }
}

/// The built-in algorithms, with their full configurations.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "algorithm", rename_all = "lowercase")]
pub enum AlgorithmSpec {
    Maml(MamlConfig),
    Rn(RnConfig),
    Matcher(MatcherConfig),
}

impl AlgorithmSpec {
    pub fn mode(&self) -> SamplingMode {
        match self {
            AlgorithmSpec::Maml(c) => c.mode,
            AlgorithmSpec::Rn(c) => c.mode,
            AlgorithmSpec::Matcher(c) => c.mode,
        }
    }

    pub fn config_echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("configs serialize")
    }

    /// Applies a named hyper-parameter for sweeps.
    pub fn with_param(&self, name: &str, value: f64) -> Result<AlgorithmSpec> {
        let as_count = |what: &str| -> Result<usize> {
            if value.fract() != 0.0 || value < 1.0 {
                return Err(Error::invalid(format!("{what} must be a positive integer, got {value}")));
            }
            Ok(value as usize)
        };
        let mut spec = self.clone();
        match (&mut spec, name) {
            (AlgorithmSpec::Maml(c), "k_support") => c.k_support = as_count(name)?,
            (AlgorithmSpec::Maml(c), "k_query") => c.k_query = KQuery::Count(as_count(name)?),
            (AlgorithmSpec::Maml(c), "gs") => c.gs = as_count(name)?,
            (AlgorithmSpec::Maml(c), "meta_gs") => c.meta_gs = as_count(name)?,
            (AlgorithmSpec::Maml(c), "epochs") => c.epochs = as_count(name)?,
            (AlgorithmSpec::Maml(c), "n_tasks") => c.n_tasks = as_count(name)?,
            (AlgorithmSpec::Maml(c), "hidden") => c.hidden = as_count(name)?,
            (AlgorithmSpec::Maml(c), "alpha") => c.alpha = value,
            (AlgorithmSpec::Maml(c), "beta") => c.beta = value,
            (AlgorithmSpec::Rn(c), "k_support") => c.k_support = as_count(name)?,
            (AlgorithmSpec::Rn(c), "k_query") => c.k_query = KQuery::Count(as_count(name)?),
            (AlgorithmSpec::Rn(c), "epochs") => c.epochs = as_count(name)?,
            (AlgorithmSpec::Rn(c), "patience") => c.patience = as_count(name)?,
            (AlgorithmSpec::Rn(c), "kernels") => c.kernels = as_count(name)?,
            (AlgorithmSpec::Rn(c), "relation_hidden") => c.relation_hidden = as_count(name)?,
            (AlgorithmSpec::Rn(c), "alpha") => c.alpha = value,
            (AlgorithmSpec::Matcher(c), "k_support") => c.k_support = as_count(name)?,
            (AlgorithmSpec::Matcher(c), "k_query") => c.k_query = KQuery::Count(as_count(name)?),
            (AlgorithmSpec::Matcher(c), "epochs") => c.epochs = as_count(name)?,
            (AlgorithmSpec::Matcher(c), "hidden") => c.hidden = as_count(name)?,
            (AlgorithmSpec::Matcher(c), "alpha") => c.alpha = value,
            _ => {
                return Err(Error::invalid(format!(
                    "algorithm {} has no sweepable parameter '{name}'",
                    self.id()
                )))
            }
        }
        Ok(spec)
    }
}

impl MetaLearner for AlgorithmSpec {
    fn id(&self) -> String {
        let base = match self {
            AlgorithmSpec::Maml(_) => "maml",
            AlgorithmSpec::Rn(_) => "rn",
            AlgorithmSpec::Matcher(_) => "matcher",
        };
        format!("{base}-{}", self.mode())
    }

    fn k_support(&self) -> usize {
        match self {
            AlgorithmSpec::Maml(c) => c.k_support,
            AlgorithmSpec::Rn(c) => c.k_support,
            AlgorithmSpec::Matcher(c) => c.k_support,
        }
    }

    fn train(&self, train: &PersonDataset, seed: u64) -> Result<Box<dyn SupportAdapter>> {
        match self {
            AlgorithmSpec::Maml(cfg) => {
                let cfg = MamlConfig { seed, ..cfg.clone() };
                let model = maml::meta_train(train, &cfg)?;
                Ok(Box::new(MamlAdapter { model, alpha: cfg.alpha, meta_gs: cfg.meta_gs }))
            }
            AlgorithmSpec::Rn(cfg) => {
                let cfg = RnConfig { seed, ..cfg.clone() };
                let model = relation::rn_train(train, &cfg)?;
                Ok(Box::new(RnAdapter { model }))
            }
            AlgorithmSpec::Matcher(cfg) => {
                let cfg = MatcherConfig { seed, ..cfg.clone() };
                let model = matcher::mn_train(train, &cfg)?;
                Ok(Box::new(MatcherAdapter { model }))
            }
        }
    }
}

struct MamlAdapter {
    model: MetaModel,
    alpha: f64,
    meta_gs: usize,
}

impl SupportAdapter for MamlAdapter {
    fn with_support(&self, support: &[WindowInstance]) -> Result<Box<dyn Classifier>> {
        let trajectory = maml::test_adapt(
            &self.model.params,
            &self.model.spec,
            &self.model.classes,
            support,
            self.alpha,
            self.meta_gs,
        )?;
        Ok(Box::new(MamlClassifier {
            params: trajectory.into_iter().last().expect("trajectory never empty"),
            spec: self.model.spec.clone(),
        }))
    }
}

struct MamlClassifier {
    params: ParamSet,
    spec: DenseNetSpec,
}

impl Classifier for MamlClassifier {
    fn classify(&self, instance: &WindowInstance) -> Result<usize> {
        Ok(maml::predict(&self.params, &self.spec, std::slice::from_ref(instance))?[0])
    }

    fn classify_batch(&self, instances: &[&WindowInstance]) -> Result<Vec<usize>> {
        let owned: Vec<WindowInstance> = instances.iter().map(|i| (*i).clone()).collect();
        maml::predict(&self.params, &self.spec, &owned)
    }
}

struct RnAdapter {
    model: RnModel,
}

impl SupportAdapter for RnAdapter {
    fn with_support(&self, support: &[WindowInstance]) -> Result<Box<dyn Classifier>> {
        Ok(Box::new(RnClassifier { model: self.model.clone(), support: support.to_vec() }))
    }
}

struct RnClassifier {
    model: RnModel,
    support: Vec<WindowInstance>,
}

impl Classifier for RnClassifier {
    fn classify(&self, instance: &WindowInstance) -> Result<usize> {
        let refs: Vec<&WindowInstance> = self.support.iter().collect();
        relation::rn_predict(&self.model, &refs, instance)
    }

    fn classify_batch(&self, instances: &[&WindowInstance]) -> Result<Vec<usize>> {
        let refs: Vec<&WindowInstance> = self.support.iter().collect();
        relation::rn_predict_batch(&self.model, &refs, instances)
    }
}

struct MatcherAdapter {
    model: MatcherModel,
}

impl SupportAdapter for MatcherAdapter {
    fn with_support(&self, support: &[WindowInstance]) -> Result<Box<dyn Classifier>> {
        Ok(Box::new(MatcherClassifier { model: self.model.clone(), support: support.to_vec() }))
    }
}

struct MatcherClassifier {
    model: MatcherModel,
    support: Vec<WindowInstance>,
}

impl Classifier for MatcherClassifier {
    fn classify(&self, instance: &WindowInstance) -> Result<usize> {
        let refs: Vec<&WindowInstance> = self.support.iter().collect();
        matcher::mn_predict(&self.model, &refs, instance)
    }

    fn classify_batch(&self, instances: &[&WindowInstance]) -> Result<Vec<usize>> {
        let refs: Vec<&WindowInstance> = self.support.iter().collect();
        matcher::mn_predict_batch(&self.model, &refs, instances)
    }
}

/// Draws a stratified support set (`k` per class) from one person and
/// returns it with that person's remaining instances as the query.
pub fn sample_support_query(
    ds: &PersonDataset,
    person: &str,
    k_support: usize,
    seed: u64,
) -> Result<(Vec<WindowInstance>, Vec<WindowInstance>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut support = Vec::new();
    let mut query = Vec::new();
    for class in ds.class_set() {
        let pool = ds.instances(person, class);
        if pool.len() <= k_support {
            return Err(Error::data(format!(
                "person {person} has {} instances of {class}, need more than {k_support}",
                pool.len()
            )));
        }
        let mut idx: Vec<usize> = (0..pool.len()).collect();
        idx.shuffle(&mut rng);
        for &i in &idx[..k_support] {
            support.push(pool[i].clone());
        }
        for &i in &idx[k_support..] {
            query.push(pool[i].clone());
        }
    }
    Ok((support, query))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldRecord {
    pub person_id: String,
    pub accuracy: f64,
    pub wall_secs: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub algorithm: String,
    pub per_fold: Vec<FoldRecord>,
    pub mean_accuracy: f64,
    pub config_echo: serde_json::Value,
}

impl EvalReport {
    pub fn accuracies(&self) -> Vec<f64> {
        self.per_fold.iter().map(|f| f.accuracy).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("algorithm,person_id,accuracy,wall_secs\n");
        for f in &self.per_fold {
            out.push_str(&format!(
                "{},{},{},{}\n",
                self.algorithm, f.person_id, f.accuracy, f.wall_secs
            ));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub base_seed: u64,
    /// Evaluate only the first `n` folds when set (sweeps use this).
    pub max_folds: Option<usize>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { base_seed: 7, max_folds: None }
    }
}

fn fold_seed(base: u64, fold: usize) -> u64 {
    base.wrapping_add(fold as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Leave-one-person-out evaluation of a learner.
///
/// Per fold: train on the other persons, draw the held-out person's
/// stratified support, classify all their remaining instances. Folds
/// run in parallel; per-fold seeds depend only on the fold index, so
/// the report is identical for any thread count.
pub fn lopo_evaluate(
    learner: &dyn MetaLearner,
    ds: &PersonDataset,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let mut folds = lopo_folds(ds)?;
    if let Some(max) = opts.max_folds {
        if max == 0 {
            return Err(Error::invalid("max_folds must be at least 1"));
        }
        folds.truncate(max);
    }
    let per_fold: Vec<FoldRecord> = folds
        .par_iter()
        .enumerate()
        .map(|(i, (train_persons, held_out))| -> Result<FoldRecord> {
            let annotate =
                |e: Error| Error::data(format!("fold {held_out}: {e}"));
            let start = Instant::now();
            let seed = fold_seed(opts.base_seed, i);
            let train_ds = ds.subset(train_persons)?;
            let adapter = learner.train(&train_ds, seed).map_err(annotate)?;
            let (support, query) =
                sample_support_query(ds, held_out, learner.k_support(), seed.wrapping_add(1))?;
            let classifier = adapter.with_support(&support).map_err(annotate)?;
            let refs: Vec<&WindowInstance> = query.iter().collect();
            let predictions = classifier.classify_batch(&refs).map_err(annotate)?;
            let labels: Vec<usize> = query
                .iter()
                .map(|q| ds.class_index(&q.activity_id).expect("query labels are dataset classes"))
                .collect();
            Ok(FoldRecord {
                person_id: held_out.clone(),
                accuracy: accuracy(&predictions, &labels)?,
                wall_secs: start.elapsed().as_secs_f64(),
            })
        })
        .collect::<Result<_>>()?;

    let mean_accuracy = per_fold.iter().map(|f| f.accuracy).sum::<f64>() / per_fold.len() as f64;
    Ok(EvalReport {
        algorithm: learner.id(),
        per_fold,
        mean_accuracy,
        config_echo: serde_json::Value::Null,
    })
}

/// One grid entry of a sweep: the evaluation, or the error that
/// stopped it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepEntry {
    pub value: f64,
    pub report: Option<EvalReport>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepReport {
    pub parameter: String,
    pub entries: Vec<SweepEntry>,
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("parameter,value,mean_accuracy,error\n");
        for e in &self.entries {
            match (&e.report, &e.error) {
                (Some(r), _) => out.push_str(&format!(
                    "{},{},{},\n",
                    self.parameter, e.value, r.mean_accuracy
                )),
                (None, Some(msg)) => out.push_str(&format!(
                    "{},{},,{}\n",
                    self.parameter,
                    e.value,
                    msg.replace(',', ";")
                )),
                (None, None) => unreachable!("entry holds a report or an error"),
            }
        }
        out
    }
}

/// Evaluates the learner across a hyper-parameter grid.
///
/// Grid values are sorted and deduplicated; every value reuses the same
/// base seed so differences reflect the parameter. A failing value is
/// recorded and the sweep continues.
pub fn sweep(
    spec: &AlgorithmSpec,
    ds: &PersonDataset,
    parameter: &str,
    grid: &[f64],
    opts: &EvalOptions,
) -> Result<SweepReport> {
    if grid.is_empty() {
        return Err(Error::invalid("sweep grid is empty"));
    }
    let mut values = grid.to_vec();
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite grid"));
    values.dedup();

    let mut entries = Vec::with_capacity(values.len());
    for &value in &values {
        let entry = match spec
            .with_param(parameter, value)
            .and_then(|s| lopo_evaluate(&s, ds, opts).map(|mut r| {
                r.config_echo = s.config_echo();
                r
            })) {
            Ok(report) => SweepEntry { value, report: Some(report), error: None },
            Err(e) => SweepEntry { value, report: None, error: Some(e.to_string()) },
        };
        entries.push(entry);
    }
    Ok(SweepReport { parameter: parameter.to_string(), entries })
}

/// Accuracy at one adaptation step of one checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub step: usize,
    pub accuracy: f64,
}

pub fn curve_to_csv(points: &[CurvePoint]) -> String {
    let mut out = String::from("epoch,step,accuracy\n");
    for p in points {
        out.push_str(&format!("{},{},{}\n", p.epoch, p.step, p.accuracy));
    }
    out
}

/// Adaptation curves over training checkpoints on one fixed meta-test
/// task: `(checkpoints x (meta_gs + 1))` accuracy points.
pub fn adaptation_curve(
    checkpoints: &[(usize, ParamSet)],
    spec: &DenseNetSpec,
    classes: &[String],
    support: &[WindowInstance],
    query: &[WindowInstance],
    alpha: f64,
    meta_gs: usize,
) -> Result<Vec<CurvePoint>> {
    if checkpoints.windows(2).any(|w| w[0].0 >= w[1].0) {
        return Err(Error::invalid("checkpoints must be ordered by ascending epoch"));
    }
    let labels: Vec<usize> = query
        .iter()
        .map(|q| {
            classes
                .iter()
                .position(|c| c == &q.activity_id)
                .ok_or_else(|| Error::data(format!("query activity {} unknown", q.activity_id)))
        })
        .collect::<Result<_>>()?;
    let mut points = Vec::with_capacity(checkpoints.len() * (meta_gs + 1));
    for (epoch, params) in checkpoints {
        if !spec.matches(params) {
            return Err(Error::shape(format!(
                "checkpoint at epoch {epoch} does not match the architecture descriptor"
            )));
        }
        let trajectory = maml::test_adapt(params, spec, classes, support, alpha, meta_gs)?;
        for (step, adapted) in trajectory.iter().enumerate() {
            let predictions = maml::predict(adapted, spec, query)?;
            points.push(CurvePoint {
                epoch: *epoch,
                step,
                accuracy: accuracy(&predictions, &labels)?,
            });
        }
    }
    Ok(points)
}

/// Per-query wall-clock statistics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LatencyStats {
    pub queries: usize,
    pub reps: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
}

impl LatencyStats {
    fn empty(reps: usize) -> Self {
        LatencyStats { queries: 0, reps, mean_ms: 0.0, p50_ms: 0.0, p95_ms: 0.0 }
    }

    fn from_samples(samples: &mut [f64], queries: usize, reps: usize) -> Self {
        samples.sort_by(|a, b| a.partial_cmp(b).expect("finite timings"));
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        let pct = |p: f64| samples[((samples.len() as f64 * p) as usize).min(samples.len() - 1)];
        LatencyStats {
            queries,
            reps,
            mean_ms: mean,
            p50_ms: pct(0.50),
            p95_ms: pct(0.95),
        }
    }
}

/// Times single-query classification over `reps` repetitions of the
/// query list, excluding a warm-up pass.
///
/// The classifier's whole `classify` path is measured: for an adapted
/// model that is pure inference, for a relation network it includes the
/// support comparison.
pub fn timing_benchmark(
    classifier: &dyn Classifier,
    queries: &[&WindowInstance],
    reps: usize,
) -> Result<LatencyStats> {
    if reps < 30 {
        return Err(Error::invalid("timing needs at least 30 repetitions"));
    }
    if queries.is_empty() {
        return Ok(LatencyStats::empty(reps));
    }
    for q in queries {
        classifier.classify(q)?; // warm-up
    }
    let mut samples = Vec::with_capacity(reps * queries.len());
    for _ in 0..reps {
        for q in queries {
            let start = Instant::now();
            let _ = classifier.classify(q)?;
            samples.push(start.elapsed().as_secs_f64() * 1e3);
        }
    }
    Ok(LatencyStats::from_samples(&mut samples, queries.len(), reps))
}

/// Times the support-consumption step (for adaptation-based learners,
/// the test-time gradient steps).
pub fn timing_adaptation(
    adapter: &dyn SupportAdapter,
    support: &[WindowInstance],
    reps: usize,
) -> Result<LatencyStats> {
    if reps < 30 {
        return Err(Error::invalid("timing needs at least 30 repetitions"));
    }
    adapter.with_support(support)?; // warm-up
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        let _ = adapter.with_support(support)?;
        samples.push(start.elapsed().as_secs_f64() * 1e3);
    }
    Ok(LatencyStats::from_samples(&mut samples, 1, reps))
}
