//! Episodic task construction and person-aware train/test splitting.
//!
//! Three sampling regimes are supported: personalised tasks draw the
//! whole episode from one person; person-aware tasks constrain each
//! class's support to a single (possibly different) person with the
//! query drawn from one person; conventional tasks ignore person
//! identity entirely.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{PersonDataset, WindowInstance};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplingMode {
    /// Support and query all from one person.
    Personalised,
    /// Each class's support from a single person; query from one person.
    PersonAware,
    /// No person constraint anywhere.
    Conventional,
}

impl std::fmt::Display for SamplingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            SamplingMode::Personalised => "personalised",
            SamplingMode::PersonAware => "person-aware",
            SamplingMode::Conventional => "conventional",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for SamplingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "personalised" | "personalized" => Ok(SamplingMode::Personalised),
            "person-aware" => Ok(SamplingMode::PersonAware),
            "conventional" => Ok(SamplingMode::Conventional),
            other => Err(Error::invalid(format!(
                "unknown sampling mode '{other}' (expected personalised, person-aware or conventional)"
            ))),
        }
    }
}

/// Query size per class: a fixed count, or everything left over after
/// the support draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KQuery {
    Count(usize),
    All,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskConfig {
    pub k_support: usize,
    pub k_query: KQuery,
    pub mode: SamplingMode,
    pub seed: u64,
}

/// Identity of an instance inside its dataset: (person, class, slot).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InstanceRef {
    pub person_id: String,
    pub activity_id: String,
    pub index: usize,
}

/// One episode: a stratified support set and a query set, plus the
/// provenance needed to audit the sampling constraints.
#[derive(Debug, Clone)]
pub struct Task {
    pub support: Vec<WindowInstance>,
    pub query: Vec<WindowInstance>,
    pub class_set: Vec<String>,
    pub mode: SamplingMode,
    pub support_refs: Vec<InstanceRef>,
    pub query_refs: Vec<InstanceRef>,
}

/// Debug dump of a task's composition, without feature payloads.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskDump {
    pub mode: SamplingMode,
    pub class_set: Vec<String>,
    pub support: Vec<InstanceRef>,
    pub query: Vec<InstanceRef>,
}

impl Task {
    /// Distinct persons contributing instances, sorted.
    pub fn persons(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .support_refs
            .iter()
            .chain(&self.query_refs)
            .map(|r| r.person_id.clone())
            .collect();
        out.sort();
        out.dedup();
        out
    }

    pub fn dump(&self) -> TaskDump {
        TaskDump {
            mode: self.mode,
            class_set: self.class_set.clone(),
            support: self.support_refs.clone(),
            query: self.query_refs.clone(),
        }
    }

    /// Checks the structural invariants of this task's sampling mode;
    /// the meta-learners re-assert this on every sampled task.
    pub fn validate(&self, k_support: usize) -> Result<()> {
        let c = self.class_set.len();
        if self.support.len() != k_support * c {
            return Err(Error::data(format!(
                "support has {} instances, expected {k_support} x {c}",
                self.support.len()
            )));
        }
        for class in &self.class_set {
            let n = self.support.iter().filter(|i| &i.activity_id == class).count();
            if n != k_support {
                return Err(Error::data(format!(
                    "class {class} has {n} support instances, expected {k_support}"
                )));
            }
        }
        for r in &self.support_refs {
            if self.query_refs.contains(r) {
                return Err(Error::data("support and query overlap"));
            }
        }
        match self.mode {
            SamplingMode::Personalised => {
                let persons = self.persons();
                if persons.len() != 1 {
                    return Err(Error::data(format!(
                        "personalised task spans {} persons",
                        persons.len()
                    )));
                }
            }
            SamplingMode::PersonAware => {
                for class in &self.class_set {
                    let mut persons: Vec<&str> = self
                        .support_refs
                        .iter()
                        .filter(|r| &r.activity_id == class)
                        .map(|r| r.person_id.as_str())
                        .collect();
                    persons.sort();
                    persons.dedup();
                    if persons.len() != 1 {
                        return Err(Error::data(format!(
                            "person-aware task: class {class} support spans {} persons",
                            persons.len()
                        )));
                    }
                }
                let mut qp: Vec<&str> =
                    self.query_refs.iter().map(|r| r.person_id.as_str()).collect();
                qp.sort();
                qp.dedup();
                if qp.len() != 1 {
                    return Err(Error::data("person-aware task: query spans multiple persons"));
                }
            }
            SamplingMode::Conventional => {}
        }
        Ok(())
    }
}

/// Leave-one-person-out folds: one per person, ordered by person id.
pub fn lopo_folds(ds: &PersonDataset) -> Result<Vec<(Vec<String>, String)>> {
    let persons = ds.person_ids();
    if persons.len() < 2 {
        return Err(Error::data(format!(
            "leave-one-person-out needs at least 2 persons, got {}",
            persons.len()
        )));
    }
    Ok(persons
        .iter()
        .map(|held_out| {
            let train: Vec<String> =
                persons.iter().filter(|p| *p != held_out).cloned().collect();
            (train, held_out.clone())
        })
        .collect())
}

/// Stateful episodic sampler: owns its RNG, so the sequence of tasks is
/// a deterministic function of `(cfg.seed, call index)`.
pub struct TaskSampler<'a> {
    ds: &'a PersonDataset,
    cfg: TaskConfig,
    rng: ChaCha8Rng,
}

impl<'a> TaskSampler<'a> {
    pub fn new(ds: &'a PersonDataset, cfg: TaskConfig) -> Result<Self> {
        if cfg.k_support == 0 {
            return Err(Error::invalid("k_support must be at least 1"));
        }
        if let KQuery::Count(0) = cfg.k_query {
            return Err(Error::invalid("k_query must be at least 1"));
        }
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(TaskSampler { ds, cfg, rng })
    }

    pub fn config(&self) -> &TaskConfig {
        &self.cfg
    }

    pub fn next_task(&mut self) -> Result<Task> {
        sample_task(self.ds, &self.cfg, &mut self.rng)
    }
}

/// Number of query instances per class a (person, class) pool must be
/// able to supply beyond the support draw.
fn query_need(k_query: KQuery) -> usize {
    match k_query {
        KQuery::Count(k) => k,
        KQuery::All => 1,
    }
}

/// Draws one episode in the configured mode.
///
/// Support is stratified with exactly `k_support` per class; the query
/// is stratified with `k_query` per class, or takes every remaining
/// instance of the query person under [`KQuery::All`]. In conventional
/// mode `All` resolves to `K - k_support` per class, where `K` is the
/// smallest per-(person, class) count in the pool.
pub fn sample_task(ds: &PersonDataset, cfg: &TaskConfig, rng: &mut ChaCha8Rng) -> Result<Task> {
    let classes = ds.class_set().to_vec();
    if classes.is_empty() {
        return Err(Error::data("dataset has no classes"));
    }
    match cfg.mode {
        SamplingMode::Personalised => sample_personalised(ds, cfg, &classes, rng),
        SamplingMode::PersonAware => sample_person_aware(ds, cfg, &classes, rng),
        SamplingMode::Conventional => sample_conventional(ds, cfg, &classes, rng),
    }
}

fn pick<'v, T>(rng: &mut ChaCha8Rng, items: &'v [T]) -> &'v T {
    &items[rng.gen_range(0..items.len())]
}

/// Draws `k` distinct indices from `0..n` in random order.
fn draw_indices(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.truncate(k);
    idx
}

fn push_instances(
    ds: &PersonDataset,
    person: &str,
    class: &str,
    indices: &[usize],
    out: &mut Vec<WindowInstance>,
    refs: &mut Vec<InstanceRef>,
) {
    let pool = ds.instances(person, class);
    for &i in indices {
        out.push(pool[i].clone());
        refs.push(InstanceRef {
            person_id: person.to_string(),
            activity_id: class.to_string(),
            index: i,
        });
    }
}

fn sample_personalised(
    ds: &PersonDataset,
    cfg: &TaskConfig,
    classes: &[String],
    rng: &mut ChaCha8Rng,
) -> Result<Task> {
    let need = cfg.k_support + query_need(cfg.k_query);
    let eligible: Vec<String> = ds
        .person_ids()
        .into_iter()
        .filter(|p| classes.iter().all(|c| ds.instances(p, c).len() >= need))
        .collect();
    if eligible.is_empty() {
        return Err(Error::data(format!(
            "no person has {need} instances in every class (k_support={}, k_query={:?})",
            cfg.k_support, cfg.k_query
        )));
    }
    let person = pick(rng, &eligible).clone();

    let mut support = Vec::new();
    let mut query = Vec::new();
    let mut support_refs = Vec::new();
    let mut query_refs = Vec::new();
    for class in classes {
        let n = ds.instances(&person, class).len();
        let mut order = draw_indices(rng, n, n);
        let support_idx: Vec<usize> = order.drain(..cfg.k_support).collect();
        let query_idx: Vec<usize> = match cfg.k_query {
            KQuery::Count(k) => order.drain(..k).collect(),
            KQuery::All => order,
        };
        push_instances(ds, &person, class, &support_idx, &mut support, &mut support_refs);
        push_instances(ds, &person, class, &query_idx, &mut query, &mut query_refs);
    }
    Ok(Task {
        support,
        query,
        class_set: classes.to_vec(),
        mode: cfg.mode,
        support_refs,
        query_refs,
    })
}

fn sample_person_aware(
    ds: &PersonDataset,
    cfg: &TaskConfig,
    classes: &[String],
    rng: &mut ChaCha8Rng,
) -> Result<Task> {
    let persons = ds.person_ids();

    // per-class support person, then the support draw itself
    let mut support = Vec::new();
    let mut support_refs = Vec::new();
    let mut support_person_per_class = Vec::new();
    let mut support_idx_per_class: Vec<Vec<usize>> = Vec::new();
    for class in classes {
        let eligible: Vec<String> = persons
            .iter()
            .filter(|p| ds.instances(p, class).len() >= cfg.k_support)
            .cloned()
            .collect();
        if eligible.is_empty() {
            return Err(Error::data(format!(
                "no person has {} instances of class {class}",
                cfg.k_support
            )));
        }
        let person = pick(rng, &eligible).clone();
        let idx = draw_indices(rng, ds.instances(&person, class).len(), cfg.k_support);
        push_instances(ds, &person, class, &idx, &mut support, &mut support_refs);
        support_person_per_class.push(person);
        support_idx_per_class.push(idx);
    }

    // the query person may coincide with a support person; overlapping
    // support indices are excluded from their class's query pool
    let eligible_query: Vec<String> = persons
        .iter()
        .filter(|p| {
            classes.iter().enumerate().all(|(ci, c)| {
                let total = ds.instances(p, c).len();
                let used = if &support_person_per_class[ci] == *p {
                    cfg.k_support
                } else {
                    0
                };
                total.saturating_sub(used) >= query_need(cfg.k_query)
            })
        })
        .cloned()
        .collect();
    if eligible_query.is_empty() {
        return Err(Error::data("no person can supply the query set"));
    }
    let query_person = pick(rng, &eligible_query).clone();

    let mut query = Vec::new();
    let mut query_refs = Vec::new();
    for (ci, class) in classes.iter().enumerate() {
        let n = ds.instances(&query_person, class).len();
        let excluded: &[usize] = if support_person_per_class[ci] == query_person {
            &support_idx_per_class[ci]
        } else {
            &[]
        };
        let available: Vec<usize> = (0..n).filter(|i| !excluded.contains(i)).collect();
        let order = draw_indices(rng, available.len(), available.len());
        let take = match cfg.k_query {
            KQuery::Count(k) => k,
            KQuery::All => available.len(),
        };
        let idx: Vec<usize> = order.into_iter().take(take).map(|i| available[i]).collect();
        if idx.len() < take || idx.is_empty() {
            return Err(Error::data(format!(
                "query person {query_person} cannot supply class {class}"
            )));
        }
        push_instances(ds, &query_person, class, &idx, &mut query, &mut query_refs);
    }
    Ok(Task {
        support,
        query,
        class_set: classes.to_vec(),
        mode: cfg.mode,
        support_refs,
        query_refs,
    })
}

fn sample_conventional(
    ds: &PersonDataset,
    cfg: &TaskConfig,
    classes: &[String],
    rng: &mut ChaCha8Rng,
) -> Result<Task> {
    let persons = ds.person_ids();
    let k_query = match cfg.k_query {
        KQuery::Count(k) => k,
        // mirror the per-person "all remaining" size on pooled data
        KQuery::All => {
            let k = ds.min_instances_per_person_class();
            k.checked_sub(cfg.k_support)
                .filter(|&q| q > 0)
                .ok_or_else(|| {
                    Error::data(format!(
                        "k_support {} leaves no query instances (K = {k})",
                        cfg.k_support
                    ))
                })?
        }
    };

    let mut support = Vec::new();
    let mut query = Vec::new();
    let mut support_refs = Vec::new();
    let mut query_refs = Vec::new();
    for class in classes {
        // pooled (person, index) pool across all persons
        let mut pool: Vec<(String, usize)> = Vec::new();
        for p in &persons {
            for i in 0..ds.instances(p, class).len() {
                pool.push((p.clone(), i));
            }
        }
        if pool.len() < cfg.k_support + k_query {
            return Err(Error::data(format!(
                "class {class} has {} instances, need {}",
                pool.len(),
                cfg.k_support + k_query
            )));
        }
        pool.shuffle(rng);
        for (p, i) in pool.drain(..cfg.k_support) {
            push_instances(ds, &p, class, &[i], &mut support, &mut support_refs);
        }
        for (p, i) in pool.drain(..k_query) {
            push_instances(ds, &p, class, &[i], &mut query, &mut query_refs);
        }
    }
    Ok(Task {
        support,
        query,
        class_set: classes.to_vec(),
        mode: cfg.mode,
        support_refs,
        query_refs,
    })
}

/// Expands a task into Relation-Network training pairs: every query
/// instance paired with the complete support set.
pub fn build_rn_instances(task: &Task) -> Result<Vec<(&WindowInstance, &[WindowInstance])>> {
    if task.query.is_empty() {
        return Err(Error::data("task has an empty query set"));
    }
    Ok(task.query.iter().map(|q| (q, task.support.as_slice())).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{synth_generate, SyntheticSpec};

    fn tiny_ds(persons: usize, classes: usize, k: usize) -> PersonDataset {
        synth_generate(&SyntheticSpec {
            n_persons: persons,
            n_classes: classes,
            instances_per_person_class: k,
            feature_shape: vec![4],
            person_effect: 1.0,
            noise: 0.1,
            seed: 5,
        })
        .unwrap()
    }

    fn cfg(mode: SamplingMode, ks: usize, kq: KQuery) -> TaskConfig {
        TaskConfig { k_support: ks, k_query: kq, mode, seed: 99 }
    }

    #[test]
    fn lopo_folds_partition_persons() {
        let ds = tiny_ds(3, 2, 3);
        let folds = lopo_folds(&ds).unwrap();
        assert_eq!(folds.len(), 3);
        let mut held: Vec<String> = folds.iter().map(|(_, h)| h.clone()).collect();
        held.sort();
        assert_eq!(held, ds.person_ids());
        for (train, held_out) in &folds {
            assert_eq!(train.len(), 2);
            assert!(!train.contains(held_out));
        }
    }

    #[test]
    fn lopo_needs_two_persons() {
        let ds = tiny_ds(1, 2, 3);
        assert!(lopo_folds(&ds).is_err());
    }

    #[test]
    fn thirty_persons_give_thirty_folds() {
        let ds = tiny_ds(30, 2, 2);
        assert_eq!(lopo_folds(&ds).unwrap().len(), 30);
    }

    #[test]
    fn support_size_is_k_times_classes() {
        let ds = tiny_ds(4, 7, 12);
        let mut sampler = TaskSampler::new(&ds, cfg(SamplingMode::Personalised, 5, KQuery::All)).unwrap();
        let task = sampler.next_task().unwrap();
        assert_eq!(task.support.len(), 5 * 7);
        task.validate(5).unwrap();
    }

    #[test]
    fn personalised_all_query_takes_remainder() {
        let ds = tiny_ds(4, 3, 30);
        let mut sampler = TaskSampler::new(&ds, cfg(SamplingMode::Personalised, 5, KQuery::All)).unwrap();
        let task = sampler.next_task().unwrap();
        assert_eq!(task.query.len(), 25 * 3);
    }

    #[test]
    fn exhausted_pool_is_an_error() {
        let ds = tiny_ds(3, 2, 1);
        let mut sampler = TaskSampler::new(&ds, cfg(SamplingMode::Personalised, 1, KQuery::All)).unwrap();
        assert!(sampler.next_task().is_err());
    }

    #[test]
    fn personalised_tasks_are_single_person() {
        let ds = tiny_ds(5, 3, 8);
        let mut sampler =
            TaskSampler::new(&ds, cfg(SamplingMode::Personalised, 2, KQuery::Count(3))).unwrap();
        for _ in 0..200 {
            let task = sampler.next_task().unwrap();
            task.validate(2).unwrap();
            assert_eq!(task.persons().len(), 1);
        }
    }

    #[test]
    fn person_aware_mixes_persons_across_classes() {
        let ds = tiny_ds(5, 3, 8);
        let mut sampler =
            TaskSampler::new(&ds, cfg(SamplingMode::PersonAware, 2, KQuery::Count(3))).unwrap();
        let mut saw_multi = false;
        for _ in 0..200 {
            let task = sampler.next_task().unwrap();
            task.validate(2).unwrap();
            let mut support_persons: Vec<String> =
                task.support_refs.iter().map(|r| r.person_id.clone()).collect();
            support_persons.sort();
            support_persons.dedup();
            saw_multi |= support_persons.len() >= 2;
        }
        assert!(saw_multi, "person-aware sampler never mixed persons across classes");
    }

    #[test]
    fn conventional_mixes_persons_within_a_class() {
        let ds = tiny_ds(5, 3, 8);
        let mut sampler =
            TaskSampler::new(&ds, cfg(SamplingMode::Conventional, 4, KQuery::Count(2))).unwrap();
        let mut mixed = 0;
        let total = 1_000;
        for _ in 0..total {
            let task = sampler.next_task().unwrap();
            task.validate(4).unwrap();
            let any_class_mixed = task.class_set.iter().any(|c| {
                let mut persons: Vec<&str> = task
                    .support_refs
                    .iter()
                    .filter(|r| &r.activity_id == c)
                    .map(|r| r.person_id.as_str())
                    .collect();
                persons.sort();
                persons.dedup();
                persons.len() >= 2
            });
            if any_class_mixed {
                mixed += 1;
            }
        }
        // drawing 4 of a 40-instance pooled class from one person is rare
        assert!(mixed > total * 9 / 10, "only {mixed}/{total} tasks mixed persons");
    }

    #[test]
    fn sampling_is_deterministic_per_seed_and_call_index() {
        let ds = tiny_ds(4, 3, 10);
        let run = || {
            let mut sampler =
                TaskSampler::new(&ds, cfg(SamplingMode::Personalised, 2, KQuery::Count(2))).unwrap();
            (0..5).map(|_| sampler.next_task().unwrap().dump()).collect::<Vec<_>>()
        };
        let a = run();
        let b = run();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(serde_json::to_string(x).unwrap(), serde_json::to_string(y).unwrap());
        }
    }

    #[test]
    fn rn_instances_pair_every_query_with_full_support() {
        let ds = tiny_ds(3, 2, 8);
        let mut sampler =
            TaskSampler::new(&ds, cfg(SamplingMode::Personalised, 3, KQuery::Count(5))).unwrap();
        let task = sampler.next_task().unwrap();
        let pairs = build_rn_instances(&task).unwrap();
        assert_eq!(pairs.len(), 10);
        for (q, s) in &pairs {
            assert_eq!(s.len(), task.support.len());
            assert!(std::ptr::eq(*s, task.support.as_slice()));
            // personalised: pairs always match the query's own person
            assert_eq!(q.person_id, task.support[0].person_id);
        }
    }

    #[test]
    fn task_dump_serialises() {
        let ds = tiny_ds(3, 2, 6);
        let mut sampler =
            TaskSampler::new(&ds, cfg(SamplingMode::PersonAware, 2, KQuery::Count(2))).unwrap();
        let dump = sampler.next_task().unwrap().dump();
        let json = serde_json::to_string(&dump).unwrap();
        assert!(json.contains("person-aware"));
    }
}
