//! Sensor datasets partitioned by person and activity class.

mod csv_io;
mod preprocess;
mod synth;

pub use csv_io::{load_csv, CsvSchema};
pub use preprocess::{
    check_channels, dct_features, dct_ii, dct_iii, downsample_frames, preprocess_recordings,
    resize_frame, sliding_window, Modality, PreprocessSummary, RawWindow,
};
pub use synth::{synth_generate, SyntheticSpec};

use std::io::{BufRead, Write};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One person's sensor stream for one activity.
#[derive(Debug, Clone)]
pub struct RawRecording {
    pub person_id: String,
    pub activity_id: String,
    /// Inferred from the median timestamp delta, in Hz.
    pub sample_rate: f64,
    /// Named channels of equal length.
    pub channels: Vec<(String, Vec<f64>)>,
}

impl RawRecording {
    pub fn len(&self) -> usize {
        self.channels.first().map_or(0, |(_, v)| v.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One preprocessed window with its labels.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowInstance {
    pub features: Tensor,
    pub activity_id: String,
    pub person_id: String,
}

#[derive(Serialize, Deserialize)]
struct JsonlLine {
    person_id: String,
    activity_id: String,
    shape: Vec<usize>,
    features: Vec<f64>,
}

/// Instances grouped by person then activity class.
///
/// Person and class orderings are sorted lexicographically, so two
/// datasets built from the same instances are identical.
#[derive(Debug, Clone, PartialEq)]
pub struct PersonDataset {
    persons: IndexMap<String, IndexMap<String, Vec<WindowInstance>>>,
    class_set: Vec<String>,
}

impl PersonDataset {
    pub fn from_instances(instances: Vec<WindowInstance>) -> Result<Self> {
        if instances.is_empty() {
            return Err(Error::data("dataset has no instances"));
        }
        let shape = instances[0].features.shape().to_vec();
        for inst in &instances {
            if inst.features.shape() != shape {
                return Err(Error::shape(format!(
                    "instance feature shape {:?} differs from {:?}",
                    inst.features.shape(),
                    shape
                )));
            }
        }
        let mut class_set: Vec<String> =
            instances.iter().map(|i| i.activity_id.clone()).collect();
        class_set.sort();
        class_set.dedup();

        let mut person_ids: Vec<String> = instances.iter().map(|i| i.person_id.clone()).collect();
        person_ids.sort();
        person_ids.dedup();

        let mut persons: IndexMap<String, IndexMap<String, Vec<WindowInstance>>> = IndexMap::new();
        for pid in &person_ids {
            persons.insert(pid.clone(), IndexMap::new());
        }
        for inst in instances {
            let per_class = persons.get_mut(&inst.person_id).expect("person indexed above");
            if !per_class.contains_key(&inst.activity_id) {
                // keep class order sorted within each person
                let cid = inst.activity_id.clone();
                per_class.insert(cid, Vec::new());
                per_class.sort_keys();
            }
            per_class
                .get_mut(&inst.activity_id)
                .expect("inserted above")
                .push(inst);
        }
        Ok(PersonDataset { persons, class_set })
    }

    pub fn person_ids(&self) -> Vec<String> {
        self.persons.keys().cloned().collect()
    }

    pub fn n_persons(&self) -> usize {
        self.persons.len()
    }

    pub fn class_set(&self) -> &[String] {
        &self.class_set
    }

    pub fn class_index(&self, activity_id: &str) -> Option<usize> {
        self.class_set.iter().position(|c| c == activity_id)
    }

    pub fn instances(&self, person_id: &str, activity_id: &str) -> &[WindowInstance] {
        self.persons
            .get(person_id)
            .and_then(|m| m.get(activity_id))
            .map_or(&[], Vec::as_slice)
    }

    pub fn all_instances_of(&self, person_id: &str) -> Vec<&WindowInstance> {
        self.persons
            .get(person_id)
            .map(|m| m.values().flatten().collect())
            .unwrap_or_default()
    }

    /// Feature shape shared by every instance.
    pub fn feature_shape(&self) -> &[usize] {
        self.persons
            .values()
            .flat_map(|m| m.values())
            .flatten()
            .next()
            .map(|i| i.features.shape())
            .expect("a dataset always holds at least one instance")
    }

    /// Smallest per-(person, class) instance count, over classes a
    /// person actually reports.
    pub fn min_instances_per_person_class(&self) -> usize {
        self.persons
            .values()
            .flat_map(|m| m.values())
            .map(Vec::len)
            .min()
            .unwrap_or(0)
    }

    /// New dataset restricted to the given persons.
    pub fn subset(&self, person_ids: &[String]) -> Result<Self> {
        let mut instances = Vec::new();
        for pid in person_ids {
            let per_class = self
                .persons
                .get(pid)
                .ok_or_else(|| Error::data(format!("unknown person {pid}")))?;
            for insts in per_class.values() {
                instances.extend(insts.iter().cloned());
            }
        }
        PersonDataset::from_instances(instances)
    }

    pub fn n_instances(&self) -> usize {
        self.persons.values().flat_map(|m| m.values()).map(Vec::len).sum()
    }

    /// Writes one JSON document per instance:
    /// `{person_id, activity_id, shape, features}`.
    pub fn to_jsonl(&self, mut w: impl Write) -> Result<()> {
        for per_class in self.persons.values() {
            for insts in per_class.values() {
                for inst in insts {
                    let line = JsonlLine {
                        person_id: inst.person_id.clone(),
                        activity_id: inst.activity_id.clone(),
                        shape: inst.features.shape().to_vec(),
                        features: inst.features.data().to_vec(),
                    };
                    serde_json::to_writer(&mut w, &line)?;
                    w.write_all(b"\n")?;
                }
            }
        }
        Ok(())
    }

    pub fn from_jsonl(r: impl BufRead) -> Result<Self> {
        let mut instances = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: JsonlLine = serde_json::from_str(&line)
                .map_err(|e| Error::data(format!("line {}: {e}", i + 1)))?;
            instances.push(WindowInstance {
                features: Tensor::new(parsed.shape, parsed.features)
                    .map_err(|e| Error::data(format!("line {}: {e}", i + 1)))?,
                activity_id: parsed.activity_id,
                person_id: parsed.person_id,
            });
        }
        PersonDataset::from_instances(instances)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.to_jsonl(std::io::BufWriter::new(file))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::from_jsonl(std::io::BufReader::new(file))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inst(p: &str, c: &str, v: f64) -> WindowInstance {
        WindowInstance {
            features: Tensor::new(vec![2], vec![v, v]).unwrap(),
            activity_id: c.to_string(),
            person_id: p.to_string(),
        }
    }

    #[test]
    fn grouping_and_ordering_are_deterministic() {
        let ds = PersonDataset::from_instances(vec![
            inst("p2", "b", 1.0),
            inst("p1", "a", 2.0),
            inst("p1", "b", 3.0),
            inst("p2", "a", 4.0),
        ])
        .unwrap();
        assert_eq!(ds.person_ids(), vec!["p1", "p2"]);
        assert_eq!(ds.class_set(), &["a", "b"]);
        assert_eq!(ds.instances("p1", "a").len(), 1);
        assert_eq!(ds.n_instances(), 4);
    }

    #[test]
    fn mixed_shapes_rejected() {
        let a = inst("p", "a", 1.0);
        let b = WindowInstance {
            features: Tensor::new(vec![3], vec![0.0; 3]).unwrap(),
            activity_id: "a".into(),
            person_id: "p".into(),
        };
        assert!(PersonDataset::from_instances(vec![a, b]).is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let ds = PersonDataset::from_instances(vec![
            inst("p1", "a", 0.25),
            inst("p1", "b", -1.5),
            inst("p2", "a", 1.0 / 3.0),
            inst("p2", "b", 2.0),
        ])
        .unwrap();
        let mut buf = Vec::new();
        ds.to_jsonl(&mut buf).unwrap();
        let back = PersonDataset::from_jsonl(buf.as_slice()).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn subset_restricts_persons() {
        let ds = PersonDataset::from_instances(vec![
            inst("p1", "a", 1.0),
            inst("p2", "a", 2.0),
            inst("p3", "a", 3.0),
        ])
        .unwrap();
        let sub = ds.subset(&["p1".into(), "p3".into()]).unwrap();
        assert_eq!(sub.person_ids(), vec!["p1", "p3"]);
        assert!(ds.subset(&["nope".into()]).is_err());
    }
}
