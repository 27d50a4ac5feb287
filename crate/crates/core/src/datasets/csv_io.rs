//! CSV ingestion of raw sensor streams.
//!
//! Expected layout: a header row `person_id,activity_id,t,<channel>...`
//! followed by one row per sample. Timestamps are seconds and must be
//! monotone within each contiguous (person, activity) block; each block
//! becomes one [`RawRecording`] with its sample rate inferred from the
//! median timestamp delta.

use std::path::Path;

use crate::error::{Error, Result};

use super::RawRecording;

/// Channel columns to expect after `t`. With `channels: None` the
/// channel names are taken from the header.
#[derive(Debug, Clone, Default)]
pub struct CsvSchema {
    pub channels: Option<Vec<String>>,
}

impl CsvSchema {
    pub fn infer() -> Self {
        CsvSchema { channels: None }
    }

    pub fn with_channels(channels: Vec<String>) -> Self {
        CsvSchema { channels: Some(channels) }
    }
}

pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<Vec<RawRecording>> {
    let mut reader = csv::ReaderBuilder::new().flexible(false).from_path(path)?;
    let header = reader.headers()?.clone();
    let cols: Vec<String> = header.iter().map(str::to_string).collect();
    if cols.len() < 4 || cols[0] != "person_id" || cols[1] != "activity_id" || cols[2] != "t" {
        return Err(Error::data(format!(
            "expected header person_id,activity_id,t,<channels>, got {:?}",
            cols
        )));
    }
    let channel_names: Vec<String> = match &schema.channels {
        Some(expected) => {
            let found = &cols[3..];
            if found != expected.as_slice() {
                return Err(Error::data(format!(
                    "channel columns {found:?} do not match schema {expected:?}"
                )));
            }
            expected.clone()
        }
        None => cols[3..].to_vec(),
    };

    struct Block {
        person: String,
        activity: String,
        times: Vec<f64>,
        channels: Vec<Vec<f64>>,
    }

    let mut blocks: Vec<Block> = Vec::new();
    // line 1 is the header
    for (idx, record) in reader.records().enumerate() {
        let line_no = idx + 2;
        let record = record?;
        let person = record[0].to_string();
        let activity = record[1].to_string();
        let mut values = Vec::with_capacity(record.len() - 2);
        for field in record.iter().skip(2) {
            let v: f64 = field
                .parse()
                .map_err(|_| Error::data(format!("line {line_no}: cannot parse '{field}' as a number")))?;
            if !v.is_finite() {
                return Err(Error::data(format!("line {line_no}: non-finite value '{field}'")));
            }
            values.push(v);
        }
        let t = values[0];

        let start_new = match blocks.last() {
            Some(b) => b.person != person || b.activity != activity,
            None => true,
        };
        if start_new {
            blocks.push(Block {
                person,
                activity,
                times: Vec::new(),
                channels: vec![Vec::new(); channel_names.len()],
            });
        }
        let block = blocks.last_mut().expect("pushed above");
        if let Some(&last_t) = block.times.last() {
            if t <= last_t {
                return Err(Error::data(format!(
                    "line {line_no}: timestamp {t} not increasing (previous {last_t})"
                )));
            }
        }
        block.times.push(t);
        for (c, v) in values[1..].iter().enumerate() {
            block.channels[c].push(*v);
        }
    }

    if blocks.is_empty() {
        return Err(Error::data("CSV contains no data rows"));
    }

    let mut recordings = Vec::with_capacity(blocks.len());
    for block in blocks {
        if block.times.len() < 2 {
            return Err(Error::data(format!(
                "recording ({}, {}) has a single sample; cannot infer sample rate",
                block.person, block.activity
            )));
        }
        let mut deltas: Vec<f64> = block.times.windows(2).map(|w| w[1] - w[0]).collect();
        deltas.sort_by(|a, b| a.partial_cmp(b).expect("finite deltas"));
        let median = deltas[deltas.len() / 2];
        recordings.push(RawRecording {
            person_id: block.person,
            activity_id: block.activity,
            sample_rate: 1.0 / median,
            channels: channel_names
                .iter()
                .cloned()
                .zip(block.channels)
                .collect(),
        });
    }
    Ok(recordings)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_csv(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn minimal_two_row_file() {
        let f = write_csv("person_id,activity_id,t,ax\np1,a,0.0,1.0\np1,a,0.5,2.0\n");
        let recs = load_csv(f.path(), &CsvSchema::infer()).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].len(), 2);
        assert!((recs[0].sample_rate - 2.0).abs() < 1e-12);
        assert_eq!(recs[0].channels[0].0, "ax");
    }

    #[test]
    fn blocks_grouped_by_contiguity() {
        let f = write_csv(
            "person_id,activity_id,t,ax\n\
             p2,b,0.0,1.0\np2,b,1.0,1.0\n\
             p1,a,0.0,2.0\np1,a,1.0,2.0\n\
             p2,a,0.0,3.0\np2,a,1.0,3.0\n",
        );
        let recs = load_csv(f.path(), &CsvSchema::infer()).unwrap();
        assert_eq!(recs.len(), 3);
        let keys: Vec<(String, String)> = recs
            .iter()
            .map(|r| (r.person_id.clone(), r.activity_id.clone()))
            .collect();
        assert!(keys.contains(&("p1".into(), "a".into())));
        assert!(keys.contains(&("p2".into(), "a".into())));
        assert!(keys.contains(&("p2".into(), "b".into())));
    }

    #[test]
    fn nan_cell_rejected_with_line_number() {
        let f = write_csv("person_id,activity_id,t,ax\np1,a,0.0,1.0\np1,a,0.5,NaN\n");
        let err = load_csv(f.path(), &CsvSchema::infer()).unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
    }

    #[test]
    fn non_monotone_timestamps_rejected() {
        let f = write_csv("person_id,activity_id,t,ax\np1,a,1.0,1.0\np1,a,0.5,2.0\n");
        assert!(load_csv(f.path(), &CsvSchema::infer()).is_err());
    }

    #[test]
    fn missing_columns_rejected() {
        let f = write_csv("person_id,t,ax\np1,0.0,1.0\n");
        assert!(load_csv(f.path(), &CsvSchema::infer()).is_err());
    }

    #[test]
    fn schema_mismatch_rejected() {
        let f = write_csv("person_id,activity_id,t,ax\np1,a,0.0,1.0\np1,a,0.5,1.0\n");
        let schema = CsvSchema::with_channels(vec!["x".into(), "y".into()]);
        assert!(load_csv(f.path(), &schema).is_err());
    }
}
