//! JSON Lines fingerprint records.
//!
//! One object per line:
//! `{"x": <m>, "y": <m>, "t": <s, optional>, "obs": {"<feature-id>": <rss dBm>}}`.
//! Query files may omit `x`/`y` and may carry an optional string `id`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Fingerprint, LabeledSample, Point};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t: Option<f64>,
    pub obs: BTreeMap<String, f64>,
}

impl Record {
    pub fn fingerprint(&self) -> Result<Fingerprint> {
        Ok(Fingerprint::from_raw(self.obs.iter().map(|(k, &v)| (k.clone(), v)))?
            .with_timestamp(self.t))
    }

    pub fn location(&self) -> Option<Point> {
        Some(Point::new(self.x?, self.y?))
    }

    pub fn from_sample(sample: &LabeledSample) -> Self {
        Record {
            id: None,
            x: Some(sample.location.x),
            y: Some(sample.location.y),
            t: sample.fingerprint.timestamp(),
            obs: sample
                .fingerprint
                .iter()
                .map(|(k, v)| (k.as_str().to_owned(), v))
                .collect(),
        }
    }
}

pub fn read_records(path: &Path) -> Result<Vec<Record>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_owned(),
            line: n + 1,
            message: e.to_string(),
        })?;
        out.push(record);
    }
    Ok(out)
}

/// Reads location-tagged samples; every record must carry `x` and `y`.
pub fn read_samples(path: &Path) -> Result<Vec<LabeledSample>> {
    read_records(path)?
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            let location = r.location().ok_or_else(|| Error::Parse {
                path: path.to_owned(),
                line: i + 1,
                message: "record has no x/y location".into(),
            })?;
            let fingerprint = r.fingerprint().map_err(|e| Error::Parse {
                path: path.to_owned(),
                line: i + 1,
                message: e.to_string(),
            })?;
            Ok(LabeledSample::new(location, fingerprint))
        })
        .collect()
}

pub fn write_records(path: &Path, records: &[Record]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).expect("record serializes");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_samples(path: &Path, samples: &[LabeledSample]) -> Result<()> {
    let records: Vec<_> = samples.iter().map(Record::from_sample).collect();
    write_records(path, &records)
}
