use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub terms: BTreeMap<String, f64>,
    pub lambdas: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: usize,
    pub mean_loss: f64,
    pub val_dsc: Option<f64>,
    pub val_hd: Option<f64>,
    pub lambdas: Vec<f64>,
    /// Seconds since the start of training.
    pub wall_clock: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Record {
    Step(StepRecord),
    Epoch(EpochRecord),
}

/// Training trace, written as one JSON object per line.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub records: Vec<Record>,
}

impl RunLog {
    pub fn steps(&self) -> impl Iterator<Item = &StepRecord> {
        self.records.iter().filter_map(|r| match r {
            Record::Step(s) => Some(s),
            Record::Epoch(_) => None,
        })
    }

    pub fn epochs(&self) -> impl Iterator<Item = &EpochRecord> {
        self.records.iter().filter_map(|r| match r {
            Record::Epoch(e) => Some(e),
            Record::Step(_) => None,
        })
    }

    pub fn losses(&self) -> Vec<f64> {
        self.steps().map(|s| s.loss).collect()
    }

    /// Copy with wall-clock fields zeroed, for run-to-run comparison.
    pub fn without_timing(&self) -> Self {
        let records = self
            .records
            .iter()
            .cloned()
            .map(|r| match r {
                Record::Epoch(mut e) => {
                    e.wall_clock = 0.0;
                    Record::Epoch(e)
                }
                s => s,
            })
            .collect();
        Self { records }
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
        for r in &self.records {
            writeln!(f, "{}", serde_json::to_string(r)?).map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    pub fn append_jsonl(path: &Path, record: &Record) -> Result<()> {
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        writeln!(f, "{}", serde_json::to_string(record)?).map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for line in BufReader::new(f).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if !line.trim().is_empty() {
                records.push(serde_json::from_str(&line)?);
            }
        }
        Ok(Self { records })
    }
}

/// Means over consecutive, non-overlapping windows of `window` values; a
/// trailing partial window is dropped.
pub fn window_means(values: &[f64], window: usize) -> Vec<f64> {
    if window == 0 {
        return Vec::new();
    }
    values
        .chunks_exact(window)
        .map(|c| c.iter().sum::<f64>() / window as f64)
        .collect()
}
