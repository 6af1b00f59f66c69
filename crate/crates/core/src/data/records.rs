//! Run records and their CSV / JSON serialization.
//!
//! Files are written through a temporary sibling and renamed into place.
//! Floats use the shortest representation that parses back to the same
//! value, so a parsed file re-serializes byte-for-byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

pub const METRICS_HEADER: [&str; 8] = ["run_id", "seed", "mu", "variant", "epoch", "step", "train_loss", "val_error"];
pub const MODAL_HEADER: [&str; 8] = ["run_id", "layer", "step", "lambda_min", "lambda_max", "mu_max", "tau_max", "block_energy_ratio"];
pub const CHANNEL_HEADER: [&str; 6] = ["run_id", "layer", "step", "channel", "mean", "variance"];

/// One training step. `val_error` is filled on the last step of each epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub run_id: String,
    pub seed: u64,
    pub mu: f64,
    pub variant: String,
    pub epoch: u32,
    pub step: u64,
    pub train_loss: f64,
    pub val_error: Option<f64>,
}

/// Natural-mode summary of one conv layer at one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalRow {
    pub run_id: String,
    pub layer: usize,
    pub step: u64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub mu_max: f64,
    pub tau_max: f64,
    pub block_energy_ratio: f64,
}

/// Per-channel statistics of a conv layer input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelRow {
    pub run_id: String,
    pub layer: usize,
    pub step: u64,
    pub channel: usize,
    pub mean: f64,
    pub variance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Outcome {
    Completed,
    Unstable { step: u64 },
}

impl std::fmt::Display for Outcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Outcome::Completed => write!(f, "completed"),
            Outcome::Unstable { step } => write!(f, "unstable at step {step}"),
        }
    }
}

/// Contents of `run.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub schema_version: u32,
    pub run_id: String,
    pub code_version: String,
    pub config: BTreeMap<String, String>,
    pub topology: String,
    pub outcome: Outcome,
    #[serde(default)]
    pub notes: BTreeMap<String, String>,
}

/// Everything one run produced.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub meta: RunMeta,
    pub metrics: Vec<MetricRow>,
    pub modal: Vec<ModalRow>,
    pub channels: Vec<ChannelRow>,
}

impl RunRecord {
    /// Validation error after the last completed epoch.
    pub fn final_val_error(&self) -> Option<f64> {
        self.metrics.iter().rev().find_map(|m| m.val_error)
    }

    /// `(epoch, val_error)` for every completed epoch.
    pub fn val_series(&self) -> Vec<(u32, f64)> {
        self.metrics.iter().filter_map(|m| m.val_error.map(|v| (m.epoch, v))).collect()
    }
}

/// Writes `bytes` to `path` via a temporary file and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = path.with_extension(match path.extension() {
        Some(ext) => format!("{}.tmp", ext.to_string_lossy()),
        None => "tmp".to_string(),
    });
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn csv_bytes<T: Serialize>(header: &[&str], rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::Invalid(format!("csv buffer: {e}")))
}

pub fn write_csv<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<()> {
    write_atomic(path, &csv_bytes(header, rows)?)
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(bytes.as_slice());
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub fn write_meta(path: &Path, meta: &RunMeta) -> Result<()> {
    let mut s = serde_json::to_string_pretty(meta)?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

pub fn read_meta(path: &Path) -> Result<RunMeta> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Writes one run into `dir`: `metrics.csv`, `modal.csv`, `channels.csv`, `run.json`.
pub fn write_run(record: &RunRecord, dir: &Path) -> Result<()> {
    write_csv(&dir.join("metrics.csv"), &METRICS_HEADER, &record.metrics)?;
    write_csv(&dir.join("modal.csv"), &MODAL_HEADER, &record.modal)?;
    write_csv(&dir.join("channels.csv"), &CHANNEL_HEADER, &record.channels)?;
    write_meta(&dir.join("run.json"), &record.meta)
}

pub fn read_run(dir: &Path) -> Result<RunRecord> {
    Ok(RunRecord {
        meta: read_meta(&dir.join("run.json"))?,
        metrics: read_csv(&dir.join("metrics.csv"))?,
        modal: read_csv(&dir.join("modal.csv"))?,
        channels: read_csv(&dir.join("channels.csv"))?,
    })
}

/// Writes combined `metrics.csv` and `modal.csv` for all records into
/// `dir`, plus `<run_id>/run.json` for each record.
pub fn write_records(records: &[RunRecord], dir: &Path) -> Result<()> {
    let metrics: Vec<&MetricRow> = records.iter().flat_map(|r| &r.metrics).collect();
    let modal: Vec<&ModalRow> = records.iter().flat_map(|r| &r.modal).collect();
    write_csv(&dir.join("metrics.csv"), &METRICS_HEADER, &metrics)?;
    write_csv(&dir.join("modal.csv"), &MODAL_HEADER, &modal)?;
    for r in records {
        write_meta(&dir.join(&r.meta.run_id).join("run.json"), &r.meta)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta(id: &str) -> RunMeta {
        RunMeta {
            schema_version: SCHEMA_VERSION,
            run_id: id.into(),
            code_version: "test".into(),
            config: BTreeMap::from([("mu_conv".to_string(), "0.1".to_string())]),
            topology: "Conv|ReLU".into(),
            outcome: Outcome::Unstable { step: 17 },
            notes: BTreeMap::new(),
        }
    }

    fn modal_row() -> ModalRow {
        ModalRow {
            run_id: "r0".into(),
            layer: 3,
            step: 5,
            lambda_min: 1.25e-7,
            lambda_max: 3.0 / 7.0,
            mu_max: 14.0 / 3.0,
            tau_max: f64::INFINITY,
            block_energy_ratio: 0.1 + 0.2,
        }
    }

    #[test]
    fn empty_list_gives_header_only() {
        let dir = tempfile::tempdir().unwrap();
        write_records(&[], dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(text, "run_id,seed,mu,variant,epoch,step,train_loss,val_error\n");
        let text = fs::read_to_string(dir.path().join("modal.csv")).unwrap();
        assert_eq!(text.lines().count(), 1);
    }

    #[test]
    fn modal_row_populates_all_columns() {
        let bytes = csv_bytes(&MODAL_HEADER, &[modal_row()]).unwrap();
        let text = String::from_utf8(bytes).unwrap();
        let line = text.lines().nth(1).unwrap();
        assert_eq!(line.split(',').count(), 8);
        assert!(line.split(',').all(|f| !f.is_empty()), "{line}");
    }

    #[test]
    fn reserialization_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let rec = RunRecord {
            meta: meta("r0"),
            metrics: vec![
                MetricRow { run_id: "r0".into(), seed: 1, mu: 0.1, variant: "Baseline".into(), epoch: 1, step: 1, train_loss: 2.302585092994046, val_error: None },
                MetricRow { run_id: "r0".into(), seed: 1, mu: 0.1, variant: "Baseline".into(), epoch: 1, step: 2, train_loss: 1.0 / 3.0, val_error: Some(0.0625) },
            ],
            modal: vec![modal_row()],
            channels: vec![ChannelRow { run_id: "r0".into(), layer: 3, step: 5, channel: 0, mean: -0.0, variance: 1e-300 }],
        };
        let first = dir.path().join("a");
        write_run(&rec, &first).unwrap();
        let parsed = read_run(&first).unwrap();
        assert_eq!(parsed, rec);
        let second = dir.path().join("b");
        write_run(&parsed, &second).unwrap();
        for f in ["metrics.csv", "modal.csv", "channels.csv", "run.json"] {
            assert_eq!(fs::read(first.join(f)).unwrap(), fs::read(second.join(f)).unwrap(), "{f}");
        }
    }

    #[test]
    fn io_errors_carry_path() {
        let err = read_meta(Path::new("/nonexistent/run.json")).unwrap_err().to_string();
        assert!(err.contains("/nonexistent/run.json"), "{err}");
    }
}
