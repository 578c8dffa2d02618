//! Per-optimizer-step metrics, written as JSON lines.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_mse: f64,
    pub loss_var_z: f64,
    pub loss_var_zt: f64,
    pub loss_dcor_zz: f64,
    pub loss_dcor_desc: BTreeMap<String, f64>,
    pub emb_std_min: f64,
    pub emb_std_mean: f64,
    pub seconds: f64,
}

impl MetricRecord {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("metric records serialize")
    }
}

pub struct MetricsWriter {
    file: File,
}

impl MetricsWriter {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        Ok(MetricsWriter {
            file: File::create(path)?,
        })
    }

    /// Appends and flushes one record, so a killed run keeps its log.
    pub fn write(&mut self, r: &MetricRecord) -> Result<()> {
        writeln!(self.file, "{}", r.to_line())?;
        self.file.flush()?;
        Ok(())
    }
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricRecord>> {
    let f = File::open(path)?;
    BufReader::new(f)
        .lines()
        .enumerate()
        .map(|(i, line)| {
            serde_json::from_str(&line?).map_err(|e| Error::Format(format!("metrics line {}: {e}", i + 1)))
        })
        .collect()
}
