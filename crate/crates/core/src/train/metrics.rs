use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const METRICS_HEADER: &str = "epoch,seconds,loss_total,loss_recon,loss_kl,loss_ctc,accuracy";

/// One epoch of training. Components that do not apply to the model are
/// `None` and serialize as empty CSV fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub seconds: f64,
    pub loss_total: f64,
    pub loss_recon: Option<f64>,
    pub loss_kl: Option<f64>,
    pub loss_ctc: Option<f64>,
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    rows: Vec<EpochMetrics>,
}

fn csv_error(line: usize, reason: String) -> Error {
    Error::Manifest {
        path: "metrics.csv".into(),
        line,
        reason,
    }
}

impl MetricsLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a row; epochs must run 1, 2, 3, ...
    pub fn push(&mut self, row: EpochMetrics) -> Result<()> {
        let want = self.rows.last().map_or(1, |r| r.epoch + 1);
        if row.epoch != want {
            return Err(Error::InvalidArgument(format!(
                "metrics epoch {} out of sequence, expected {want}",
                row.epoch
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn rows(&self) -> &[EpochMetrics] {
        &self.rows
    }

    pub fn totals(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.loss_total).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        if self.rows.is_empty() {
            w.write_record(METRICS_HEADER.split(',')).expect("in-memory write");
        }
        for r in &self.rows {
            w.serialize(r).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ascii")
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header = r.headers().map_err(|e| csv_error(1, e.to_string()))?;
        if header.iter().collect::<Vec<_>>().join(",") != METRICS_HEADER {
            return Err(csv_error(1, format!("expected header `{METRICS_HEADER}`")));
        }
        let mut log = MetricsLog::new();
        for (i, row) in r.deserialize::<EpochMetrics>().enumerate() {
            let row = row.map_err(|e| csv_error(i + 2, e.to_string()))?;
            log.push(row).map_err(|e| csv_error(i + 2, e.to_string()))?;
        }
        Ok(log)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }
}
