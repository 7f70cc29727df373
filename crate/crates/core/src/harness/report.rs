use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{io_err, HarnessError, MetricsRecord};

/// Append-only newline-delimited JSON writer, flushed per record.
pub(crate) struct NdjsonSink {
    path: PathBuf,
    out: BufWriter<File>,
}

impl NdjsonSink {
    pub(crate) fn create(path: &Path) -> Result<NdjsonSink, HarnessError> {
        let f = File::create(path).map_err(io_err(path))?;
        Ok(NdjsonSink {
            path: path.to_path_buf(),
            out: BufWriter::new(f),
        })
    }

    pub(crate) fn append<T: Serialize>(&mut self, record: &T) -> Result<(), HarnessError> {
        let line = serde_json::to_string(record).expect("record serializes");
        writeln!(self.out, "{line}")
            .and_then(|_| self.out.flush())
            .map_err(io_err(&self.path))
    }
}

pub fn write_ndjson<T: Serialize>(path: &Path, records: &[T]) -> Result<(), HarnessError> {
    let mut sink = NdjsonSink::create(path)?;
    for r in records {
        sink.append(r)?;
    }
    Ok(())
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), HarnessError> {
    let csv_err = |e: csv::Error| HarnessError::Io {
        path: path.display().to_string(),
        source: std::io::Error::other(e),
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(io_err(path))
}

/// One line of `summary.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub cycle: usize,
    pub train_loss: f64,
    pub avg_recon_error: f64,
    pub mean_rank_ratio: Option<f64>,
    pub mean_density: Option<f64>,
    pub eval_loss_x: Option<f64>,
    pub eval_loss_surrogate: Option<f64>,
}

pub fn summary_rows(metrics: &[MetricsRecord]) -> Vec<SummaryRow> {
    metrics
        .iter()
        .map(|m| {
            let n = m.per_block.len() as f64;
            let mean = |f: fn(&super::BlockMetrics) -> f64| {
                (!m.per_block.is_empty()).then(|| m.per_block.iter().map(f).sum::<f64>() / n)
            };
            SummaryRow {
                cycle: m.cycle,
                train_loss: m.train_loss,
                avg_recon_error: m.avg_recon_error,
                mean_rank_ratio: mean(|b| b.rank_ratio),
                mean_density: mean(|b| b.density),
                eval_loss_x: m.eval_loss_x,
                eval_loss_surrogate: m.eval_loss_surrogate,
            }
        })
        .collect()
}
