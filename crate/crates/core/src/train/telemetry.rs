use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::Result;

pub const TELEMETRY_HEADER: &str = "step,epoch,push_loss,pull_loss,total,lr";

/// One optimizer step; `step` and `epoch` are 1-based.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub push_loss: f64,
    pub pull_loss: f64,
    pub total: f64,
    pub lr: f64,
}

impl StepRecord {
    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{},{}", self.step, self.epoch, self.push_loss, self.pull_loss, self.total, self.lr)
    }
}

/// Receives per-step records. Implementations must not fail the run.
pub trait TelemetrySink {
    fn record(&mut self, rec: &StepRecord);
    fn flush(&mut self) {}
}

pub struct NullTelemetry;

impl TelemetrySink for NullTelemetry {
    fn record(&mut self, _: &StepRecord) {}
}

#[derive(Debug, Default)]
pub struct MemoryTelemetry {
    pub records: Vec<StepRecord>,
}

impl TelemetrySink for MemoryTelemetry {
    fn record(&mut self, rec: &StepRecord) {
        self.records.push(*rec);
    }
}

/// Appends CSV rows; after the first write error further rows are dropped.
pub struct CsvTelemetry {
    writer: Option<BufWriter<File>>,
}

impl CsvTelemetry {
    /// Opens `path` for appending and writes the header if the file is new.
    pub fn open(path: &Path) -> Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let fresh = file.metadata()?.len() == 0;
        let mut writer = BufWriter::new(file);
        if fresh {
            writeln!(writer, "{TELEMETRY_HEADER}")?;
        }
        Ok(CsvTelemetry { writer: Some(writer) })
    }
}

impl TelemetrySink for CsvTelemetry {
    fn record(&mut self, rec: &StepRecord) {
        if let Some(w) = self.writer.as_mut() {
            if let Err(e) = writeln!(w, "{}", rec.csv_row()) {
                log::warn!("telemetry disabled after write error: {e}");
                self.writer = None;
            }
        }
    }

    fn flush(&mut self) {
        if let Some(w) = self.writer.as_mut() {
            if let Err(e) = w.flush() {
                log::warn!("telemetry disabled after flush error: {e}");
                self.writer = None;
            }
        }
    }
}

impl Drop for CsvTelemetry {
    fn drop(&mut self) {
        self.flush();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_appends_with_single_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let rec = StepRecord { step: 1, epoch: 1, push_loss: 0.5, pull_loss: 0.25, total: 0.75, lr: 1e-3 };
        {
            let mut sink = CsvTelemetry::open(&path).unwrap();
            sink.record(&rec);
        }
        {
            let mut sink = CsvTelemetry::open(&path).unwrap();
            sink.record(&StepRecord { step: 2, ..rec });
        }
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines, vec![TELEMETRY_HEADER, "1,1,0.5,0.25,0.75,0.001", "2,1,0.5,0.25,0.75,0.001"]);
    }
}
