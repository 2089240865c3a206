use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// One JSONL metrics event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub epoch: usize,
    pub stage2_loss_raw: f64,
    pub stage2_loss_rescaled: f64,
    /// Sum over both modalities of the last Stage I loss; absent when Stage I
    /// did not run on this batch.
    pub amor_loss: Option<f64>,
    pub tau: f64,
    pub beta_t: Option<f64>,
    pub rho: f64,
    pub median_abs_log_z_err: Option<f64>,
    pub gather_count: u64,
    pub wall_ms: u64,
}

impl MetricRecord {
    /// The record with its wall-clock field cleared, for determinism checks.
    pub fn without_wall_clock(&self) -> MetricRecord {
        MetricRecord {
            wall_ms: 0,
            ..self.clone()
        }
    }
}

pub trait MetricsSink {
    fn record(&mut self, rec: &MetricRecord) -> Result<()>;
}

impl MetricsSink for Vec<MetricRecord> {
    fn record(&mut self, rec: &MetricRecord) -> Result<()> {
        self.push(rec.clone());
        Ok(())
    }
}

/// Discards every record.
pub struct NullSink;

impl MetricsSink for NullSink {
    fn record(&mut self, _: &MetricRecord) -> Result<()> {
        Ok(())
    }
}

/// Appends one JSON object per line.
pub struct JsonlSink<W: Write> {
    out: W,
}

impl<W: Write> JsonlSink<W> {
    pub fn new(out: W) -> Self {
        Self { out }
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

impl<W: Write> MetricsSink for JsonlSink<W> {
    fn record(&mut self, rec: &MetricRecord) -> Result<()> {
        let line = serde_json::to_string(rec).expect("metric records always serialize");
        writeln!(self.out, "{line}")?;
        self.out.flush()?;
        Ok(())
    }
}

impl<S: MetricsSink + ?Sized> MetricsSink for &mut S {
    fn record(&mut self, rec: &MetricRecord) -> Result<()> {
        (**self).record(rec)
    }
}
