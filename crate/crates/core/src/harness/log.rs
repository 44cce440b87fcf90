//! Append-only training loss log and its CSV form.

use std::fmt::Write as _;
use std::path::Path;

use crate::{Error, Result};

pub const LOSS_LOG_HEADER: &str = "step,stage,loss,lr,cum_flops";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    /// 1-based stage index.
    pub stage: usize,
    /// Training loss in nats.
    pub loss: f64,
    pub lr: f64,
    pub cum_flops: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossLog {
    records: Vec<LossRecord>,
}

impl LossLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Rejects records that would break step or FLOPs monotonicity.
    pub fn push(&mut self, record: LossRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if record.step <= last.step {
                return Err(Error::Analysis(format!(
                    "loss log step {} does not follow step {}",
                    record.step, last.step
                )));
            }
            if record.cum_flops < last.cum_flops {
                return Err(Error::Analysis(format!(
                    "cumulative FLOPs decrease at step {}",
                    record.step
                )));
            }
        }
        self.records.push(record);
        Ok(())
    }

    pub fn records(&self) -> &[LossRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&LossRecord> {
        self.records.last()
    }

    /// Drops every record after `step`.
    pub fn truncate_after(&mut self, step: u64) {
        self.records.retain(|r| r.step <= step);
    }

    /// Floats are written in shortest round-trip form, so parsing the CSV
    /// gives back the same values bit for bit.
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(48 * (self.records.len() + 1));
        out.push_str(LOSS_LOG_HEADER);
        out.push('\n');
        for r in &self.records {
            let _ = writeln!(out, "{},{},{},{},{}", r.step, r.stage, r.loss, r.lr, r.cum_flops);
        }
        out
    }

    pub fn parse_csv(text: &str, origin: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == LOSS_LOG_HEADER => {}
            _ => {
                return Err(Error::Parse {
                    path: origin.to_string(),
                    line: 1,
                    msg: format!("expected header `{LOSS_LOG_HEADER}`"),
                })
            }
        }
        let mut log = Self::new();
        for (i, line) in lines {
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let bad = |msg: String| Error::Parse {
                path: origin.to_string(),
                line: line_no,
                msg,
            };
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 5 {
                return Err(bad(format!("expected 5 fields, found {}", fields.len())));
            }
            let float = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("`{s}`: {e}")));
            let record = LossRecord {
                step: fields[0].parse().map_err(|e| bad(format!("step `{}`: {e}", fields[0])))?,
                stage: fields[1].parse().map_err(|e| bad(format!("stage `{}`: {e}", fields[1])))?,
                loss: float(fields[2])?,
                lr: float(fields[3])?,
                cum_flops: float(fields[4])?,
            };
            log.push(record).map_err(|e| bad(e.to_string()))?;
        }
        Ok(log)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_csv(&text, &path.display().to_string())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}
