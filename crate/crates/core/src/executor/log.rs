use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One block's record for one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub block: usize,
    pub local_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub global_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub global_acc: Option<f64>,
    pub examples_seen: u64,
    pub wallclock_ms: f64,
    /// Update count of the upstream block when it produced this block's input.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_version: Option<u64>,
}

impl LogRecord {
    /// Equality on everything except wall-clock time.
    pub fn same_trajectory(&self, other: &LogRecord) -> bool {
        self.step == other.step
            && self.block == other.block
            && self.local_loss.to_bits() == other.local_loss.to_bits()
            && self.global_loss.map(f64::to_bits) == other.global_loss.map(f64::to_bits)
            && self.global_acc.map(f64::to_bits) == other.global_acc.map(f64::to_bits)
            && self.examples_seen == other.examples_seen
            && self.input_version == other.input_version
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

pub const CSV_HEADER: &str =
    "step,block,local_loss,global_loss,global_acc,examples_seen,wallclock_ms";

impl TrainLog {
    pub fn push(&mut self, record: LogRecord) {
        self.records.push(record);
    }

    /// Orders records by `(step, block)`.
    pub fn sort(&mut self) {
        self.records.sort_by_key(|r| (r.step, r.block));
    }

    /// Bit-level comparison of the deterministic fields.
    pub fn same_trajectory(&self, other: &TrainLog) -> bool {
        self.records.len() == other.records.len()
            && self
                .records
                .iter()
                .zip(&other.records)
                .all(|(a, b)| a.same_trajectory(b))
    }

    pub fn for_block(&self, block: usize) -> impl Iterator<Item = &LogRecord> {
        self.records.iter().filter(move |r| r.block == block)
    }

    /// `(step, examples_seen, value)` of every record carrying a global loss.
    pub fn global_loss_history(&self) -> Vec<(usize, u64, f64)> {
        self.records
            .iter()
            .filter_map(|r| r.global_loss.map(|v| (r.step, r.examples_seen, v)))
            .collect()
    }

    pub fn global_acc_history(&self) -> Vec<(usize, u64, f64)> {
        self.records
            .iter()
            .filter_map(|r| r.global_acc.map(|v| (r.step, r.examples_seen, v)))
            .collect()
    }

    pub fn last_global(&self) -> Option<(f64, f64)> {
        self.records
            .iter()
            .rev()
            .find_map(|r| Some((r.global_loss?, r.global_acc?)))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.step,
                r.block,
                r.local_loss,
                opt(r.global_loss),
                opt(r.global_acc),
                r.examples_seen,
                r.wallclock_ms
            );
        }
        out
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<TrainLog> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        Ok(TrainLog { records })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()?).map_err(|e| Error::io(path, e))
    }
}
