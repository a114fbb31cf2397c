use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    PatienceExhausted,
    MaxEpochs,
}

/// One line of the training log: a step (with `loss`) or an epoch end (with `val_psnr`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub epoch: usize,
    pub loss: Option<f64>,
    pub val_psnr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Summary {
    best_epoch: Option<usize>,
    best_val_psnr: Option<f64>,
    stop_reason: Option<StopReason>,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum Line {
    Summary { summary: Summary },
    Record(LogRecord),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_psnr: Option<f64>,
    pub stop_reason: Option<StopReason>,
}

impl TrainLog {
    pub(crate) fn push_step(&mut self, step: u64, epoch: usize, loss: f64) {
        if let Some(last) = self.records.last() {
            debug_assert!(step > last.step || last.loss.is_none());
        }
        self.records.push(LogRecord {
            step,
            epoch,
            loss: Some(loss),
            val_psnr: None,
        });
    }

    pub(crate) fn push_epoch(&mut self, step: u64, epoch: usize, val_psnr: f64) {
        self.records.push(LogRecord {
            step,
            epoch,
            loss: None,
            val_psnr: Some(val_psnr),
        });
    }

    /// `(step, loss)` in order.
    pub fn losses(&self) -> Vec<(u64, f64)> {
        self.records
            .iter()
            .filter_map(|r| r.loss.map(|l| (r.step, l)))
            .collect()
    }

    /// `(epoch, validation PSNR)` in order.
    pub fn val_psnrs(&self) -> Vec<(usize, f64)> {
        self.records
            .iter()
            .filter_map(|r| r.val_psnr.map(|p| (r.epoch, p)))
            .collect()
    }

    pub fn epochs_run(&self) -> usize {
        self.val_psnrs().len()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("log record serializes"));
            out.push('\n');
        }
        let summary = Line::Summary {
            summary: Summary {
                best_epoch: self.best_epoch,
                best_val_psnr: self.best_val_psnr,
                stop_reason: self.stop_reason,
            },
        };
        out.push_str(&serde_json::to_string(&summary).expect("summary serializes"));
        out.push('\n');
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut log = TrainLog::default();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let parsed: Line = serde_json::from_str(line)
                .map_err(|e| Error::invalid(format!("train log line {}: {e}", n + 1)))?;
            match parsed {
                Line::Record(r) => log.records.push(r),
                Line::Summary { summary } => {
                    log.best_epoch = summary.best_epoch;
                    log.best_val_psnr = summary.best_val_psnr;
                    log.stop_reason = summary.stop_reason;
                }
            }
        }
        Ok(log)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }
}
