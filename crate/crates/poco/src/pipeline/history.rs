//! Per-batch loss records and per-epoch validation curves, with the CSV
//! formats the training loops emit.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Column header of the loss-history CSV.
pub const LOSS_CSV_HEADER: &str = "epoch,batch,l_total,l_stage1,l_stage2,l_stage3";

/// Column header of the validation-curve CSV.
pub const VAL_CSV_HEADER: &str = "epoch,val_accuracy";

/// Losses recorded after one optimizer step. `epoch` and `batch` are
/// 1-based; stages that were not computed are stored as 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchRecord {
    pub epoch: usize,
    pub batch: usize,
    pub l_total: f64,
    pub l_stage1: f64,
    pub l_stage2: f64,
    pub l_stage3: f64,
}

/// Append-only log of every pretraining step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossHistory {
    records: Vec<BatchRecord>,
}

impl LossHistory {
    pub fn new() -> Self {
        LossHistory::default()
    }

    pub fn push(&mut self, record: BatchRecord) {
        self.records.push(record);
    }

    pub fn records(&self) -> &[BatchRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Render as CSV (header plus one line per record). Floats use the
    /// shortest round-trip decimal form, so equal histories give
    /// byte-equal files.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(LOSS_CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.epoch, r.batch, r.l_total, r.l_stage1, r.l_stage2, r.l_stage3
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim() == LOSS_CSV_HEADER => {}
            other => {
                return Err(Error::data(format!(
                    "loss CSV must start with `{LOSS_CSV_HEADER}`, got {other:?}"
                )))
            }
        }
        let mut history = LossHistory::new();
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 6 {
                return Err(Error::data(format!(
                    "loss CSV line {}: expected 6 fields, got {}",
                    i + 2,
                    fields.len()
                )));
            }
            let num = |s: &str| -> Result<f64> {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::data(format!("loss CSV line {}: {e}", i + 2)))
            };
            let int = |s: &str| -> Result<usize> {
                s.trim()
                    .parse::<usize>()
                    .map_err(|e| Error::data(format!("loss CSV line {}: {e}", i + 2)))
            };
            history.push(BatchRecord {
                epoch: int(fields[0])?,
                batch: int(fields[1])?,
                l_total: num(fields[2])?,
                l_stage1: num(fields[3])?,
                l_stage2: num(fields[4])?,
                l_stage3: num(fields[5])?,
            });
        }
        Ok(history)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        Self::from_csv(&fs::read_to_string(path)?)
    }

    /// Sliding-window mean of `l_total`: entry `i` averages records
    /// `i..i+window`, so the result has `len - window + 1` entries.
    pub fn moving_average(&self, window: usize) -> Result<Vec<f64>> {
        if window == 0 || window > self.records.len() {
            return Err(Error::invalid(format!(
                "moving average window {window} over {} records",
                self.records.len()
            )));
        }
        let totals: Vec<f64> = self.records.iter().map(|r| r.l_total).collect();
        Ok(totals
            .windows(window)
            .map(|w| w.iter().sum::<f64>() / window as f64)
            .collect())
    }

    /// Mean `l_total` of each epoch present, in ascending epoch order.
    pub fn epoch_means(&self) -> Vec<(usize, f64)> {
        let mut out: Vec<(usize, f64, usize)> = Vec::new();
        for r in &self.records {
            match out.last_mut() {
                Some((e, sum, count)) if *e == r.epoch => {
                    *sum += r.l_total;
                    *count += 1;
                }
                _ => out.push((r.epoch, r.l_total, 1)),
            }
        }
        out.into_iter().map(|(e, sum, count)| (e, sum / count as f64)).collect()
    }
}

/// Validation accuracy after `epoch` fine-tuning epochs; epoch 0 is the
/// freshly initialized (or freshly loaded) state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValPoint {
    pub epoch: usize,
    pub accuracy: f64,
}

/// Render a validation curve as CSV.
pub fn val_curve_to_csv(points: &[ValPoint]) -> String {
    let mut out = String::from(VAL_CSV_HEADER);
    out.push('\n');
    for p in points {
        out.push_str(&format!("{},{}\n", p.epoch, p.accuracy));
    }
    out
}

pub fn write_val_curve(points: &[ValPoint], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, val_curve_to_csv(points))?;
    Ok(())
}
