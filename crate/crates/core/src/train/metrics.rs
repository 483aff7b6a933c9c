use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::objectives::LossBreakdown;
use crate::{Error, Result};

/// One optimizer step. Contains no wall-clock data so that logs from
/// identical runs are byte-identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: String,
    pub epoch: u64,
    pub step: u64,
    pub lr: f64,
    pub batch: usize,
    pub total: f64,
    pub contrastive_m2t: f64,
    pub contrastive_t2m: f64,
    pub recon: f64,
    pub alpha: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
}

impl StepRecord {
    pub fn breakdown(&self) -> LossBreakdown {
        LossBreakdown {
            total: self.total,
            contrastive_m2t: self.contrastive_m2t,
            contrastive_t2m: self.contrastive_t2m,
            recon: self.recon,
            alpha: self.alpha,
        }
    }
}

/// Mean loss components per epoch, in epoch order.
pub fn epoch_means(records: &[StepRecord]) -> Vec<LossBreakdown> {
    let mut out: Vec<(u64, LossBreakdown, usize)> = Vec::new();
    for r in records {
        match out.last_mut() {
            Some((e, s, n)) if *e == r.epoch => {
                s.total += r.total;
                s.contrastive_m2t += r.contrastive_m2t;
                s.contrastive_t2m += r.contrastive_t2m;
                s.recon += r.recon;
                *n += 1;
            }
            _ => out.push((r.epoch, r.breakdown(), 1)),
        }
    }
    out.into_iter()
        .map(|(_, s, n)| {
            let n = n as f64;
            LossBreakdown {
                total: s.total / n,
                contrastive_m2t: s.contrastive_m2t / n,
                contrastive_t2m: s.contrastive_t2m / n,
                recon: s.recon / n,
                alpha: s.alpha,
            }
        })
        .collect()
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut text = String::new();
    for r in rows {
        text.push_str(&serde_json::to_string(r).expect("record serialises"));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                source_name: path.display().to_string(),
                line: i + 1,
                column: e.column(),
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("value serialises");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), &e))
}

/// Summary of one stage run. Everything except `wall_clock_s` is a pure
/// function of the config, the seed and the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub stage: String,
    pub seed: u64,
    pub epochs: u64,
    pub epoch_losses: Vec<LossBreakdown>,
    pub best_epoch: Option<u64>,
    pub tau: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recognition_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retrieval_top1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retrieval_top3: Option<f64>,
    pub config_fingerprint: String,
    pub data_fingerprint: String,
    pub wall_clock_s: f64,
}

impl MetricsReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.epoch_losses.last().map(|l| l.total)
    }

    /// The report with the timing zeroed, for reproducibility comparisons.
    pub fn without_timing(&self) -> MetricsReport {
        MetricsReport {
            wall_clock_s: 0.0,
            ..self.clone()
        }
    }
}

/// Hex SHA-256 of a value's JSON form.
pub fn json_fingerprint<T: Serialize>(value: &T) -> String {
    use sha2::{Digest, Sha256};
    let bytes = serde_json::to_vec(value).expect("value serialises");
    hex::encode(Sha256::digest(&bytes))
}
