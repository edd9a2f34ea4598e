use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    pub per_class: Vec<f64>,
    pub support: Vec<usize>,
    pub macro_f1: f64,
    pub weighted_f1: f64,
    pub micro_f1: f64,
}

fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// Multilabel F1 scores from binary predictions and targets (`[n][K]`).
pub fn f1_scores(pred: &[Vec<u8>], truth: &[Vec<u8>]) -> Result<F1Report> {
    if pred.is_empty() || pred.len() != truth.len() {
        return Err(Error::Invalid(format!("{} predictions for {} targets", pred.len(), truth.len())));
    }
    let k = truth[0].len();
    let (mut tp, mut fp, mut fn_) = (vec![0usize; k], vec![0usize; k], vec![0usize; k]);
    for (p, t) in pred.iter().zip(truth) {
        if p.len() != k || t.len() != k {
            return Err(Error::Shape("ragged label rows".into()));
        }
        for c in 0..k {
            match (p[c] != 0, t[c] != 0) {
                (true, true) => tp[c] += 1,
                (true, false) => fp[c] += 1,
                (false, true) => fn_[c] += 1,
                _ => {}
            }
        }
    }
    let per_class: Vec<f64> = (0..k).map(|c| f1(tp[c], fp[c], fn_[c])).collect();
    let support: Vec<usize> = (0..k).map(|c| tp[c] + fn_[c]).collect();
    let total: usize = support.iter().sum();
    let weighted_f1 = if total == 0 {
        0.0
    } else {
        per_class.iter().zip(&support).map(|(f, &s)| f * s as f64).sum::<f64>() / total as f64
    };
    Ok(F1Report {
        macro_f1: per_class.iter().sum::<f64>() / k.max(1) as f64,
        weighted_f1,
        micro_f1: f1(tp.iter().sum(), fp.iter().sum(), fn_.iter().sum()),
        per_class,
        support,
    })
}

/// One metrics line. Fields that do not apply to a phase are `null`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: String,
    pub loss_total: f64,
    pub loss_con: Option<f64>,
    pub loss_mae: Option<f64>,
    pub lr: f64,
    pub f1_weighted: Option<f64>,
    pub f1_macro: Option<f64>,
    pub f1_micro: Option<f64>,
    pub wall_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_loss: Option<f64>,
}

/// Append-only JSON-lines writer.
pub struct MetricsLog {
    path: PathBuf,
    file: File,
}

impl MetricsLog {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(MetricsLog { path: path.to_path_buf(), file })
    }

    pub fn append(path: &Path) -> Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
        Ok(MetricsLog { path: path.to_path_buf(), file })
    }

    pub fn write(&mut self, record: &EpochRecord) -> Result<()> {
        let mut line = serde_json::to_vec(record)?;
        line.push(b'\n');
        self.file.write_all(&line).map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<EpochRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}
