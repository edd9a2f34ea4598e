//! Training losses: multi-positive contrastive loss with same-tile,
//! same-modality exclusion, and masked reconstruction loss.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{matmul, Tensor};
use crate::tokenizer::TokenBatch;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Match {
    Positive,
    Negative,
    Ignored,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MatchMatrix {
    pub size: usize,
    pub entries: Vec<Match>,
}

impl MatchMatrix {
    pub fn get(&self, i: usize, j: usize) -> Match {
        self.entries[i * self.size + j]
    }

    pub fn row(&self, i: usize) -> &[Match] {
        &self.entries[i * self.size..(i + 1) * self.size]
    }
}

fn check_unique(batch: &TokenBatch) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty token batch".into()));
    }
    let mut seen = HashSet::with_capacity(batch.len());
    for ix in &batch.indices {
        if !seen.insert((ix.tile, ix.modality, ix.patch)) {
            return Err(Error::Invalid(format!(
                "duplicate token (tile {}, modality {}, patch {})",
                batch.tile_ids[ix.tile], ix.modality, ix.patch
            )));
        }
    }
    Ok(())
}

/// Positive: same tile and patch, other modality. Ignored: same tile and
/// modality (including the token itself). Negative: everything else.
pub fn build_match_matrix(batch: &TokenBatch) -> Result<MatchMatrix> {
    check_unique(batch)?;
    let t = batch.len();
    let mut entries = Vec::with_capacity(t * t);
    for a in &batch.indices {
        for b in &batch.indices {
            entries.push(if a.tile != b.tile {
                Match::Negative
            } else if a.modality == b.modality {
                Match::Ignored
            } else if a.patch == b.patch {
                Match::Positive
            } else {
                Match::Negative
            });
        }
    }
    Ok(MatchMatrix { size: t, entries })
}

/// Like [`build_match_matrix`] but only the self pair is ignored.
pub fn build_naive_match_matrix(batch: &TokenBatch) -> Result<MatchMatrix> {
    let mut m = build_match_matrix(batch)?;
    for i in 0..m.size {
        for j in 0..m.size {
            if i != j && m.entries[i * m.size + j] == Match::Ignored {
                m.entries[i * m.size + j] = Match::Negative;
            }
        }
    }
    Ok(m)
}

/// `-(1/T) sum_i log(sum_pos exp(s_ij) / sum_{pos,neg} exp(s_ij))` with
/// `s_ij = <f_i, f_j> / gamma`. Returns the loss and its gradient with
/// respect to `emb` (`[T, d]`).
pub fn contrastive_loss(emb: &Tensor, matrix: &MatchMatrix, gamma: f64) -> Result<(f64, Tensor)> {
    if gamma.is_nan() || gamma <= 0.0 {
        return Err(Error::Invalid(format!("temperature {gamma} must be positive")));
    }
    let t = emb.rows();
    if t != matrix.size || t == 0 {
        return Err(Error::Shape(format!("{t} embeddings for a {}x{0} match matrix", matrix.size)));
    }
    let mut s = matmul(emb, emb, true);
    s.scale_in_place(1.0 / gamma);
    let mut coef = vec![0.0; t * t];
    let mut loss = 0.0;
    for i in 0..t {
        let row = matrix.row(i);
        if !row.contains(&Match::Positive) {
            return Err(Error::Invalid(format!("token {i} has no positive match")));
        }
        let sr = s.row(i);
        let max = row
            .iter()
            .zip(sr)
            .filter(|(m, _)| **m != Match::Ignored)
            .map(|(_, &v)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        let (mut pos, mut all) = (0.0, 0.0);
        let mut ex = vec![0.0; t];
        for j in 0..t {
            if row[j] == Match::Ignored {
                continue;
            }
            ex[j] = (sr[j] - max).exp();
            all += ex[j];
            if row[j] == Match::Positive {
                pos += ex[j];
            }
        }
        loss -= (pos / all).ln();
        for j in 0..t {
            if row[j] == Match::Ignored {
                continue;
            }
            let p = if row[j] == Match::Positive { ex[j] / pos } else { 0.0 };
            coef[i * t + j] = (ex[j] / all - p) / t as f64;
        }
    }
    loss /= t as f64;
    // dL/dF = (C + C^T) F / gamma.
    let mut sym = vec![0.0; t * t];
    for i in 0..t {
        for j in 0..t {
            sym[i * t + j] = (coef[i * t + j] + coef[j * t + i]) / gamma;
        }
    }
    let grad = matmul(&Tensor::from_vec(&[t, t], sym), emb, false);
    Ok((loss, grad))
}

pub fn naive_contrastive_loss(emb: &Tensor, batch: &TokenBatch, gamma: f64) -> Result<(f64, Tensor)> {
    contrastive_loss(emb, &build_naive_match_matrix(batch)?, gamma)
}

/// One masked token's reconstruction. `include` restricts both the error
/// sum and the normalising dimension (selected dates of a filtered series).
#[derive(Clone, Copy, Debug)]
pub struct ReconTerm<'a> {
    pub decoded: &'a [f64],
    pub target: &'a [f64],
    pub include: Option<&'a [bool]>,
}

/// `(1/|mask|) sum_terms ||D - x||^2 / dim_eff`. Returns the loss and one
/// gradient vector per term (zero outside `include`).
pub fn reconstruction_loss(terms: &[ReconTerm]) -> Result<(f64, Vec<Vec<f64>>)> {
    if terms.is_empty() {
        return Err(Error::Invalid("reconstruction loss over an empty mask".into()));
    }
    let n = terms.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(terms.len());
    for (k, term) in terms.iter().enumerate() {
        if term.decoded.len() != term.target.len() || term.include.is_some_and(|m| m.len() != term.target.len()) {
            return Err(Error::Shape(format!(
                "term {k}: decoded {} vs target {} values",
                term.decoded.len(),
                term.target.len()
            )));
        }
        let keep = |i: usize| term.include.is_none_or(|m| m[i]);
        let dim = (0..term.target.len()).filter(|&i| keep(i)).count();
        if dim == 0 {
            return Err(Error::Invalid(format!("term {k} keeps no values")));
        }
        let scale = 1.0 / (n * dim as f64);
        let mut g = vec![0.0; term.target.len()];
        for (i, gi) in g.iter_mut().enumerate() {
            if keep(i) {
                let r = term.decoded[i] - term.target[i];
                loss += r * r * scale;
                *gi = 2.0 * r * scale;
            }
        }
        grads.push(g);
    }
    Ok((loss, grads))
}

/// Element mask over `[L, C]` date rows keeping only `dates`.
pub fn date_mask(dates: &[usize], len: usize, channels: usize) -> Vec<bool> {
    let mut m = vec![false; len * channels];
    for &t in dates {
        m[t * channels..(t + 1) * channels].fill(true);
    }
    m
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastiveMode {
    Off,
    Naive,
    #[default]
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossSwitches {
    pub contrastive: ContrastiveMode,
    pub reconstruction: bool,
}

impl Default for LossSwitches {
    fn default() -> Self {
        LossSwitches { contrastive: ContrastiveMode::Full, reconstruction: true }
    }
}

pub fn total_loss(con: f64, mae: f64, switches: LossSwitches) -> f64 {
    let c = if switches.contrastive == ContrastiveMode::Off { 0.0 } else { con };
    let m = if switches.reconstruction { mae } else { 0.0 };
    c + m
}
