//! Straight-from-the-definition reference implementations.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use omnifuse_core::objectives::Match;
use omnifuse_core::tensor::Tensor;
use omnifuse_core::tokenizer::{TokenBatch, TokenIndex, TokenRaw};

/// Three rules, checked in order: the token itself and same-modality
/// tokens of its tile are excluded, other modalities at the same patch of
/// the same tile are positive, everything else is negative. The naive
/// variant excludes only the token itself.
pub fn classify(a: &TokenIndex, b: &TokenIndex, is_self: bool, naive: bool) -> Match {
    if is_self {
        return Match::Ignored;
    }
    let same_tile = a.tile == b.tile;
    if same_tile && a.modality == b.modality {
        return if naive { Match::Negative } else { Match::Ignored };
    }
    if same_tile && a.patch == b.patch {
        return Match::Positive;
    }
    Match::Negative
}

pub fn brute_matrix(batch: &TokenBatch, naive: bool) -> Vec<Match> {
    let t = batch.len();
    let mut out = Vec::with_capacity(t * t);
    for i in 0..t {
        for j in 0..t {
            out.push(classify(&batch.indices[i], &batch.indices[j], i == j, naive));
        }
    }
    out
}

/// A batch of `modalities x patches[t]` tokens per tile with token rows
/// shuffled inside each tile.
pub fn random_batch(rng: &mut ChaCha8Rng, modalities: usize, patches: &[usize]) -> TokenBatch {
    let mut indices = Vec::new();
    let mut tile_partition = Vec::new();
    for (t, &p) in patches.iter().enumerate() {
        let start = indices.len();
        let mut tile: Vec<TokenIndex> = (0..modalities)
            .flat_map(|m| (0..p).map(move |q| TokenIndex { modality: m, patch: q, tile: t, position_m: (q as f64, 0.0) }))
            .collect();
        tile.shuffle(rng);
        indices.extend(tile);
        tile_partition.push(start..indices.len());
    }
    let n = indices.len();
    TokenBatch {
        specs: Vec::new(),
        tile_ids: (0..patches.len()).map(|t| format!("t{t}")).collect(),
        grids: patches.iter().map(|&p| (p, 1)).collect(),
        indices,
        raw: vec![TokenRaw::Image { values: Vec::new() }; n],
        tile_partition,
    }
}

pub fn random_layout(rng: &mut ChaCha8Rng, max_tokens: usize) -> (usize, Vec<usize>) {
    loop {
        let m = rng.random_range(2..=4);
        let tiles = rng.random_range(1..=4);
        let patches: Vec<usize> = (0..tiles).map(|_| rng.random_range(1..=4)).collect();
        if m * patches.iter().sum::<usize>() <= max_tokens {
            return (m, patches);
        }
    }
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Mean over anchors of `-log(sum_pos exp(s) / sum_{not excluded} exp(s))`.
pub fn contrastive_oracle(emb: &Tensor, batch: &TokenBatch, gamma: f64, naive: bool) -> f64 {
    let t = batch.len();
    let mut total = 0.0;
    for i in 0..t {
        let (mut num, mut den) = (0.0, 0.0);
        for j in 0..t {
            let class = classify(&batch.indices[i], &batch.indices[j], i == j, naive);
            if class == Match::Ignored {
                continue;
            }
            let e = (dot(emb.row(i), emb.row(j)) / gamma).exp();
            den += e;
            if class == Match::Positive {
                num += e;
            }
        }
        total -= (num / den).ln();
    }
    total / t as f64
}

pub enum ReconItem {
    Image { decoded: Vec<f64>, target: Vec<f64> },
    /// `[L, C]` rows; only `dates` count.
    Series { decoded: Vec<f64>, target: Vec<f64>, channels: usize, dates: Vec<usize> },
}

pub fn reconstruction_oracle(items: &[ReconItem]) -> f64 {
    let mut total = 0.0;
    for item in items {
        total += match item {
            ReconItem::Image { decoded, target } => {
                decoded.iter().zip(target).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / target.len() as f64
            }
            ReconItem::Series { decoded, target, channels, dates } => {
                let mut s = 0.0;
                for &t in dates {
                    for c in 0..*channels {
                        s += (decoded[t * channels + c] - target[t * channels + c]).powi(2);
                    }
                }
                s / (channels * dates.len()) as f64
            }
        };
    }
    total / items.len() as f64
}

/// `k` highest entries, ties to the lower index, returned ascending.
pub fn top_k_dates(trace: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..trace.len()).collect();
    order.sort_by(|&a, &b| trace[b].partial_cmp(&trace[a]).unwrap().then(a.cmp(&b)));
    let mut out = order[..k].to_vec();
    out.sort_unstable();
    out
}
