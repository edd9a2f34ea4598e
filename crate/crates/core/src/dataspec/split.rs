//! Multilabel iterative stratification.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::DatasetManifest;
use crate::error::{Error, Result};

/// Assigns tiles to splits so that every class's positives are spread in
/// proportion to the split fractions.
///
/// `labels` is aligned with `manifest.tiles`. Fractions must be positive and
/// sum to at most 1; tiles in the unassigned remainder are left out of every
/// split. Split sizes follow the largest-remainder rounding of
/// `fraction * N`. Existing splits with the same names are replaced.
pub fn stratified_split(
    manifest: &DatasetManifest,
    labels: &[Option<Vec<u8>>],
    fractions: &BTreeMap<String, f64>,
    seed: u64,
) -> Result<DatasetManifest> {
    let n = manifest.tiles.len();
    if labels.len() != n {
        return Err(Error::Invalid(format!("{} label rows for {} tiles", labels.len(), n)));
    }
    if fractions.is_empty() {
        return Err(Error::Config("no split fractions given".into()));
    }
    if fractions.values().any(|f| f.is_nan() || *f <= 0.0) {
        return Err(Error::Config("split fractions must be positive".into()));
    }
    let total: f64 = fractions.values().sum();
    if total > 1.0 + 1e-9 {
        return Err(Error::Config(format!("split fractions sum to {total} > 1")));
    }
    if n < fractions.len() {
        return Err(Error::Invalid(format!("{n} tiles cannot fill {} splits", fractions.len())));
    }

    let mut shares: Vec<f64> = fractions.values().copied().collect();
    let remainder = 1.0 - total;
    if remainder > 1e-9 {
        shares.push(remainder);
    }
    let assigned = stratify(labels, &shares, seed)?;
    if (0..fractions.len()).any(|s| !assigned.contains(&s)) {
        return Err(Error::Invalid(format!("{n} tiles leave an empty split for fractions {fractions:?}")));
    }

    let mut out = manifest.clone();
    for (s, name) in fractions.keys().enumerate() {
        let ids = (0..n)
            .filter(|&i| assigned[i] == s)
            .map(|i| manifest.tiles[i].tile_id.clone())
            .collect();
        out.splits.insert(name.clone(), ids);
    }
    out.validate()?;
    Ok(out)
}

/// Assigns each row to one bucket so that bucket sizes follow the
/// largest-remainder rounding of `shares` (normalised) and every class's
/// positives are spread in proportion. Returns the bucket per row.
pub fn stratify(labels: &[Option<Vec<u8>>], shares: &[f64], seed: u64) -> Result<Vec<usize>> {
    let n = labels.len();
    if shares.is_empty() || shares.iter().any(|f| f.is_nan() || *f <= 0.0) {
        return Err(Error::Config("shares must be positive".into()));
    }
    let sizes = largest_remainder(shares, n);
    let num_classes = labels.iter().flatten().map(Vec::len).max().unwrap_or(0);
    let mut class_counts = vec![0usize; num_classes];
    for l in labels.iter().flatten() {
        for (k, &v) in l.iter().enumerate() {
            class_counts[k] += v as usize;
        }
    }
    let mut desired: Vec<Vec<f64>> = sizes
        .iter()
        .map(|&s| class_counts.iter().map(|&c| c as f64 * s as f64 / n.max(1) as f64).collect())
        .collect();
    let mut capacity: Vec<isize> = sizes.iter().map(|&s| s as isize).collect();

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let tile_pos: Vec<Vec<usize>> = labels
        .iter()
        .map(|l| {
            l.as_ref()
                .map(|l| l.iter().enumerate().filter(|(_, &v)| v == 1).map(|(k, _)| k).collect())
                .unwrap_or_default()
        })
        .collect();

    let mut assigned: Vec<Option<usize>> = vec![None; n];
    let mut remaining = class_counts.clone();
    // Rarest class that still has unassigned positives.
    while let Some(k) = (0..num_classes).filter(|&k| remaining[k] > 0).min_by_key(|&k| (remaining[k], k)) {
        for &i in &order {
            if assigned[i].is_some() || !tile_pos[i].contains(&k) {
                continue;
            }
            let s = (0..sizes.len())
                .filter(|&s| capacity[s] > 0)
                .max_by(|&a, &b| {
                    desired[a][k]
                        .total_cmp(&desired[b][k])
                        .then(capacity[a].cmp(&capacity[b]))
                        .then(b.cmp(&a))
                })
                .expect("capacity covers every tile");
            assigned[i] = Some(s);
            capacity[s] -= 1;
            for &j in &tile_pos[i] {
                desired[s][j] -= 1.0;
                remaining[j] -= 1;
            }
        }
    }
    for &i in &order {
        if assigned[i].is_none() {
            let s = (0..sizes.len())
                .max_by(|&a, &b| capacity[a].cmp(&capacity[b]).then(b.cmp(&a)))
                .unwrap();
            assigned[i] = Some(s);
            capacity[s] -= 1;
        }
    }
    Ok(assigned.into_iter().map(|a| a.unwrap()).collect())
}

fn largest_remainder(shares: &[f64], n: usize) -> Vec<usize> {
    let total: f64 = shares.iter().sum();
    let exact: Vec<f64> = shares.iter().map(|s| s / total * n as f64).collect();
    let mut sizes: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut left = n - sizes.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        sizes[i] += 1;
        left -= 1;
    }
    sizes
}
