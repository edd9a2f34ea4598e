use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{Gradients, ParamId, ParamStore};
use crate::error::{Error, Result};

pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<GradCheckEntry>,
    /// Entries above the tolerance.
    pub failures: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Compares `analytic` against central differences of `loss` on up to
/// `max_samples` parameter entries drawn uniformly (all when fewer).
pub fn gradient_check<F>(
    store: &ParamStore,
    analytic: &Gradients,
    loss: F,
    tolerance: f64,
    max_samples: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore) -> Result<f64>,
{
    let ids: Vec<ParamId> = store.ids().collect();
    let sizes: Vec<usize> = ids.iter().map(|&id| store.get(id).len()).collect();
    let total: usize = sizes.iter().sum();
    let picks: Vec<usize> = if total <= max_samples {
        (0..total).collect()
    } else {
        let mut v = index::sample(&mut ChaCha8Rng::seed_from_u64(seed), total, max_samples).into_vec();
        v.sort_unstable();
        v
    };
    let mut work = store.clone();
    let mut report = GradCheckReport { checked: 0, max_rel_err: 0.0, worst: None, failures: Vec::new() };
    let (mut k, mut base) = (0, 0);
    for flat in picks {
        while flat >= base + sizes[k] {
            base += sizes[k];
            k += 1;
        }
        let (id, i) = (ids[k], flat - base);
        let orig = work.get(id).data()[i];
        work.get_mut(id).data_mut()[i] = orig + FD_STEP;
        let up = loss(&work)?;
        work.get_mut(id).data_mut()[i] = orig - FD_STEP;
        let down = loss(&work)?;
        work.get_mut(id).data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * FD_STEP);
        let a = analytic.get(id).map_or(0.0, |g| g.data()[i]);
        if !numeric.is_finite() || !a.is_finite() {
            return Err(Error::NonFinite(format!("gradient check of `{}`[{i}]", store.name(id))));
        }
        let rel_err = relative_error(a, numeric);
        let entry = GradCheckEntry { param: store.name(id).to_string(), index: i, analytic: a, numeric, rel_err };
        report.checked += 1;
        if rel_err > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = rel_err;
            report.worst = Some(entry.clone());
        }
        if rel_err > tolerance {
            report.failures.push(entry);
        }
    }
    Ok(report)
}
