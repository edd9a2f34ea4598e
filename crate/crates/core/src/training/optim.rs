use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{quantize_f32, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam moments aligned with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.ids().map(|id| Tensor::zeros(store.get(id).shape())).collect();
        Adam { step: 0, m: zeros.clone(), v: zeros }
    }
}

/// One bias-corrected Adam update of the parameters in `trainable` (all
/// parameters when `None`). Parameters and moments are rounded to `f32`
/// afterwards. A non-finite gradient rejects the whole step.
pub fn adam_step(
    store: &mut ParamStore,
    grads: &Gradients,
    adam: &mut Adam,
    lr: f64,
    trainable: Option<&[ParamId]>,
) -> Result<()> {
    if let Some(id) = grads.first_non_finite() {
        return Err(Error::NonFinite(format!("gradient of `{}` is not finite; step rejected", store.name(id))));
    }
    adam.step += 1;
    let t = adam.step as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    let ids: Vec<ParamId> = match trainable {
        Some(ids) => ids.to_vec(),
        None => store.ids().collect(),
    };
    for id in ids {
        let (m, v) = (&mut adam.m[id.0], &mut adam.v[id.0]);
        let p = store.get_mut(id);
        let g = grads.get(id);
        for i in 0..p.len() {
            let gi = g.map_or(0.0, |g| g.data()[i]);
            let mi = BETA1 * m.data()[i] + (1.0 - BETA1) * gi;
            let vi = BETA2 * v.data()[i] + (1.0 - BETA2) * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            p.data_mut()[i] -= lr * (mi / c1) / ((vi / c2).sqrt() + ADAM_EPS);
        }
        quantize_f32(p.data_mut());
        quantize_f32(m.data_mut());
        quantize_f32(v.data_mut());
    }
    Ok(())
}

/// Reduce-on-plateau learning-rate schedule with an early-stop counter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plateau {
    pub lr: f64,
    pub best: Option<f64>,
    pub bad_epochs: usize,
    pub since_best: usize,
    pub patience: usize,
    pub decay: f64,
    pub threshold: f64,
}

impl Plateau {
    pub fn new(lr: f64, patience: usize, decay: f64) -> Self {
        Plateau { lr, best: None, bad_epochs: 0, since_best: 0, patience, decay, threshold: 1e-6 }
    }

    /// Feeds one validation loss; returns whether it improved on the best.
    pub fn observe(&mut self, loss: f64) -> bool {
        let improved = self.best.is_none_or(|b| loss < b - self.threshold);
        if improved {
            self.best = Some(loss);
            self.bad_epochs = 0;
            self.since_best = 0;
        } else {
            self.bad_epochs += 1;
            self.since_best += 1;
            if self.bad_epochs >= self.patience {
                self.lr *= self.decay;
                self.bad_epochs = 0;
            }
        }
        improved
    }
}

/// Learning rate after replaying `history` through a fresh schedule.
pub fn reduce_on_plateau(history: &[f64], lr: f64, patience: usize, decay: f64) -> f64 {
    let mut p = Plateau::new(lr, patience, decay);
    for &l in history {
        p.observe(l);
    }
    p.lr
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plateau_boundaries() {
        let dec: Vec<f64> = (0..30).map(|i| 10.0 - i as f64).collect();
        assert_eq!(reduce_on_plateau(&dec, 1e-4, 10, 0.1), 1e-4);
        assert_eq!(reduce_on_plateau(&[1.0; 10], 1e-4, 10, 0.1), 1e-4);
        assert!((reduce_on_plateau(&[1.0; 11], 1e-4, 10, 0.1) - 1e-5).abs() < 1e-20);
        assert!((reduce_on_plateau(&[1.0; 21], 1e-4, 10, 0.1) - 1e-6).abs() < 1e-20);
    }

    #[test]
    fn improvement_resets_counter() {
        let mut h = vec![1.0; 10];
        h.push(0.5);
        h.extend([0.5; 9]);
        assert_eq!(reduce_on_plateau(&h, 1.0, 10, 0.1), 1.0);
    }

    #[test]
    fn adam_first_step_closed_form() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]));
        let mut adam = Adam::new(&store);
        let mut g = Gradients::new(1);
        g.accumulate_param(id, &Tensor::from_vec(&[3], vec![0.3, -4.0, 0.0]));
        adam_step(&mut store, &g, &mut adam, 0.01, None).unwrap();
        // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
        let expect = [1.0 - 0.01 * 0.3 / (0.3 + 1e-8), -2.0 + 0.01 * 4.0 / (4.0 + 1e-8), 0.5];
        for (a, e) in store.get(id).data().iter().zip(expect) {
            assert!((a - e).abs() < 1e-7, "{a} vs {e}");
        }
    }

    #[test]
    fn zero_gradient_keeps_params_and_decays_moments() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::from_vec(&[1], vec![0.25]));
        let mut adam = Adam::new(&store);
        adam.m[0].data_mut()[0] = 1.0;
        adam.v[0].data_mut()[0] = 1.0;
        let g = Gradients::new(1);
        let before = store.get(id).clone();
        // Moments are non-zero, so params move; check the moment decay and
        // that a truly fresh state stays fixed.
        adam_step(&mut store, &g, &mut adam, 0.1, None).unwrap();
        assert_eq!(adam.m[0].data()[0], 0.9f32 as f64);
        let mut fresh = Adam::new(&store);
        let now = store.get(id).clone();
        adam_step(&mut store, &g, &mut fresh, 0.1, None).unwrap();
        assert_eq!(store.get(id), &now);
        assert_ne!(&now, &before);
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::zeros(&[1]));
        let mut adam = Adam::new(&store);
        let mut g = Gradients::new(1);
        g.accumulate_param(id, &Tensor::from_vec(&[1], vec![f64::NAN]));
        assert!(matches!(adam_step(&mut store, &g, &mut adam, 0.1, None), Err(Error::NonFinite(_))));
        assert_eq!(adam.step, 0);
    }
}
