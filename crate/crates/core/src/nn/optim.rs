//! Adam with a warmup-then-linear-decay learning rate.

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use super::params::{Grads, ParamStore};
use crate::scalar::Scalar;

/// Learning rate at `step` of `total`: linear rise to `peak` over the first
/// `warmup` fraction of steps, then linear decay to zero at `total`.
pub fn scheduled_lr(step: usize, total: usize, peak: f64, warmup: f64) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let w = ((total as f64 * warmup).ceil() as usize).clamp(1, total);
    if step < w {
        peak * step as f64 / w as f64
    } else if total == w {
        peak
    } else {
        peak * (total.saturating_sub(step)) as f64 / (total - w) as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub struct Adam<T> {
    cfg: AdamConfig,
    m: Vec<Array2<T>>,
    v: Vec<Array2<T>>,
    t: i32,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig, params: &ParamStore<T>) -> Self {
        let zeros = || params.ids().map(|id| Array2::zeros(params.get(id).raw_dim())).collect();
        Adam {
            cfg,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// One update with learning rate `lr`. Parameters without a gradient
    /// still decay their moments.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &Grads<T>, lr: f64) {
        self.t += 1;
        let b1 = T::of(self.cfg.beta1);
        let b2 = T::of(self.cfg.beta2);
        let c1 = T::one() - b1.powi(self.t);
        let c2 = T::one() - b2.powi(self.t);
        let lr = T::of(lr);
        let eps = T::of(self.cfg.eps);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            match grads.get(id) {
                Some(g) => {
                    Zip::from(&mut *m)
                        .and(g)
                        .for_each(|m, &g| *m = b1 * *m + (T::one() - b1) * g);
                    Zip::from(&mut *v)
                        .and(g)
                        .for_each(|v, &g| *v = b2 * *v + (T::one() - b2) * g * g);
                }
                None => {
                    m.mapv_inplace(|x| x * b1);
                    v.mapv_inplace(|x| x * b2);
                }
            }
            Zip::from(params.get_mut(id))
                .and(&*m)
                .and(&*v)
                .for_each(|p, &m, &v| *p -= lr * (m / c1) / ((v / c2).sqrt() + eps));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_then_decay() {
        let total = 1000;
        assert_eq!(scheduled_lr(0, total, 1e-3, 0.01), 0.0);
        assert_eq!(scheduled_lr(10, total, 1e-3, 0.01), 1e-3);
        assert!((scheduled_lr(5, total, 1e-3, 0.01) - 5e-4).abs() < 1e-15);
        assert!(scheduled_lr(999, total, 1e-3, 0.01) < 2e-6);
        assert_eq!(scheduled_lr(1000, total, 1e-3, 0.01), 0.0);
        for s in 10..1000 {
            assert!(scheduled_lr(s + 1, total, 1e-3, 0.01) <= scheduled_lr(s, total, 1e-3, 0.01));
        }
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut store = ParamStore::<f64>::default();
        let id = store.insert_const("w", 1, 2, 1.0);
        let mut g = Grads::for_store(&store);
        g.accumulate(id, &ndarray::array![[1.0, -2.0]]);
        let mut opt = Adam::new(AdamConfig::default(), &store);
        opt.step(&mut store, &g, 0.1);
        let w = store.get(id);
        assert!((w[[0, 0]] - 0.9).abs() < 1e-6);
        assert!((w[[0, 1]] - 1.1).abs() < 1e-6);
    }
}
