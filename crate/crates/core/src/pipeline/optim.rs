//! Adam with a cosine-annealed learning rate.

use std::f64::consts::PI;

use crate::config::OptimConfig;
use crate::nn::ParamStore;
use crate::tensor::{Real, Tensor};

/// `lr_min + (lr0 - lr_min) (1 + cos(pi t / (T - 1))) / 2`, so step 0 gets
/// `lr0` and the final step `T - 1` gets `lr_min`.
pub fn cosine_lr(step: usize, total_steps: usize, cfg: &OptimConfig) -> f64 {
    if total_steps <= 1 {
        return cfg.lr;
    }
    let t = step.min(total_steps - 1) as f64 / (total_steps - 1) as f64;
    cfg.lr_min + (cfg.lr - cfg.lr_min) * 0.5 * (1.0 + (PI * t).cos())
}

pub struct Adam<T> {
    pub cfg: OptimConfig,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    t: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(cfg: &OptimConfig, store: &ParamStore<T>) -> Self {
        let zeros = || store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect::<Vec<_>>();
        Self { cfg: cfg.clone(), m: zeros(), v: zeros(), t: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One bias-corrected update; parameters without a gradient are left alone.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lr: f64) {
        assert_eq!(grads.len(), self.m.len(), "gradient list does not match the parameter store");
        self.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let step = T::c(lr / c1);
        let (b1t, b2t, eps) = (T::c(b1), T::c(b2), T::c(self.cfg.eps));
        let (one_b1, one_b2, inv_c2) = (T::c(1.0 - b1), T::c(1.0 - b2), T::c(1.0 / c2));
        let ids: Vec<_> = store.ids().collect();
        for (idx, (id, g)) in ids.into_iter().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            let m = self.m[idx].data_mut();
            let v = self.v[idx].data_mut();
            let p = store.get_mut(id).data_mut();
            for (((p, m), v), &g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                *m = b1t * *m + one_b1 * g;
                *v = b2t * *v + one_b2 * g * g;
                *p -= step * *m / ((*v * inv_c2).sqrt() + eps);
            }
        }
    }
}
