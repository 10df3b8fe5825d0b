//! AdamW with decoupled weight decay and per-group learning rates.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    state: Vec<Option<Moments>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            step: 0,
            state: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. Backbone parameters use `lr * backbone_lr_mult`;
    /// frozen parameters are never touched, even if a gradient is supplied.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)], lr: f64, backbone_lr_mult: f64) {
        self.step += 1;
        if self.state.len() < store.len() {
            self.state.resize_with(store.len(), || None);
        }
        let c = self.config;
        let bc1 = 1.0 - libm::pow(c.beta1, self.step as f64);
        let bc2 = 1.0 - libm::pow(c.beta2, self.step as f64);
        for (id, grad) in grads {
            let group = store.get(*id).group;
            let lr = match group {
                ParamGroup::Frozen => continue,
                ParamGroup::Backbone => lr * backbone_lr_mult,
                ParamGroup::Head => lr,
            };
            let param = store.value_mut(*id);
            assert_eq!(param.shape(), grad.shape(), "gradient shape mismatch");
            let st = self.state[id.index()].get_or_insert_with(|| Moments {
                m: alloc::vec![0.0; grad.len()],
                v: alloc::vec![0.0; grad.len()],
            });
            for (((p, &g), m), v) in param.data_mut().iter_mut().zip(grad.data()).zip(&mut st.m).zip(&mut st.v) {
                *p -= lr * c.weight_decay * *p;
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= lr * mhat / (libm::sqrt(vhat) + c.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::from_vec(&[2], vec![1.0, -1.0]), ParamGroup::Head);
        let b = store.add("b", Tensor::from_vec(&[1], vec![2.0]), ParamGroup::Backbone);
        let f = store.add("f", Tensor::from_vec(&[1], vec![3.0]), ParamGroup::Frozen);
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        });
        let grads = vec![
            (a, Tensor::from_vec(&[2], vec![0.5, -4.0])),
            (b, Tensor::from_vec(&[1], vec![1.0])),
            (f, Tensor::from_vec(&[1], vec![1.0])),
        ];
        opt.step(&mut store, &grads, 0.1, 0.1);
        // Bias-corrected Adam moves each coordinate by lr * sign(g) at step 1.
        let va = store.value(a).data();
        assert!((va[0] - 0.9).abs() < 1e-6 && (va[1] + 0.9).abs() < 1e-6);
        assert!((store.value(b).item() - 1.99).abs() < 1e-6);
        assert_eq!(store.value(f).item(), 3.0);
    }

    #[test]
    fn decay_is_decoupled() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::from_vec(&[1], vec![10.0]), ParamGroup::Head);
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.5,
            ..AdamWConfig::default()
        });
        opt.step(&mut store, &[(a, Tensor::from_vec(&[1], vec![0.0]))], 0.1, 1.0);
        assert!((store.value(a).item() - 9.5).abs() < 1e-12);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::from_vec(&[3], vec![3.0, -2.0, 0.5]), ParamGroup::Head);
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        });
        for _ in 0..2000 {
            let g = store.value(a).clone();
            let mut g2 = g.clone();
            g2.scale(2.0);
            opt.step(&mut store, &[(a, g2)], 0.01, 1.0);
        }
        assert!(store.value(a).data().iter().all(|v| v.abs() < 1e-2));
    }
}
