use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::params::{NamedTensor, ParamStore};
use crate::NnError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Linear warmup length in steps; 0 disables warmup.
    pub warmup_steps: u64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            warmup_steps: 100,
            clip_norm: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub grad_norm: f64,
    pub lr: f64,
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    step: u64,
}

/// Serializable optimizer moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamWState {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<NamedTensor>,
    pub v: Vec<NamedTensor>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Array2<f64>> = store.values().iter().map(|p| Array2::zeros(p.dim())).collect();
        Self {
            config,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        let w = self.config.warmup_steps;
        if w == 0 || step >= w {
            self.config.lr
        } else {
            self.config.lr * (step + 1) as f64 / w as f64
        }
    }

    /// Applies one update. Rejects non-finite gradients before touching any parameter.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Array2<f64>]) -> Result<StepStats, NnError> {
        if grads.len() != store.len() {
            return Err(NnError::Shape(format!("{} gradients for {} blocks", grads.len(), store.len())));
        }
        for (id, g) in store.ids().zip(grads) {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(NnError::NonFiniteGradient(store.name(id).to_string()));
            }
        }
        let norm = grads.iter().map(|g| g.iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
        let clip = if self.config.clip_norm > 0.0 && norm > self.config.clip_norm {
            self.config.clip_norm / norm
        } else {
            1.0
        };
        let lr = self.lr_at(self.step);
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let g = &grads[i];
            let p = store.get_mut(id);
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                let g = g * clip;
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
                *p -= lr * (update + c.weight_decay * *p);
            });
        }
        Ok(StepStats { grad_norm: norm, lr })
    }

    pub fn state(&self, store: &ParamStore) -> AdamWState {
        let named = |xs: &[Array2<f64>]| {
            store
                .ids()
                .zip(xs)
                .map(|(id, a)| NamedTensor::from_array(store.name(id), a))
                .collect()
        };
        AdamWState {
            config: self.config,
            step: self.step,
            m: named(&self.m),
            v: named(&self.v),
        }
    }

    pub fn from_state(state: &AdamWState, store: &ParamStore) -> Result<Self, NnError> {
        let load = |xs: &[NamedTensor]| -> Result<Vec<Array2<f64>>, NnError> {
            if xs.len() != store.len() {
                return Err(NnError::Shape("optimizer moments do not match parameters".into()));
            }
            xs.iter()
                .zip(store.values())
                .map(|(t, p)| {
                    let a = t.to_array()?;
                    if a.dim() != p.dim() {
                        return Err(NnError::Shape(format!("moment {} has wrong shape", t.name)));
                    }
                    Ok(a)
                })
                .collect()
        };
        Ok(Self {
            config: state.config,
            m: load(&state.m)?,
            v: load(&state.v)?,
            step: state.step,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut store = ParamStore::new();
        store.add("w", Array2::from_elem((2, 3), 0.5));
        let before = store.clone();
        let mut opt = AdamW::new(AdamWConfig::default(), &store);
        opt.step(&mut store, &[Array2::zeros((2, 3))]).unwrap();
        assert_eq!(store, before);
    }

    #[test]
    fn non_finite_gradient_names_block() {
        let mut store = ParamStore::new();
        store.add("head.weight", Array2::zeros((1, 1)));
        let mut opt = AdamW::new(AdamWConfig::default(), &store);
        let err = opt.step(&mut store, &[Array2::from_elem((1, 1), f64::NAN)]).unwrap_err();
        assert_eq!(err, NnError::NonFiniteGradient("head.weight".into()));
        assert_eq!(store.get(crate::ParamId(0))[[0, 0]], 0.0);
    }

    #[test]
    fn warmup_is_linear() {
        let store = ParamStore::new();
        let opt = AdamW::new(AdamWConfig { lr: 1.0, warmup_steps: 4, ..Default::default() }, &store);
        assert_eq!(opt.lr_at(0), 0.25);
        assert_eq!(opt.lr_at(3), 1.0);
        assert_eq!(opt.lr_at(10), 1.0);
    }

    #[test]
    fn first_step_moves_against_gradient_by_lr() {
        let mut store = ParamStore::new();
        store.add("w", Array2::zeros((1, 2)));
        let cfg = AdamWConfig { lr: 0.1, warmup_steps: 0, clip_norm: 0.0, ..Default::default() };
        let mut opt = AdamW::new(cfg, &store);
        opt.step(&mut store, &[ndarray::arr2(&[[2.0, -3.0]])]).unwrap();
        let w = store.get(crate::ParamId(0));
        assert!((w[[0, 0]] + 0.1).abs() < 1e-6);
        assert!((w[[0, 1]] - 0.1).abs() < 1e-6);
    }
}
