use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{EntryKind, Gradients, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Cosine annealing multiplier `½(1 + cos(π·t/T))`, clamped to `t ∈ [0, T]`.
pub fn cosine_factor(t: usize, total: usize) -> f64 {
    if total == 0 {
        return 1.0;
    }
    let frac = t.min(total) as f64 / total as f64;
    0.5 * (1.0 + (PI * frac).cos())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Not given for the original setup; 0.01 is the conventional AdamW default.
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Adam with decoupled weight decay. Moments are kept per parameter slot.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    step: u64,
    first: Vec<Option<Vec<T>>>,
    second: Vec<Option<Vec<T>>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every trainable entry with learning rate `config.lr · lr_factor`.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>, lr_factor: f64) -> Result<()> {
        for id in store.param_ids() {
            if grads.get(id).is_none() {
                return Err(Error::Invariant(format!(
                    "no gradient for parameter `{}`",
                    store.name(id)
                )));
            }
        }
        let n = store.len();
        self.first.resize(n, None);
        self.second.resize(n, None);
        self.step += 1;
        let c = self.config;
        let lr = c.lr * lr_factor;
        let t = self.step as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::from_f64_lossy(c.beta1), T::from_f64_lossy(c.beta2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let decay = T::from_f64_lossy(1.0 - lr * c.weight_decay);
        let step_size = T::from_f64_lossy(lr / bias1);
        let bias2_sqrt = T::from_f64_lossy(bias2.sqrt());
        let eps = T::from_f64_lossy(c.eps);
        let ids: Vec<_> = store.param_ids().collect();
        for id in ids {
            let g = grads.get(id).expect("checked above").data();
            let p = store.get_mut(id).data_mut();
            if p.len() != g.len() {
                return Err(Error::Invariant("gradient shape differs from parameter".into()));
            }
            let m = self.first[id.index()].get_or_insert_with(|| vec![T::zero(); p.len()]);
            let v = self.second[id.index()].get_or_insert_with(|| vec![T::zero(); p.len()]);
            for i in 0..p.len() {
                m[i] = b1 * m[i] + one_b1 * g[i];
                v[i] = b2 * v[i] + one_b2 * g[i] * g[i];
                let denom = v[i].sqrt() / bias2_sqrt + eps;
                p[i] = p[i] * decay - step_size * m[i] / denom;
            }
        }
        Ok(())
    }

    /// Moment buffers as named tensors, for resumable training state.
    pub fn export_state(&self, store: &ParamStore<T>) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for (id, name, e) in store.iter() {
            if e.kind != EntryKind::Param {
                continue;
            }
            let shape = e.value.shape().to_vec();
            let zeros = || vec![T::zero(); e.value.numel()];
            let m = self.first.get(id.index()).cloned().flatten().unwrap_or_else(zeros);
            let v = self.second.get(id.index()).cloned().flatten().unwrap_or_else(zeros);
            out.push((format!("adam.m.{name}"), Tensor::new(shape.clone(), m).expect("shape")));
            out.push((format!("adam.v.{name}"), Tensor::new(shape, v).expect("shape")));
        }
        out.push((
            "adam.step".into(),
            Tensor::scalar(T::from_u64(self.step).expect("step fits")),
        ));
        out
    }

    pub fn import_state(&mut self, store: &ParamStore<T>, state: &[(String, Tensor<T>)]) -> Result<()> {
        let find = |key: &str| state.iter().find(|(n, _)| n == key).map(|(_, t)| t);
        let step = find("adam.step").ok_or_else(|| Error::Data("optimizer state lacks adam.step".into()))?;
        self.step = step.item().to_u64().unwrap_or(0);
        self.first = vec![None; store.len()];
        self.second = vec![None; store.len()];
        for (id, name, e) in store.iter() {
            if e.kind != EntryKind::Param {
                continue;
            }
            let m = find(&format!("adam.m.{name}"));
            let v = find(&format!("adam.v.{name}"));
            match (m, v) {
                (Some(m), Some(v)) if m.shape() == e.value.shape() && v.shape() == e.value.shape() => {
                    self.first[id.index()] = Some(m.data().to_vec());
                    self.second[id.index()] = Some(v.data().to_vec());
                }
                _ => return Err(Error::Data(format!("optimizer state missing or misshapen for `{name}`"))),
            }
        }
        Ok(())
    }
}
