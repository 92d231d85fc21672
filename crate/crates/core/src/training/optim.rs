use std::f64::consts::PI;

use crate::error::{contract_err, Error, Result};
use crate::model::params::{ParamStore, Trainable};
use crate::numerics::{Array, Gradients};

/// Linear warmup to `base`, then cosine decay to zero at `total`.
pub fn cosine_lr(step: u64, base: f64, warmup: u64, total: u64) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    base * 0.5 * (1.0 + (PI * progress).cos())
}

/// Adam moments with decoupled weight decay on rank-2 tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Array>,
    v: Vec<Array>,
    t: u64,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let zeros = || -> Vec<Array> { store.entries().iter().map(|e| Array::zeros(e.value.shape())).collect() };
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update to every parameter with a gradient. A gradient on a
    /// tensor outside `trainable` is a contract violation. Gradients are
    /// rescaled so their global norm is at most `clip` (when positive).
    /// Returns the pre-clip gradient norm.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, trainable: Trainable, lr: f64, clip: f64) -> Result<f64> {
        let mut present = Vec::new();
        let mut sq = 0.0;
        for id in 0..store.len() {
            let Some(g) = grads.param(id) else { continue };
            let e = store.entry(id);
            if !trainable.allows(e.group) {
                return Err(contract_err!("gradient reached frozen parameter '{}'", e.name));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of '{}'", e.name)));
            }
            sq += g.data().iter().map(|v| v * v).sum::<f64>();
            present.push(id);
        }
        let norm = sq.sqrt();
        let scale = if clip > 0.0 && norm > clip { clip / norm } else { 1.0 };
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for id in present {
            let g = grads.param(id).expect("collected above");
            let decay = if store.value(id).shape().len() == 2 { self.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[id], &mut self.v[id]);
            let w = store.value_mut(id);
            for (((w, m), v), &g) in w
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                let g = g * scale;
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
                *w -= lr * (update + decay * *w);
            }
        }
        Ok(norm)
    }

    /// Moments as named tensors for checkpointing.
    pub fn export(&self, store: &ParamStore) -> Vec<(String, Array)> {
        let mut out = vec![("adam.t".to_string(), Array::scalar(self.t as f64))];
        for (id, e) in store.entries().iter().enumerate() {
            out.push((format!("adam.m.{}", e.name), self.m[id].clone()));
            out.push((format!("adam.v.{}", e.name), self.v[id].clone()));
        }
        out
    }

    /// Restores moments exported by [`AdamW::export`]; `None` when the state
    /// holds no optimizer tensors.
    pub fn import(store: &ParamStore, state: &[(String, Array)], weight_decay: f64) -> Result<Option<Self>> {
        let Some((_, t)) = state.iter().find(|(n, _)| n == "adam.t") else {
            return Ok(None);
        };
        let mut opt = AdamW::new(store, weight_decay);
        opt.t = t.item() as u64;
        for (name, value) in state {
            let (slot, pname) = if let Some(p) = name.strip_prefix("adam.m.") {
                (0, p)
            } else if let Some(p) = name.strip_prefix("adam.v.") {
                (1, p)
            } else {
                continue;
            };
            let id = store
                .id(pname)
                .ok_or_else(|| Error::Checkpoint(format!("optimizer state for unknown parameter '{pname}'")))?;
            if value.shape() != store.value(id).shape() {
                return Err(Error::Checkpoint(format!("optimizer state shape mismatch for '{pname}'")));
            }
            if slot == 0 {
                opt.m[id] = value.clone();
            } else {
                opt.v[id] = value.clone();
            }
        }
        Ok(Some(opt))
    }
}
