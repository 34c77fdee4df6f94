//! Adam optimiser with decoupled weight decay.
//!
//! Moments are kept per parameter name in sorted maps and updates are
//! applied in name order with chunked elementwise kernels, so optimisation
//! is bitwise deterministic alongside the rest of the stack. Parameters
//! without a gradient in a step are left untouched (no decay either).

use std::collections::BTreeMap;

use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

pub struct AdamW {
    pub cfg: AdamWConfig,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        assert!(cfg.lr > 0.0, "learning rate must be positive");
        assert!((0.0..1.0).contains(&cfg.beta1) && (0.0..1.0).contains(&cfg.beta2));
        AdamW {
            cfg,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update from a name → gradient map.
    pub fn apply(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>) {
        self.step += 1;
        let t = self.step as i32;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (name, g) in grads {
            let p = params.get(name).clone();
            assert_eq!(p.shape(), g.shape(), "gradient shape mismatch for {name}");
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            *m = m.zip(g, |mi, gi| c.beta1 * mi + (1.0 - c.beta1) * gi);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            *v = v.zip(g, |vi, gi| c.beta2 * vi + (1.0 - c.beta2) * gi * gi);
            let m = &self.m[name];
            let v = &self.v[name];
            let stepped = {
                let adam = m.zip(v, |mi, vi| {
                    (mi / bc1) / ((vi / bc2).sqrt() + c.eps)
                });
                p.zip(&adam, |pi, ai| pi - c.lr * ai - c.lr * c.weight_decay * pi)
            };
            params.update(name, stepped);
        }
    }

    /// Serialise moments and step counter into flat named tensors under the
    /// given prefix (for checkpointing).
    pub fn export_state(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        out.insert(format!("{prefix}step"), Tensor::scalar(self.step as f64));
        for (k, t) in &self.m {
            out.insert(format!("{prefix}m.{k}"), t.clone());
        }
        for (k, t) in &self.v {
            out.insert(format!("{prefix}v.{k}"), t.clone());
        }
        out
    }

    /// Restore moments and step counter written by [`AdamW::export_state`].
    pub fn import_state(&mut self, prefix: &str, state: &BTreeMap<String, Tensor>) {
        if let Some(s) = state.get(&format!("{prefix}step")) {
            self.step = s.item() as u64;
        }
        self.m.clear();
        self.v.clear();
        for (k, t) in state {
            if let Some(name) = k.strip_prefix(&format!("{prefix}m.")) {
                self.m.insert(name.to_string(), t.clone());
            } else if let Some(name) = k.strip_prefix(&format!("{prefix}v.")) {
                self.v.insert(name.to_string(), t.clone());
            }
        }
    }
}
