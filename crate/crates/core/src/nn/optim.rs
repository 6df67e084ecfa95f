use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::params::Param;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 5e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Tensor,
    v: Tensor,
    step: u64,
}

/// Adam with decoupled weight decay. Moments are kept per parameter name; a
/// parameter that is frozen or received no gradient is left untouched and its
/// step count does not advance.
#[derive(Debug, Clone)]
pub struct AdamW {
    params: Vec<Param>,
    pub config: AdamWConfig,
    state: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(params: Vec<Param>, config: AdamWConfig) -> Self {
        Self {
            params,
            config,
            state: BTreeMap::new(),
        }
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        let AdamWConfig {
            lr,
            weight_decay,
            beta1,
            beta2,
            eps,
        } = self.config;
        for p in &self.params {
            if !p.is_trainable() {
                continue;
            }
            let theta = p.var().as_tensor();
            let Some(g) = grads.get(theta) else { continue };
            let entry = match self.state.get_mut(p.name()) {
                Some(e) => e,
                None => {
                    let z = theta.zeros_like()?;
                    self.state.insert(
                        p.name().to_string(),
                        Moments {
                            m: z.clone(),
                            v: z,
                            step: 0,
                        },
                    );
                    self.state.get_mut(p.name()).expect("just inserted")
                }
            };
            entry.step += 1;
            let t = entry.step as i32;
            entry.m = ((&entry.m * beta1)? + (g * (1.0 - beta1))?)?;
            entry.v = ((&entry.v * beta2)? + (g.sqr()? * (1.0 - beta2))?)?;
            let m_hat = (&entry.m / (1.0 - beta1.powi(t)))?;
            let v_hat = (&entry.v / (1.0 - beta2.powi(t)))?;
            let update = (m_hat / (v_hat.sqrt()? + eps)?)?;
            let decayed = (theta * (1.0 - lr * weight_decay))?;
            let next = (decayed - (update * lr)?)?;
            p.set(&next.detach())?;
        }
        Ok(())
    }

    /// Moment tensors as `(name.m, m)`, `(name.v, v)` pairs plus per-name step counts.
    pub fn export(&self) -> (Vec<(String, Tensor)>, BTreeMap<String, u64>) {
        let mut tensors = Vec::with_capacity(2 * self.state.len());
        let mut steps = BTreeMap::new();
        for (name, s) in &self.state {
            tensors.push((format!("{name}.m"), s.m.clone()));
            tensors.push((format!("{name}.v"), s.v.clone()));
            steps.insert(name.clone(), s.step);
        }
        (tensors, steps)
    }

    pub fn import(&mut self, tensors: &BTreeMap<String, Tensor>, steps: &BTreeMap<String, u64>) -> Result<()> {
        self.state.clear();
        for (name, &step) in steps {
            let get = |suffix: &str| {
                tensors
                    .get(&format!("{name}.{suffix}"))
                    .cloned()
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimizer moment `{name}.{suffix}`")))
            };
            self.state.insert(
                name.clone(),
                Moments {
                    m: get("m")?,
                    v: get("v")?,
                    step,
                },
            );
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::{Init, ParamBuilder, ParamStore};
    use candle_core::DType;

    /// Scalar reference implementation of one AdamW update.
    fn reference(theta: f64, grads: &[f64], c: AdamWConfig) -> f64 {
        let (mut th, mut m, mut v) = (theta, 0.0, 0.0);
        for (i, &g) in grads.iter().enumerate() {
            let t = (i + 1) as i32;
            m = c.beta1 * m + (1.0 - c.beta1) * g;
            v = c.beta2 * v + (1.0 - c.beta2) * g * g;
            let mh = m / (1.0 - c.beta1.powi(t));
            let vh = v / (1.0 - c.beta2.powi(t));
            th = th * (1.0 - c.lr * c.weight_decay) - c.lr * mh / (vh.sqrt() + c.eps);
        }
        th
    }

    #[test]
    fn matches_scalar_reference() {
        let store = ParamStore::new(DType::F64);
        let p = ParamBuilder::new(&store, 0).weight("w", &[1], Init::Const(1.5)).unwrap();
        let cfg = AdamWConfig { lr: 0.1, ..Default::default() };
        let mut opt = AdamW::new(store.all(), cfg);
        let mut seen = Vec::new();
        for _ in 0..5 {
            // loss = w³ → grad 3w²
            let w = p.to_vec().unwrap()[0];
            seen.push(3.0 * w * w);
            let loss = p.tensor().powf(3.0).unwrap().sum_all().unwrap();
            opt.step(&loss.backward().unwrap()).unwrap();
        }
        // replay with the recorded gradients
        let want = reference(1.5, &seen, cfg);
        assert!((p.to_vec().unwrap()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn frozen_and_zero_lr_are_noops() {
        let store = ParamStore::new(DType::F32);
        let pb = ParamBuilder::new(&store, 1);
        let a = pb.weight("a", &[3], Init::Normal { std: 1.0 }).unwrap();
        let b = pb.weight("b", &[3], Init::Normal { std: 1.0 }).unwrap();
        b.set_frozen(true);
        let before = store.digest(|_| true).unwrap();
        let mut opt = AdamW::new(store.all(), AdamWConfig { lr: 0.0, ..Default::default() });
        let loss = (a.tensor().sqr().unwrap().sum_all().unwrap() + b.tensor().sum_all().unwrap()).unwrap();
        opt.step(&loss.backward().unwrap()).unwrap();
        assert_eq!(before, store.digest(|_| true).unwrap());
    }
}
