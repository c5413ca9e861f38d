//! Adam with bias correction.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tape::Gradients;
use crate::tensor::{Element, Tensor};
use crate::weights::Record;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr.is_finite()
            && self.lr >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// First and second moments per parameter name plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Element> {
    pub config: AdamConfig,
    t: u64,
    m: BTreeMap<String, Tensor<T>>,
    v: BTreeMap<String, Tensor<T>>,
}

impl<T: Element> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Steps taken so far.
    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn moments(&self, name: &str) -> Option<(&Tensor<T>, &Tensor<T>)> {
        Some((self.m.get(name)?, self.v.get(name)?))
    }

    /// One update of every trainable entry in `stores`.
    ///
    /// All gradients are checked before anything changes; a non-finite
    /// gradient aborts naming the parameter.
    pub fn step(&mut self, stores: &mut [&mut ParamStore<T>], grads: &Gradients<T>) -> Result<()> {
        for store in stores.iter() {
            for e in store.trainable() {
                let g = grads
                    .param(&e.name)
                    .ok_or_else(|| Error::Tape(format!("no gradient for parameter {}", e.name)))?;
                if g.shape() != e.value.shape() {
                    return Err(Error::dim(
                        "adam_step",
                        format!("gradient for {} has shape {:?}, parameter {:?}", e.name, g.shape(), e.value.shape()),
                    ));
                }
                if !g.all_finite() {
                    return Err(Error::Numerical(format!("non-finite gradient for parameter {}", e.name)));
                }
            }
        }
        self.t += 1;
        let c = self.config;
        let t = i32::try_from(self.t).unwrap_or(i32::MAX);
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for store in stores.iter_mut() {
            let names: Vec<String> = store.trainable().map(|e| e.name.clone()).collect();
            for name in names {
                let g = grads.param(&name).expect("checked above");
                let p = store.get_mut(&name).expect("listed above");
                let m = self.m.entry(name.clone()).or_insert_with(|| g.zeros_like());
                let v = self.v.entry(name).or_insert_with(|| g.zeros_like());
                for (((p, m), v), g) in p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
                    let g = g.as_f64();
                    let mn = c.beta1 * m.as_f64() + (1.0 - c.beta1) * g;
                    let vn = c.beta2 * v.as_f64() + (1.0 - c.beta2) * g * g;
                    *m = T::from_f64_lossy(mn);
                    *v = T::from_f64_lossy(vn);
                    let mhat = m.as_f64() / bc1;
                    let vhat = v.as_f64() / bc2;
                    *p = T::from_f64_lossy(p.as_f64() - c.lr * mhat / (vhat.sqrt() + c.eps));
                }
            }
        }
        Ok(())
    }

    /// Moments as `m/<name>` and `v/<name>` records.
    pub fn to_records(&self) -> Vec<Record> {
        let m = self.m.iter().map(|(k, t)| (format!("m/{k}"), t.cast()));
        let v = self.v.iter().map(|(k, t)| (format!("v/{k}"), t.cast()));
        m.chain(v).collect()
    }

    pub fn from_records(config: AdamConfig, t: u64, records: &[Record]) -> Result<Self> {
        let mut s = Self::new(config);
        s.t = t;
        for (name, tensor) in records {
            let (map, key) = if let Some(k) = name.strip_prefix("m/") {
                (&mut s.m, k)
            } else if let Some(k) = name.strip_prefix("v/") {
                (&mut s.v, k)
            } else {
                return Err(Error::Format(format!("unexpected optimizer record {name}")));
            };
            map.insert(key.to_string(), tensor.cast());
        }
        if s.m.len() != s.v.len() || s.m.keys().ne(s.v.keys()) {
            return Err(Error::Format("optimizer moments are incomplete".into()));
        }
        Ok(s)
    }
}
