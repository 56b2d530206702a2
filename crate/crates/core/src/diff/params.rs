use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diff::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    value: Tensor,
    grad: Option<Vec<f64>>,
    m: Vec<f64>,
    v: Vec<f64>,
    frozen: bool,
}

/// Named parameters plus Adam moment state.
///
/// Gradients accumulate through [`ParamStore::accumulate_grad`] until
/// [`ParamStore::zero_grad`] is called.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Entry>,
    step: u64,
    warned: BTreeSet<String>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::InvalidConfig(format!("duplicate parameter `{name}`")));
        }
        let n = value.numel();
        self.entries.insert(
            name,
            Entry {
                value,
                grad: None,
                m: vec![0.0; n],
                v: vec![0.0; n],
                frozen: false,
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|e| &e.value)
    }

    /// Replaces the value of an existing parameter, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown parameter `{name}`")))?;
        if entry.value.shape() != value.shape() {
            return Err(Error::shape("set", entry.value.shape(), value.shape()));
        }
        entry.value = value;
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn freeze(&mut self, name: &str) {
        if let Some(e) = self.entries.get_mut(name) {
            e.frozen = true;
            e.grad = None;
        }
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.entries.get(name).is_some_and(|e| e.frozen)
    }

    pub fn grad(&self, name: &str) -> Option<&[f64]> {
        self.entries.get(name).and_then(|e| e.grad.as_deref())
    }

    pub fn accumulate_grad(&mut self, name: &str, g: &[f64]) {
        let Some(e) = self.entries.get_mut(name) else {
            return;
        };
        if e.frozen {
            return;
        }
        match &mut e.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => e.grad = Some(g.to_vec()),
        }
    }

    pub fn zero_grad(&mut self) {
        for e in self.entries.values_mut() {
            e.grad = None;
        }
    }

    /// One bias-corrected Adam update of every parameter that holds a
    /// gradient. Parameters without one are left untouched.
    pub fn adam_step(&mut self, cfg: &AdamConfig) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (name, e) in &mut self.entries {
            let Some(g) = &e.grad else {
                if !e.frozen && self.warned.insert(name.clone()) {
                    log::warn!("parameter `{name}` has no gradient; skipping update");
                }
                continue;
            };
            let values = e.value.data_mut();
            for (((p, &gi), m), v) in values.iter_mut().zip(g).zip(&mut e.m).zip(&mut e.v) {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * gi;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * gi * gi;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = CheckpointDoc {
            step: self.step,
            params: self
                .entries
                .iter()
                .map(|(name, e)| {
                    (
                        name.clone(),
                        ParamDoc {
                            shape: e.value.shape().to_vec(),
                            values: e.value.data().to_vec(),
                            m: e.m.clone(),
                            v: e.v.clone(),
                            frozen: e.frozen,
                        },
                    )
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: CheckpointDoc = serde_json::from_str(text)?;
        let mut store = ParamStore {
            step: doc.step,
            ..ParamStore::default()
        };
        for (name, p) in doc.params {
            let value = Tensor::new(p.shape, p.values)?;
            let n = value.numel();
            if p.m.len() != n || p.v.len() != n {
                return Err(Error::Format {
                    what: "checkpoint",
                    detail: format!("moment arrays of `{name}` do not match its shape"),
                });
            }
            store.entries.insert(
                name,
                Entry {
                    value,
                    grad: None,
                    m: p.m,
                    v: p.v,
                    frozen: p.frozen,
                },
            );
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::from_json(&text)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct CheckpointDoc {
    step: u64,
    params: BTreeMap<String, ParamDoc>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamDoc {
    shape: Vec<usize>,
    values: Vec<f64>,
    m: Vec<f64>,
    v: Vec<f64>,
    #[serde(default)]
    frozen: bool,
}
