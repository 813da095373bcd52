use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{Result, TrainError};
use crate::params::ModelParams;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Parameters (or individual rows of a matrix parameter) excluded from
/// updates. Frozen entries keep their values and their moments.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Freeze {
    pub params: BTreeSet<String>,
    pub rows: BTreeMap<String, BTreeSet<usize>>,
}

impl Freeze {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn param(mut self, name: impl Into<String>) -> Self {
        self.params.insert(name.into());
        self
    }

    pub fn rows(mut self, name: impl Into<String>, rows: impl IntoIterator<Item = usize>) -> Self {
        self.rows.entry(name.into()).or_default().extend(rows);
        self
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty() && self.rows.values().all(BTreeSet::is_empty)
    }

    /// Union of two freeze sets.
    pub fn merged(mut self, other: &Freeze) -> Self {
        self.params.extend(other.params.iter().cloned());
        for (k, r) in &other.rows {
            self.rows.entry(k.clone()).or_default().extend(r);
        }
        self
    }

    pub(crate) fn validate(&self, params: &ModelParams) -> Result<()> {
        for name in self.params.iter().chain(self.rows.keys()) {
            if params.id(name).is_none() {
                return Err(TrainError::Config(format!("freeze: unknown parameter {name}")));
            }
        }
        for (name, rows) in &self.rows {
            let t = params.by_name(name).expect("checked above");
            if t.shape().len() != 2 {
                return Err(TrainError::Config(format!("freeze: {name} is not a matrix")));
            }
            if let Some(&r) = rows.iter().next_back().filter(|&&r| r >= t.rows()) {
                return Err(TrainError::Config(format!("freeze: row {r} out of range for {name}")));
            }
        }
        Ok(())
    }
}

/// First and second moments mirroring the parameter set, plus the step
/// counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ModelParams, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        AdamState {
            config,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One bias-corrected Adam update. Missing gradients count as zero.
    /// Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, params: &mut ModelParams, grads: &[Option<Tensor>], freeze: &Freeze) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(TrainError::Config(format!(
                "{} gradients and {} moment tensors for {} parameters",
                grads.len(),
                self.m.len(),
                params.len()
            )));
        }
        for (id, name, p) in params.iter() {
            if let Some(g) = &grads[id.index()] {
                if g.shape() != p.shape() {
                    return Err(TrainError::Config(format!("gradient shape mismatch for {name}")));
                }
                if !g.is_finite() {
                    return Err(TrainError::NonFiniteGradient(name.to_string()));
                }
            }
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - libm::pow(beta1, self.t as f64);
        let c2 = 1.0 - libm::pow(beta2, self.t as f64);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let name = params.name(id).to_string();
            if freeze.params.contains(&name) {
                continue;
            }
            let frozen_rows = freeze.rows.get(&name);
            let i = id.index();
            let cols = {
                let s = params.get(id).shape();
                if s.len() == 2 {
                    s[1]
                } else {
                    usize::MAX
                }
            };
            let g = grads[i].as_ref().map(Tensor::data);
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = params.get_mut(id).data_mut();
            for k in 0..p.len() {
                if let Some(rows) = frozen_rows {
                    if rows.contains(&(k / cols)) {
                        continue;
                    }
                }
                let gk = g.map_or(0.0, |g| g[k]);
                m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
                v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
                let mhat = m[k] / c1;
                let vhat = v[k] / c2;
                p[k] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Option<Tensor>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.data().iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let k = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|x| *x *= k);
        }
    }
    norm
}
