use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::{Gradients, ParamId, ParamStore};

/// Parameters the optimiser must leave untouched.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FreezeSet {
    ids: BTreeSet<ParamId>,
}

impl FreezeSet {
    pub fn none() -> Self {
        FreezeSet::default()
    }

    pub fn from_ids(ids: impl IntoIterator<Item = ParamId>) -> Self {
        FreezeSet {
            ids: ids.into_iter().collect(),
        }
    }

    /// Resolves parameter names against a store; unknown names are an error.
    pub fn from_names<T: Scalar>(store: &ParamStore<T>, names: &[&str]) -> Result<Self> {
        let ids = names
            .iter()
            .map(|n| {
                store
                    .id_of(n)
                    .ok_or_else(|| Error::Config(format!("unknown parameter `{n}`")))
            })
            .collect::<Result<_>>()?;
        Ok(FreezeSet { ids })
    }

    pub fn contains(&self, id: ParamId) -> bool {
        self.ids.contains(&id)
    }

    pub fn insert(&mut self, id: ParamId) {
        self.ids.insert(id);
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale the gradient when its global norm exceeds this value.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
        }
    }
}

/// Adam with per-parameter step counters, so a tensor that was frozen for a
/// while starts its bias correction from scratch when it is unfrozen.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    config: AdamConfig,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
    steps: Vec<u64>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>) -> Self {
        let sizes: Vec<usize> = store.iter().map(|(_, _, t)| t.len()).collect();
        Adam {
            config,
            first: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            second: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            steps: vec![0; sizes.len()],
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.config.learning_rate = lr;
    }

    /// Applies one update. Validates every gradient first so a NaN aborts
    /// before any parameter is written.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>, frozen: &FreezeSet) -> Result<()> {
        for (id, g) in grads.iter() {
            if !frozen.contains(id) && g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NanGradient(store.name(id).to_string()));
            }
        }
        let norm = {
            let mut sq = T::zero();
            for (id, g) in grads.iter() {
                if !frozen.contains(id) {
                    sq += g.iter().map(|&v| v * v).sum::<T>();
                }
            }
            sq.sqrt()
        };
        let clip = match self.config.clip_norm {
            Some(max) if norm > T::lit(max) => T::lit(max) / norm,
            _ => T::one(),
        };
        let (b1, b2) = (T::lit(self.config.beta1), T::lit(self.config.beta2));
        let lr = T::lit(self.config.learning_rate);
        let eps = T::lit(self.config.eps);

        for (id, g) in grads.iter() {
            if frozen.contains(id) {
                continue;
            }
            let i = id.0;
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let c1 = T::one() - b1.powi(t);
            let c2 = T::one() - b2.powi(t);
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            let w = store.get_mut(id).data_mut();
            for k in 0..w.len() {
                let gk = g[k] * clip;
                m[k] = b1 * m[k] + (T::one() - b1) * gk;
                v[k] = b2 * v[k] + (T::one() - b2) * gk * gk;
                let mhat = m[k] / c1;
                let vhat = v[k] / c2;
                w[k] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
