use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{shape_err, Error, Result};

/// Named parameter tensors, iterated in name order.
pub type ParamStore<T = f32> = BTreeMap<String, Tensor<T>>;

/// Adam hyperparameters, step counter, and per-parameter moments.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub hyper: Adam,
    pub step: u64,
    pub first_moment: BTreeMap<String, Vec<f32>>,
    pub second_moment: BTreeMap<String, Vec<f32>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamState {
    pub fn new(hyper: Adam) -> Self {
        Self {
            hyper,
            step: 0,
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
        }
    }

    /// One bias-corrected Adam update of every parameter named in `grads`.
    /// Parameters without a gradient entry are left alone.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Vec<f32>>) -> Result<()> {
        for (name, g) in grads {
            let p = params.get(name).ok_or_else(|| Error::MissingEntry(name.clone()))?;
            if p.len() != g.len() {
                return shape_err(format!(
                    "adam: gradient for `{name}` has {} values, parameter has {}",
                    g.len(),
                    p.len()
                ));
            }
        }
        self.step += 1;
        let Adam { lr, beta1, beta2, eps } = self.hyper;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            let m = self
                .first_moment
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            let v = self
                .second_moment
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi as f64;
                let m_new = beta1 * *mi as f64 + (1.0 - beta1) * gi;
                let v_new = beta2 * *vi as f64 + (1.0 - beta2) * gi * gi;
                *mi = m_new as f32;
                *vi = v_new as f32;
                let update = lr * (m_new / bc1) / ((v_new / bc2).sqrt() + eps);
                *w = (*w as f64 - update) as f32;
            }
        }
        Ok(())
    }
}

/// Free-function form of [`AdamState::step`].
pub fn adam_step(params: &mut ParamStore, grads: &BTreeMap<String, Vec<f32>>, state: &mut AdamState) -> Result<()> {
    state.step(params, grads)
}
