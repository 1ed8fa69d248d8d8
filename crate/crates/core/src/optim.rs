//! Adam with bias correction.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math::{pow, sqrt};
use crate::params::ParamTree;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let betas = (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2);
        if !(self.lr > 0.0 && self.eps > 0.0 && betas) {
            return Err(Error::InvalidArgument(alloc::format!(
                "Adam needs lr > 0, eps > 0 and betas in [0, 1), got {self:?}"
            )));
        }
        Ok(())
    }
}

/// First and second moment estimates, one buffer per parameter leaf.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// Update every leaf of `params` in place. `grads` must follow the tree's
/// visit order; the state is sized on the first call.
pub fn adam_step<P: ParamTree<Tensor>>(params: &mut P, grads: &[Tensor], state: &mut AdamState, hyper: &AdamConfig) -> Result<()> {
    let mut shapes = Vec::new();
    params.visit("", &mut |_, t| shapes.push(t.shape().to_vec()));
    if shapes.len() != grads.len() {
        return Err(Error::LengthMismatch {
            left: grads.len(),
            right: shapes.len(),
        });
    }
    for (s, g) in shapes.iter().zip(grads) {
        if s.as_slice() != g.shape() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                left: s.clone(),
                right: g.shape().to_vec(),
            });
        }
    }
    if state.m.is_empty() && !grads.is_empty() {
        state.m = grads.iter().map(|g| alloc::vec![0.0; g.len()]).collect();
        state.v = state.m.clone();
    } else if state.m.len() != grads.len() || state.m.iter().zip(grads).any(|(m, g)| m.len() != g.len()) {
        return Err(Error::InvalidArgument("optimizer state does not match parameters".into()));
    }
    state.step += 1;
    let t = state.step as f64;
    let c1 = 1.0 - pow(hyper.beta1, t);
    let c2 = 1.0 - pow(hyper.beta2, t);
    let mut k = 0;
    params.visit_mut("", &mut |_, p| {
        let (m, v, g) = (&mut state.m[k], &mut state.v[k], grads[k].data());
        for (i, w) in p.data_mut().iter_mut().enumerate() {
            m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * g[i];
            v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            *w -= hyper.lr * m_hat / (sqrt(v_hat) + hyper.eps);
        }
        k += 1;
    });
    Ok(())
}
