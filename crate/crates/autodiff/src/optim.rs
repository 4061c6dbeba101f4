use std::collections::BTreeMap;

use crate::params::{GradMap, ParamStore};
use crate::tensor::Tensor;
use crate::{AutodiffError, Real};

/// Rescale all gradients by `cap / norm` when their global L2 norm exceeds
/// `cap`. Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut GradMap, cap: Real) -> Real {
    assert!(cap > 0.0, "clip cap must be positive");
    let norm = grads.global_norm();
    if norm > cap {
        grads.scale(cap / norm);
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: Real,
    pub beta1: Real,
    pub beta2: Real,
    pub eps: Real,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Apply one update with the configured learning rate.
    pub fn step(&mut self, params: &mut ParamStore, grads: &GradMap) -> Result<(), AutodiffError> {
        let lr = self.config.learning_rate;
        self.step_with_lr(params, grads, lr)
    }

    /// Apply one update with an explicit (scheduled) learning rate. Nothing
    /// is modified if any gradient is non-finite or names an unknown
    /// parameter.
    pub fn step_with_lr(
        &mut self,
        params: &mut ParamStore,
        grads: &GradMap,
        lr: Real,
    ) -> Result<(), AutodiffError> {
        for (name, g) in grads.iter() {
            let p = params.get(name).ok_or_else(|| AutodiffError::UnknownParameter {
                name: name.to_string(),
            })?;
            if p.shape() != g.shape() {
                return Err(AutodiffError::ShapeMismatch {
                    op: "adam_step",
                    shapes: vec![p.shape().to_vec(), g.shape().to_vec()],
                });
            }
            if !g.is_finite() {
                return Err(AutodiffError::NonFiniteGradient {
                    name: name.to_string(),
                });
            }
        }
        self.step += 1;
        let AdamConfig {
            beta1, beta2, eps, ..
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (name, g) in grads.iter() {
            let m = self
                .first
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self
                .second
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let p = params.get_mut(name).expect("checked above");
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for (i, gi) in g.data().iter().enumerate() {
                md[i] = beta1 * md[i] + (1.0 - beta1) * gi;
                vd[i] = beta2 * vd[i] + (1.0 - beta2) * gi * gi;
                let m_hat = md[i] / bc1;
                let v_hat = vd[i] / bc2;
                pd[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Moment tensors as `(kind, name, tensor)` triples for checkpointing.
    pub fn state_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (name, t) in &self.first {
            out.push((format!("adam.m.{name}"), t.clone()));
        }
        for (name, t) in &self.second {
            out.push((format!("adam.v.{name}"), t.clone()));
        }
        out
    }

    /// Rebuild optimizer state from [`Adam::state_tensors`] output.
    pub fn restore(
        config: AdamConfig,
        step: u64,
        tensors: impl IntoIterator<Item = (String, Tensor)>,
    ) -> Self {
        let mut adam = Self::new(config);
        adam.step = step;
        for (key, t) in tensors {
            if let Some(name) = key.strip_prefix("adam.m.") {
                adam.first.insert(name.to_string(), t);
            } else if let Some(name) = key.strip_prefix("adam.v.") {
                adam.second.insert(name.to_string(), t);
            }
        }
        adam
    }
}
