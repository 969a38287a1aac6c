use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensorkit::tensor::Tensor;

/// Named parameter collection with reproducible (lexicographic)
/// iteration order. Holds trainable tensors and frozen buffers such as
/// batchnorm running statistics.
#[derive(Debug, Clone, Default)]
pub struct ParameterSet {
    map: BTreeMap<String, Tensor>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        assert!(
            self.map.insert(name.to_string(), t).is_none(),
            "duplicate parameter name {name}"
        );
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.map
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Number of elements in trainable tensors.
    pub fn trainable_count(&self) -> usize {
        self.map
            .values()
            .filter(|t| t.requires_grad)
            .map(|t| t.numel())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        for t in self.map.values_mut() {
            t.zero_grad();
        }
    }
}

/// Adam optimizer state: per-parameter moment estimates plus the step
/// counter and hyperparameters.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub t: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            t: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }
}

/// One Adam update with bias correction over every trainable parameter.
/// Gradients must be populated; they are zeroed after the step.
pub fn adam_step(params: &mut ParameterSet, state: &mut AdamState) -> Result<()> {
    state.t += 1;
    let t = state.t;
    let bc1 = 1.0 - state.beta1.powi(t as i32);
    let bc2 = 1.0 - state.beta2.powi(t as i32);
    for (name, p) in params.iter_mut() {
        if !p.requires_grad {
            continue;
        }
        let n = p.numel();
        let grad = p
            .grad
            .as_ref()
            .ok_or_else(|| Error::MissingGrad(name.clone()))?
            .clone();
        let m = state
            .first
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; n]);
        let v = state
            .second
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; n]);
        let data = p.data_mut();
        for i in 0..n {
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * grad[i];
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * grad[i] * grad[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            data[i] -= state.lr * m_hat / (v_hat.sqrt() + state.epsilon);
        }
        p.zero_grad();
    }
    Ok(())
}
