use super::tape::{Gradients, Tape};
use indexmap::IndexMap;
use ndarray::Array2;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ParamError {
    #[error("parameter `{0}` already registered")]
    Duplicate(String),
    #[error("unknown parameter `{0}`")]
    Unknown(String),
    #[error("gradient shape {got_r}x{got_c} does not match parameter `{name}` ({want_r}x{want_c})")]
    GradShape {
        name: String,
        got_r: usize,
        got_c: usize,
        want_r: usize,
        want_c: usize,
    },
    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGrad(String),
    #[error("checkpoint io: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct ParamEntry {
    pub value: Array2<f64>,
    pub grad: Array2<f64>,
    pub adam_m: Array2<f64>,
    pub adam_v: Array2<f64>,
}

/// Named parameter arrays with their gradient accumulators and optimizer
/// state. Iteration order is insertion order, so traversals are
/// deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    pub(crate) entries: IndexMap<String, ParamEntry>,
    pub(crate) step: u64,
}

/// Adam hyperparameters (bias correction always applied).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 5e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: &str, value: Array2<f64>) -> Result<(), ParamError> {
        if self.entries.contains_key(name) {
            return Err(ParamError::Duplicate(name.to_string()));
        }
        let shape = value.dim();
        self.entries.insert(
            name.to_string(),
            ParamEntry {
                value,
                grad: Array2::zeros(shape),
                adam_m: Array2::zeros(shape),
                adam_v: Array2::zeros(shape),
            },
        );
        Ok(())
    }

    pub fn value(&self, name: &str) -> &Array2<f64> {
        &self
            .entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
            .value
    }

    pub fn value_mut(&mut self, name: &str) -> &mut Array2<f64> {
        &mut self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
            .value
    }

    pub fn grad(&self, name: &str) -> &Array2<f64> {
        &self
            .entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
            .grad
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn zero_grads(&mut self) {
        for entry in self.entries.values_mut() {
            entry.grad.fill(0.0);
        }
    }

    pub fn accumulate_grad(&mut self, name: &str, grad: &Array2<f64>) -> Result<(), ParamError> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| ParamError::Unknown(name.to_string()))?;
        if entry.value.dim() != grad.dim() {
            return Err(ParamError::GradShape {
                name: name.to_string(),
                got_r: grad.nrows(),
                got_c: grad.ncols(),
                want_r: entry.value.nrows(),
                want_c: entry.value.ncols(),
            });
        }
        entry.grad += grad;
        Ok(())
    }

    /// Route every bound parameter's gradient from a finished backward
    /// sweep into the accumulators, scaled by `scale` (use `1.0 / batch`
    /// for mean losses accumulated per sample).
    pub fn absorb_gradients(
        &mut self,
        tape: &Tape,
        grads: &mut Gradients,
        scale: f64,
    ) -> Result<(), ParamError> {
        for (name, node) in tape.param_bindings() {
            if let Some(g) = grads.take(*node) {
                let scaled = if scale == 1.0 { g } else { g.mapv(|v| v * scale) };
                self.accumulate_grad(name, &scaled)?;
            }
        }
        Ok(())
    }

    /// One Adam update over every parameter. Errors (naming the
    /// parameter) if any gradient is non-finite; parameters are untouched
    /// in that case.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<(), ParamError> {
        for (name, entry) in &self.entries {
            if entry.grad.iter().any(|v| !v.is_finite()) {
                return Err(ParamError::NonFiniteGrad(name.clone()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for entry in self.entries.values_mut() {
            ndarray::Zip::from(&mut entry.adam_m)
                .and(&entry.grad)
                .for_each(|m, &g| *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g);
            ndarray::Zip::from(&mut entry.adam_v)
                .and(&entry.grad)
                .for_each(|v, &g| *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g);
            ndarray::Zip::from(&mut entry.value)
                .and(&entry.adam_m)
                .and(&entry.adam_v)
                .for_each(|p, &m, &v| {
                    let m_hat = m / bc1;
                    let v_hat = v / bc2;
                    *p -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
                });
        }
        Ok(())
    }
}
