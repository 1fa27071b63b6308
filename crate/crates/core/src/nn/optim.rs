//! Parameter storage and the AdamW optimizer (decoupled weight decay).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new(), m: Vec::new(), v: Vec::new(), step: 0 }
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.m.push(vec![0.0; t.len()]);
        self.v.push(vec![0.0; t.len()]);
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Copy values and optimizer state from another store with identical layout.
    pub fn copy_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.names != other.names {
            return Err(Error::ShapeMismatch("parameter layout mismatch".into()));
        }
        self.tensors = other.tensors.clone();
        self.m = other.m.clone();
        self.v = other.v.clone();
        self.step = other.step;
        Ok(())
    }

    /// Polyak averaging: `self <- (1 - tau) * self + tau * online`, parameter-wise.
    pub fn polyak_from(&mut self, online: &ParamStore, tau: f64) -> Result<()> {
        if self.names != online.names {
            return Err(Error::ShapeMismatch("polyak: architecture mismatch".into()));
        }
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::InvalidArgument("polyak tau outside [0,1]".into()));
        }
        for (t, o) in self.tensors.iter_mut().zip(&online.tensors) {
            for (x, y) in t.data.iter_mut().zip(&o.data) {
                *x = (1.0 - tau) * *x + tau * y;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-2 }
    }
}

impl AdamWConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Default::default() }
    }
}

/// One AdamW update over the provided gradients. Parameters without a gradient
/// entry are left untouched (including their decay).
pub fn adamw_step(
    store: &mut ParamStore,
    grads: &[(ParamId, Vec<f64>)],
    cfg: &AdamWConfig,
) -> Result<()> {
    if cfg.lr <= 0.0 {
        return Err(Error::InvalidArgument("learning rate must be positive".into()));
    }
    store.step += 1;
    let t = store.step as f64;
    let bc1 = 1.0 - cfg.beta1.powf(t);
    let bc2 = 1.0 - cfg.beta2.powf(t);
    for (pid, grad) in grads {
        let i = pid.0;
        if grad.len() != store.tensors[i].len() {
            return Err(Error::ShapeMismatch(format!(
                "gradient length mismatch for parameter {}",
                store.names[i]
            )));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient for parameter {}",
                store.names[i]
            )));
        }
        for j in 0..grad.len() {
            let g = grad[j];
            store.m[i][j] = cfg.beta1 * store.m[i][j] + (1.0 - cfg.beta1) * g;
            store.v[i][j] = cfg.beta2 * store.v[i][j] + (1.0 - cfg.beta2) * g * g;
            let m_hat = store.m[i][j] / bc1;
            let v_hat = store.v[i][j] / bc2;
            let w = &mut store.tensors[i].data[j];
            *w -= cfg.lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * *w);
        }
    }
    Ok(())
}


// checkpoint support
impl ParamStore {
    pub(crate) fn opt_state(&self, id: ParamId) -> (&[f64], &[f64]) {
        (&self.m[id.0], &self.v[id.0])
    }

    pub(crate) fn set_opt_state(&mut self, id: ParamId, m: Vec<f64>, v: Vec<f64>) -> Result<()> {
        if m.len() != self.tensors[id.0].len() || v.len() != self.tensors[id.0].len() {
            return Err(Error::Checkpoint("optimizer state length mismatch".into()));
        }
        self.m[id.0] = m;
        self.v[id.0] = v;
        Ok(())
    }

    pub(crate) fn set_step(&mut self, step: u64) {
        self.step = step;
    }
}
