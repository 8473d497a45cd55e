//! Adam and RMSProp with global gradient-norm clipping.

use super::matrix::Matrix;
use super::params::ParamStore;
use super::scalar::Scalar;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum OptimizerKind {
    #[serde(rename = "adam")]
    Adam,
    #[serde(rename = "rmsprop")]
    RmsProp,
}

#[derive(Clone, Copy, Debug)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    /// Adam first-moment decay.
    pub beta1: f64,
    /// Adam second-moment decay.
    pub beta2: f64,
    pub adam_eps: f64,
    /// RMSProp squared-gradient decay.
    pub rms_decay: f64,
    pub rms_eps: f64,
    /// Global L2 gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
}

impl OptimizerConfig {
    pub fn adam(lr: f64, grad_clip: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            rms_decay: 0.99,
            rms_eps: 1e-5,
            grad_clip,
        }
    }

    pub fn rmsprop(lr: f64, grad_clip: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::RmsProp,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            rms_decay: 0.99,
            rms_eps: 1e-5,
            grad_clip,
        }
    }
}

/// Per-parameter moment buffers plus the shared step counter.
#[derive(Clone)]
pub struct Optimizer<S> {
    pub cfg: OptimizerConfig,
    step: u64,
    /// Adam first moments; unused by RMSProp.
    m: Vec<Matrix<S>>,
    /// Adam second moments or the RMSProp squared-gradient average.
    v: Vec<Matrix<S>>,
}

#[derive(Clone, Copy, Debug)]
pub struct StepStats<S> {
    pub grad_norm: S,
    pub clipped: bool,
}

impl<S: Scalar> Optimizer<S> {
    pub fn new(cfg: OptimizerConfig, store: &ParamStore<S>) -> Self {
        let zeros: Vec<Matrix<S>> = store
            .iter()
            .map(|(_, _, value)| Matrix::zeros(value.rows(), value.cols()))
            .collect();
        Optimizer {
            cfg,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update from the store's accumulated gradients, then the
    /// caller is expected to zero them. Fails on any non-finite gradient.
    pub fn step(&mut self, store: &mut ParamStore<S>) -> Result<StepStats<S>> {
        if let Some(name) = store.find_non_finite_grad() {
            return Err(Error::NonFinite {
                what: "gradient",
                param: name.to_string(),
                step: self.step,
            });
        }
        let norm = store.grad_squared_norm().sqrt();
        let clip = S::from_f64(self.cfg.grad_clip);
        let mut clipped = false;
        if self.cfg.grad_clip > 0.0 && norm > clip {
            store.scale_grads(clip / norm);
            clipped = true;
        }
        self.step += 1;
        match self.cfg.kind {
            OptimizerKind::Adam => self.adam_update(store),
            OptimizerKind::RmsProp => self.rms_update(store),
        }
        if let Some(name) = store.find_non_finite_value() {
            return Err(Error::NonFinite {
                what: "parameter value",
                param: name.to_string(),
                step: self.step,
            });
        }
        Ok(StepStats {
            grad_norm: norm,
            clipped,
        })
    }

    fn adam_update(&mut self, store: &mut ParamStore<S>) {
        let lr = S::from_f64(self.cfg.lr);
        let b1 = S::from_f64(self.cfg.beta1);
        let b2 = S::from_f64(self.cfg.beta2);
        let eps = S::from_f64(self.cfg.adam_eps);
        let one = S::one();
        let bias1 = one - S::from_f64(self.cfg.beta1.powi(self.step as i32));
        let bias2 = one - S::from_f64(self.cfg.beta2.powi(self.step as i32));
        for idx in 0..self.m.len() {
            let id = super::params::param_id_for_index(idx);
            let g = store.grad(id).clone();
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let value = store.value_mut(id);
            for k in 0..g.len() {
                let gk = g.data()[k];
                let mk = b1 * m.data()[k] + (one - b1) * gk;
                let vk = b2 * v.data()[k] + (one - b2) * gk * gk;
                m.data_mut()[k] = mk;
                v.data_mut()[k] = vk;
                let mhat = mk / bias1;
                let vhat = vk / bias2;
                value.data_mut()[k] = value.data()[k] - lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }

    fn rms_update(&mut self, store: &mut ParamStore<S>) {
        let lr = S::from_f64(self.cfg.lr);
        let alpha = S::from_f64(self.cfg.rms_decay);
        let eps = S::from_f64(self.cfg.rms_eps);
        let one = S::one();
        for idx in 0..self.v.len() {
            let id = super::params::param_id_for_index(idx);
            let g = store.grad(id).clone();
            let v = &mut self.v[idx];
            let value = store.value_mut(id);
            for k in 0..g.len() {
                let gk = g.data()[k];
                let vk = alpha * v.data()[k] + (one - alpha) * gk * gk;
                v.data_mut()[k] = vk;
                value.data_mut()[k] = value.data()[k] - lr * gk / (vk.sqrt() + eps);
            }
        }
    }

    /// Moment buffers in parameter order, exposed for checkpointing.
    pub fn moments(&self) -> (&[Matrix<S>], &[Matrix<S>]) {
        (&self.m, &self.v)
    }

    pub fn restore_moments(&mut self, step: u64, m: Vec<Matrix<S>>, v: Vec<Matrix<S>>) {
        assert_eq!(m.len(), self.m.len(), "moment count mismatch on restore");
        assert_eq!(v.len(), self.v.len(), "moment count mismatch on restore");
        self.step = step;
        self.m = m;
        self.v = v;
    }
}
