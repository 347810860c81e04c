//! Adam with bias correction.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    /// Completed steps.
    pub t: u64,
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Starts step `t + 1`; call once before the per-parameter updates.
    pub fn tick(&mut self) {
        self.t += 1;
    }

    /// `p <- p - lr * m_hat / (sqrt(v_hat) + eps)`.
    pub fn update(&mut self, name: &str, param: &mut Tensor<T>, grad: &Tensor<T>) -> Result<()> {
        if param.shape() != grad.shape() {
            return Err(Error::shape("adam", param.shape(), grad.shape()));
        }
        if self.t == 0 {
            return Err(Error::InvalidArgument("Adam::update before tick".into()));
        }
        let c = &self.config;
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let (one_b1, one_b2) = (T::from_f64(1.0 - c.beta1), T::from_f64(1.0 - c.beta2));
        let step = T::from_f64(c.lr / (1.0 - c.beta1.powi(self.t as i32)));
        let corr2 = T::from_f64(1.0 / (1.0 - c.beta2.powi(self.t as i32)));
        let eps = T::from_f64(c.eps);
        let m = self
            .m
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(param.shape().to_vec()));
        let v = self
            .v
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(param.shape().to_vec()));
        for (((p, &g), mi), vi) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = b1 * *mi + one_b1 * g;
            *vi = b2 * *vi + one_b2 * g * g;
            *p = *p - step * *mi / ((*vi * corr2).sqrt() + eps);
        }
        Ok(())
    }

    /// Moment tensors named `adam.m.<param>` / `adam.v.<param>`.
    pub fn state_tensors(&self) -> Vec<(String, Tensor<T>)> {
        let m = self
            .m
            .iter()
            .map(|(k, t)| (format!("adam.m.{k}"), t.clone()));
        let v = self
            .v
            .iter()
            .map(|(k, t)| (format!("adam.v.{k}"), t.clone()));
        m.chain(v).collect()
    }

    /// Rebuilds the optimizer from [`Adam::state_tensors`] output.
    pub fn from_state(config: AdamConfig, t: u64, tensors: &BTreeMap<String, Tensor<T>>) -> Self {
        let pick = |prefix: &str| {
            tensors
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
                .collect()
        };
        Self {
            config,
            t,
            m: pick("adam.m."),
            v: pick("adam.v."),
        }
    }
}
