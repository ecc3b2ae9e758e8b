use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Param, ParamKey};
use crate::scalar::Real;

/// Learning rates used across configurations.
pub const LR_PRESETS: [f64; 4] = [2e-5, 5e-4, 1e-5, 1e-4];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled; skipped for biases and layer-norm parameters.
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// The next-lower learning rate used after a divergent run.
pub fn lowered_learning_rate(lr: f64) -> f64 {
    if lr == 2e-5 {
        1e-5
    } else if lr == 5e-4 {
        1e-4
    } else {
        lr / 5.0
    }
}

#[derive(Clone, Debug)]
struct Moments<T> {
    m: Vec<T>,
    v: Vec<T>,
}

/// AdamW with bias correction:
/// `w ← w − lr·(m̂/(√v̂ + eps) + wd·w)`.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: OptimizerConfig,
    state: HashMap<ParamKey, Moments<T>>,
    t: usize,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            state: HashMap::new(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.t
    }

    /// One update of every trainable parameter that has a gradient.
    /// Elements with a cleared update mask are left untouched, moments
    /// included. A NaN gradient aborts before anything changes.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = (ParamKey, &'a mut Param<T>)>,
        lr_multiplier: f64,
    ) -> Result<()>
    where
        T: 'a,
    {
        let params: Vec<_> = params
            .into_iter()
            .filter(|(_, p)| p.trainable && p.tensor.grad().is_some())
            .collect();
        for (_, p) in &params {
            if p.tensor.grad().is_some_and(|g| g.iter().any(|v| v.is_nan())) {
                return Err(Error::Numeric(format!("NaN gradient in {}", p.name)));
            }
        }
        self.t += 1;
        let c = &self.config;
        let lr = T::lit(c.learning_rate * lr_multiplier);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let one = T::one();
        let bc1 = one - T::lit(c.beta1.powi(self.t as i32));
        let bc2 = one - T::lit(c.beta2.powi(self.t as i32));
        let eps = T::lit(c.eps);
        let wd = T::lit(c.weight_decay);
        for (key, p) in params {
            let n = p.tensor.numel();
            let st = self.state.entry(key).or_insert_with(|| Moments {
                m: vec![T::zero(); n],
                v: vec![T::zero(); n],
            });
            let decay = if p.decay { wd } else { T::zero() };
            let g = p.tensor.grad().expect("filtered above").to_vec();
            let mask = p.update_mask.clone();
            let w = p.tensor.data_mut();
            for i in 0..n {
                if mask.as_ref().is_some_and(|m| !m[i]) {
                    continue;
                }
                st.m[i] = b1 * st.m[i] + (one - b1) * g[i];
                st.v[i] = b2 * st.v[i] + (one - b2) * g[i] * g[i];
                let m_hat = st.m[i] / bc1;
                let v_hat = st.v[i] / bc2;
                w[i] = w[i] - lr * (m_hat / (v_hat.sqrt() + eps) + decay * w[i]);
            }
        }
        Ok(())
    }
}
