//! Bias-corrected Adam.

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Moment accumulators mirroring a [`ParamSet`], plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Scalar = f32> {
    pub config: AdamConfig,
    pub step: u64,
    pub first: ParamSet<T>,
    pub second: ParamSet<T>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamSet<T>, config: AdamConfig) -> Self {
        AdamState { config, step: 0, first: params.zeros_like(), second: params.zeros_like() }
    }

    /// Applies one update to `params` in place.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &ParamSet<T>) -> Result<()> {
        params.check_layout(grads, "adam_step")?;
        params.check_layout(&self.first, "adam_step")?;
        self.step += 1;
        let names: Vec<String> = params.names().map(str::to_owned).collect();
        for name in names {
            let g = grads.get(&name)?.clone();
            adam_update(params.get_mut(&name)?, &g, self.first.get_mut(&name)?, self.second.get_mut(&name)?, self.step, &self.config)?;
        }
        Ok(())
    }
}

/// One Adam update of a single tensor at (1-based) step `t`.
pub fn adam_update<T: Scalar>(
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    m: &mut Tensor<T>,
    v: &mut Tensor<T>,
    t: u64,
    cfg: &AdamConfig,
) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != m.shape() || param.shape() != v.shape() {
        return Err(Error::Shape {
            op: "adam_step",
            detail: format!("param {:?}, grad {:?}, moments {:?}/{:?}", param.shape(), grad.shape(), m.shape(), v.shape()),
        });
    }
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let c1 = T::lit(1.0 - cfg.beta1.powi(t as i32));
    let c2 = T::lit(1.0 - cfg.beta2.powi(t as i32));
    let (lr, eps) = (T::lit(cfg.lr), T::lit(cfg.eps));
    let one = T::one();
    for (((p, &g), mi), vi) in param.data_mut().iter_mut().zip(grad.data()).zip(m.data_mut().iter_mut()).zip(v.data_mut().iter_mut()) {
        *mi = b1 * *mi + (one - b1) * g;
        *vi = b2 * *vi + (one - b2) * g * g;
        let mhat = *mi / c1;
        let vhat = *vi / c2;
        *p = *p - lr * mhat / (vhat.sqrt() + eps);
    }
    Ok(())
}
