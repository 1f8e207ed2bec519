//! Parameter update rules and learning-rate schedules.

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::{Scalar, Tensor};

fn check_pair<T: Scalar>(op: &'static str, p: &Tensor<T>, g: &Tensor<T>) -> Result<()> {
    if p.shape() != g.shape() {
        return Err(Error::shape(
            op,
            format!("param {:?} vs grad {:?}", p.shape(), g.shape()),
        ));
    }
    if !g.is_finite() {
        return Err(Error::NonFinite { op });
    }
    Ok(())
}

/// `p ← p − lr·g`.
pub fn sgd_step<T: Scalar>(param: &mut Tensor<T>, grad: &Tensor<T>, lr: f64) -> Result<()> {
    check_pair("sgd_step", param, grad)?;
    let lr = T::from_f64(lr);
    for (p, &g) in param.data_mut().iter_mut().zip(grad.data()) {
        *p -= lr * g;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// First and second moment estimates of one tensor.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// One AdamW update with decoupled weight decay. `t` is the 1-based step.
pub fn adamw_step<T: Scalar>(
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    state: &mut AdamState,
    cfg: &AdamWConfig,
    lr: f64,
    decay: bool,
    t: u64,
) -> Result<()> {
    check_pair("adamw_step", param, grad)?;
    if state.m.len() != param.numel() || t == 0 {
        return Err(Error::invalid("adamw state does not match parameter"));
    }
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    let wd = if decay { cfg.weight_decay } else { 0.0 };
    for (i, (p, g)) in param.data_mut().iter_mut().zip(grad.data()).enumerate() {
        let g = g.as_f64();
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let update = (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
        let pv = p.as_f64();
        *p = T::from_f64(pv - lr * (update + wd * pv));
    }
    Ok(())
}

/// AdamW over a whole [`ParamSet`]. Vectors and scalars (norm scales,
/// biases) are exempt from weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    states: Vec<AdamState>,
    decay: Vec<bool>,
    t: u64,
}

impl AdamW {
    pub fn new<T: Scalar>(params: &ParamSet<T>, cfg: AdamWConfig) -> Self {
        AdamW {
            cfg,
            states: params.iter().map(|(_, t)| AdamState::new(t.numel())).collect(),
            decay: params.iter().map(|(_, t)| t.rank() >= 2).collect(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step<T: Scalar>(&mut self, params: &mut ParamSet<T>, grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if grads.len() != self.states.len() || params.len() != self.states.len() {
            return Err(Error::invalid(format!(
                "{} grads for {} parameters",
                grads.len(),
                self.states.len()
            )));
        }
        self.t += 1;
        for (i, p) in params.tensors_mut().iter_mut().enumerate() {
            adamw_step(p, &grads[i], &mut self.states[i], &self.cfg, lr, self.decay[i], self.t)?;
        }
        Ok(())
    }
}

/// Cosine decay from `base` at step 0 to 0 at `total`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let frac = (step.min(total) as f64) / total as f64;
    0.5 * base * (1.0 + (std::f64::consts::PI * frac).cos())
}
