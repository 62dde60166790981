//! SGD with (Nesterov) momentum and the polynomial learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ParamStore, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub poly_power: f64,
    /// Step budget of one training phase. The schedule always spans the
    /// phase actually being run.
    pub total_steps: usize,
    pub weight_decay: f64,
    /// Global L2 norm limit for the gradient; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr0: 0.01,
            momentum: 0.99,
            nesterov: true,
            poly_power: 0.9,
            total_steps: 300,
            weight_decay: 3e-5,
            grad_clip: Some(12.0),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 must be positive, got {}", self.lr0));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.poly_power >= 0.0 && self.poly_power.is_finite()) {
            return bad(format!("poly_power must be non-negative, got {}", self.poly_power));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return bad(format!("grad_clip must be positive, got {c}"));
            }
        }
        Ok(())
    }
}

/// `lr0 · (1 − step/total)^power`; zero once the budget is spent.
pub fn poly_lr(step: usize, total_steps: usize, lr0: f64, power: f64) -> Result<f64> {
    if step > total_steps {
        return Err(Error::InvalidConfig(format!(
            "step {step} is past the schedule end {total_steps}"
        )));
    }
    if step == total_steps {
        return Ok(0.0);
    }
    Ok(lr0 * (1.0 - step as f64 / total_steps as f64).powf(power))
}

/// Momentum buffers plus the number of updates applied.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SgdState {
    pub step: u64,
    pub velocities: ParamStore,
}

impl SgdState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One update. With `nesterov`:
/// `v ← m·v − lr·g; w ← w + m·v − lr·g`, otherwise `w ← w + v`.
/// Missing velocities start at zero.
pub fn sgd_nesterov_step(
    params: &mut ParamStore,
    grads: &ParamStore,
    state: &mut SgdState,
    lr: f64,
    momentum: f64,
    nesterov: bool,
) -> Result<()> {
    params.check_layout(grads)?;
    for (name, w) in params.iter_mut() {
        let g = grads.get(name).expect("layout checked");
        if state.velocities.get(name).is_none() {
            state.velocities.insert(name, Tensor::zeros(w.shape()));
        }
        let v = state.velocities.get_mut(name).expect("just inserted");
        if v.shape() != w.shape() {
            return Err(Error::ShapeMismatch(format!("velocity for {name} has shape {:?}", v.shape())));
        }
        for ((wi, &gi), vi) in w.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vi = momentum * *vi - lr * gi;
            *wi += if nesterov { momentum * *vi - lr * gi } else { *vi };
        }
    }
    state.step += 1;
    Ok(())
}

/// Global L2 norm over every gradient tensor.
pub fn grad_norm(grads: &ParamStore) -> f64 {
    grads
        .iter()
        .flat_map(|(_, t)| t.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Stateful optimizer applying clipping, weight decay and the schedule.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub config: OptimizerConfig,
    pub state: SgdState,
}

impl Sgd {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Sgd {
            config,
            state: SgdState::new(),
        })
    }

    /// Update with the learning rate of `step` in a schedule of `total` steps.
    /// Returns that learning rate.
    pub fn step(&mut self, params: &mut ParamStore, mut grads: ParamStore, step: usize, total: usize) -> Result<f64> {
        let c = &self.config;
        let lr = poly_lr(step, total, c.lr0, c.poly_power)?;
        if let Some(limit) = c.grad_clip {
            let norm = grad_norm(&grads);
            if norm > limit {
                let s = limit / norm;
                for (_, t) in grads.iter_mut() {
                    t.data_mut().iter_mut().for_each(|v| *v *= s);
                }
            }
        }
        if c.weight_decay > 0.0 {
            for (name, t) in grads.iter_mut() {
                if let Some(w) = params.get(name) {
                    for (g, &wi) in t.data_mut().iter_mut().zip(w.data()) {
                        *g += c.weight_decay * wi;
                    }
                }
            }
        }
        sgd_nesterov_step(params, &grads, &mut self.state, lr, c.momentum, c.nesterov)?;
        Ok(lr)
    }
}
