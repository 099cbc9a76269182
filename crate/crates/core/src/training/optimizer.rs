//! AdaDelta with global-norm clipping, decoupled weight decay and a step
//! learning-rate schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adadelta,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSpec {
    pub kind: OptimizerKind,
    pub decay_rate: f64,
    pub eps: f64,
    /// Maximum global L2 norm of the gradient.
    pub grad_clip: f64,
    pub weight_decay: f64,
    pub lr_init: f64,
    /// Fractions of the total iterations where the rate drops.
    pub milestones: Vec<f64>,
    pub milestone_factor: f64,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adadelta,
            decay_rate: 0.95,
            eps: 1e-6,
            grad_clip: 5.0,
            weight_decay: 1e-4,
            lr_init: 10.0,
            milestones: vec![0.6, 0.8],
            milestone_factor: 0.1,
        }
    }
}

impl OptimizerSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("optimizer: {m}")));
        if !(0.0..1.0).contains(&self.decay_rate) {
            return bad("decay_rate must lie in [0, 1)");
        }
        if !(self.eps > 0.0) || !(self.lr_init > 0.0) {
            return bad("eps and lr_init must be positive");
        }
        if !(self.grad_clip > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("grad_clip must be positive and weight_decay non-negative");
        }
        if !(self.milestone_factor > 0.0 && self.milestone_factor <= 1.0) {
            return bad("milestone_factor must lie in (0, 1]");
        }
        let mut prev = 0.0;
        for &m in &self.milestones {
            if !(m > prev && m < 1.0) {
                return bad("milestones must be strictly increasing inside (0, 1)");
            }
            prev = m;
        }
        Ok(())
    }

    /// Schedule multiplier at `iteration` of a `total`-iteration run.
    pub fn lr_multiplier(&self, iteration: usize, total: usize) -> f64 {
        let passed = self
            .milestones
            .iter()
            .filter(|&&m| iteration as f64 >= m * total as f64)
            .count();
        self.milestone_factor.powi(passed as i32)
    }

    pub fn lr(&self, iteration: usize, total: usize) -> f64 {
        self.lr_init * self.lr_multiplier(iteration, total)
    }

    /// Iterations at which the rate changes.
    pub fn milestone_iterations(&self, total: usize) -> Vec<usize> {
        self.milestones
            .iter()
            .map(|m| (m * total as f64).ceil() as usize)
            .collect()
    }
}

/// Running averages of squared gradients and squared updates.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub sq_grad: BTreeMap<String, Tensor>,
    pub sq_delta: BTreeMap<String, Tensor>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInfo {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
    pub lr: f64,
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads.values().map(Tensor::sq_norm).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// One update of every parameter that has a gradient. Parameters without an
/// entry in `grads` are left untouched.
pub fn step_optimizer(
    params: &mut ParamStore,
    mut grads: BTreeMap<String, Tensor>,
    spec: &OptimizerSpec,
    state: &mut OptimizerState,
    iteration: usize,
    total: usize,
) -> Result<StepInfo> {
    if let Some((name, _)) = grads.iter().find(|(_, g)| !g.all_finite()) {
        return Err(Error::Divergence {
            iteration,
            message: format!("non-finite gradient for `{name}`"),
        });
    }
    let grad_norm = clip_global_norm(&mut grads, spec.grad_clip);
    let lr = spec.lr(iteration, total);
    let rho = spec.decay_rate;
    for (name, g) in grads {
        let p = params
            .get_mut(&name)
            .ok_or_else(|| Error::Argument(format!("gradient for unknown parameter `{name}`")))?;
        let sq = state
            .sq_grad
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        let dx = state.sq_delta.entry(name).or_insert_with(|| Tensor::zeros(g.shape()));
        let decay = 1.0 - lr * spec.weight_decay;
        for (((w, &gi), s), d) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(sq.data_mut())
            .zip(dx.data_mut())
        {
            *s = rho * *s + (1.0 - rho) * gi * gi;
            let delta = ((*d + spec.eps).sqrt() / (*s + spec.eps).sqrt()) * gi;
            *d = rho * *d + (1.0 - rho) * delta * delta;
            *w = *w * decay - lr * delta;
        }
    }
    Ok(StepInfo {
        grad_norm,
        clipped: grad_norm > spec.grad_clip,
        lr,
    })
}
