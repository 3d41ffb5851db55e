//! Resilient backpropagation (iRprop−).
//!
//! Each weight keeps its own step size. A gradient whose sign matches the
//! previous one grows the step by `eta_plus`; a sign flip shrinks it by
//! `eta_minus` and suppresses the update for that weight (the stored
//! gradient is zeroed, so the next iteration neither grows nor shrinks).
//! Weights move by `-sign(grad) * step`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Gradients, Network};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RpropConfig {
    /// Backtracking factor.
    pub eta_minus: f64,
    /// Acceleration factor.
    pub eta_plus: f64,
    pub step_min: f64,
    pub step_max: f64,
    pub initial_step: f64,
    pub iterations: usize,
    pub batch_size: usize,
}

impl Default for RpropConfig {
    fn default() -> Self {
        Self {
            eta_minus: 0.5,
            eta_plus: 1.5,
            step_min: 1e-7,
            step_max: 1e-1,
            initial_step: 1e-3,
            iterations: 5000,
            batch_size: 1000,
        }
    }
}

impl RpropConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.eta_minus && self.eta_minus < 1.0 && 1.0 < self.eta_plus) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < eta_minus < 1 < eta_plus, got {} and {}",
                self.eta_minus, self.eta_plus
            )));
        }
        if !(0.0 < self.step_min && self.step_min < self.step_max) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < step_min < step_max, got {} and {}",
                self.step_min, self.step_max
            )));
        }
        if self.initial_step.is_nan() || self.initial_step <= 0.0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "initial step and batch size must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RpropState {
    steps: Vec<Vec<f64>>,
    prev: Vec<Vec<f64>>,
}

impl RpropState {
    pub fn new(net: &Network, cfg: &RpropConfig) -> Self {
        let init = cfg.initial_step.clamp(cfg.step_min, cfg.step_max);
        Self {
            steps: net.layers().iter().map(|l| vec![init; l.weights().len()]).collect(),
            prev: net.layers().iter().map(|l| vec![0.0; l.weights().len()]).collect(),
        }
    }

    pub fn steps(&self) -> &[Vec<f64>] {
        &self.steps
    }
}

/// One iRprop− update of `net` in place.
pub fn rprop_step(state: &mut RpropState, grads: &Gradients, net: &mut Network, cfg: &RpropConfig) -> Result<()> {
    grads.check_congruent(net)?;
    if !grads.is_finite() {
        return Err(Error::Numeric("non-finite gradient in Rprop update".into()));
    }
    for (l, layer) in net.layers_mut().iter_mut().enumerate() {
        let steps = &mut state.steps[l];
        let prev = &mut state.prev[l];
        for (((w, &g), step), p) in layer
            .weights_mut()
            .iter_mut()
            .zip(grads.layer(l))
            .zip(steps.iter_mut())
            .zip(prev.iter_mut())
        {
            let trend = g * *p;
            if trend > 0.0 {
                *step = (*step * cfg.eta_plus).min(cfg.step_max);
            } else if trend < 0.0 {
                *step = (*step * cfg.eta_minus).max(cfg.step_min);
                *p = 0.0;
                continue;
            }
            if g > 0.0 {
                *w -= *step;
            } else if g < 0.0 {
                *w += *step;
            }
            *p = g;
            debug_assert!(*step >= cfg.step_min && *step <= cfg.step_max);
        }
    }
    Ok(())
}
