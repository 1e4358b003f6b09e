//! AdamW over the field's two parameter groups.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{ParamGradient, ParamGroup, RadianceField};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr_grid: f64,
    pub lr_mlp: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr_grid: 0.01,
            lr_mlp: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moments plus the number of completed steps.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamWState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// One decoupled-weight-decay Adam update, in place. The step counter in
/// `state` is advanced before bias correction, so the first call uses t = 1.
pub fn apply_adamw_step(
    field: &mut RadianceField,
    grad: &ParamGradient,
    state: &mut AdamWState,
    config: &AdamWConfig,
) -> Result<()> {
    let n = field.param_count();
    if grad.len() != n {
        return Err(Error::ShapeMismatch {
            expected: n,
            actual: grad.len(),
        });
    }
    if state.m.len() != n || state.v.len() != n {
        return Err(Error::ShapeMismatch {
            expected: n,
            actual: state.m.len(),
        });
    }
    let layout = *field.layout();
    if let Some(i) = grad.values.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!(
            "gradient of the {} parameter group (index {i})",
            layout.group_of(i)
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - config.beta1.powi(t);
    let bc2 = 1.0 - config.beta2.powi(t);
    for (i, p) in field.params.iter_mut().enumerate() {
        let lr = match layout.group_of(i) {
            ParamGroup::Grid => config.lr_grid,
            ParamGroup::Mlp => config.lr_mlp,
        };
        let g = grad.values[i];
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        *m = config.beta1 * *m + (1.0 - config.beta1) * g;
        *v = config.beta2 * *v + (1.0 - config.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * config.weight_decay * *p;
        *p -= lr * m_hat / (v_hat.sqrt() + config.eps);
    }
    Ok(())
}
