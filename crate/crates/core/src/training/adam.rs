use std::collections::BTreeMap;

use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments of one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
}

/// Per-parameter moments plus the shared step counter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub moments: BTreeMap<String, Moments>,
}

fn shape_check(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), TensorError> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(TensorError::Shape {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })
    }
}

/// One bias-corrected Adam update of a single tensor, given the step count
/// after increment.
pub fn adam_update(
    param: &mut Tensor,
    grad: &Tensor,
    moments: &mut Moments,
    step: u64,
    cfg: &AdamConfig,
) -> Result<(), TensorError> {
    shape_check("adam grad", param, grad)?;
    shape_check("adam first moment", param, &moments.m)?;
    shape_check("adam second moment", param, &moments.v)?;
    let c1 = 1.0 - cfg.beta1.powi(step as i32);
    let c2 = 1.0 - cfg.beta2.powi(step as i32);
    let m = moments.m.data_mut();
    let v = moments.v.data_mut();
    for (i, (p, &g)) in param.data_mut().iter_mut().zip(grad.data()).enumerate() {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        *p -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Applies one Adam step to every parameter that has a gradient. Parameters
/// without one keep their values and moments.
pub fn adam_step(
    params: &mut BTreeMap<String, Tensor>,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<(), TensorError> {
    state.step += 1;
    for (name, grad) in grads {
        let param = params.get_mut(name).ok_or_else(|| {
            TensorError::Contract(format!("gradient for unknown parameter {name}"))
        })?;
        let moments = state.moments.entry(name.clone()).or_insert_with(|| Moments {
            m: Tensor::zeros(param.shape()),
            v: Tensor::zeros(param.shape()),
        });
        adam_update(param, grad, moments, state.step, cfg)?;
    }
    Ok(())
}
