use std::collections::BTreeMap;

use super::{NumError, ParamId, ParamSet, Tensor};

pub const DEFAULT_MOMENTUM: f64 = 0.9;
pub const DEFAULT_WEIGHT_DECAY: f64 = 0.0005;

/// Nesterov SGD state. `velocity` is created lazily to mirror the parameter shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub velocity: Vec<Tensor>,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerState {
    fn default() -> Self {
        Self {
            velocity: Vec::new(),
            momentum: DEFAULT_MOMENTUM,
            weight_decay: DEFAULT_WEIGHT_DECAY,
        }
    }
}

impl OptimizerState {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            velocity: Vec::new(),
            momentum,
            weight_decay,
        }
    }
}

/// One Nesterov step with decoupled-in-gradient weight decay:
/// `d = g + wd*p; v = m*v - lr*d; p += m*v - lr*d`.
pub fn sgd_nesterov_step(
    params: &mut ParamSet,
    grads: &BTreeMap<ParamId, Tensor>,
    lr: f64,
    state: &mut OptimizerState,
) -> Result<(), NumError> {
    if lr <= 0.0 || !lr.is_finite() {
        return Err(NumError::InvalidArgument(format!(
            "learning rate must be positive, got {lr}"
        )));
    }
    if state.velocity.is_empty() {
        state.velocity = params
            .iter()
            .map(|(_, _, t)| Tensor::zeros(t.shape()))
            .collect();
    }
    if state.velocity.len() != params.len() {
        return Err(NumError::InvalidArgument(
            "optimizer velocity does not mirror parameters".into(),
        ));
    }
    let (m, wd) = (state.momentum, state.weight_decay);
    for id in params.ids().collect::<Vec<_>>() {
        let p = params.get_mut(id);
        let v = &mut state.velocity[id.0];
        if v.shape() != p.shape() {
            return Err(NumError::ShapeMismatch {
                op: "sgd_nesterov_step",
                expected: p.shape().to_vec(),
                got: v.shape().to_vec(),
            });
        }
        let g = grads.get(&id);
        if let Some(g) = g {
            if g.shape() != p.shape() {
                return Err(NumError::ShapeMismatch {
                    op: "sgd_nesterov_step",
                    expected: p.shape().to_vec(),
                    got: g.shape().to_vec(),
                });
            }
        }
        for (i, (pv, vv)) in p.data_mut().iter_mut().zip(v.data_mut()).enumerate() {
            let gi = g.map_or(0.0, |g| g.data()[i]);
            let d = gi + wd * *pv;
            *vv = m * *vv - lr * d;
            *pv += m * *vv - lr * d;
        }
    }
    Ok(())
}
