use crate::error::{Error, Result};
use crate::network::{Gradients, ParamStore, Tensor};

/// Momentum buffers, one per parameter tensor, zero-initialized.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub velocities: Vec<Tensor<f32>>,
}

impl OptimizerState {
    pub fn new(params: &ParamStore<f32>) -> Self {
        Self {
            velocities: params
                .entries()
                .iter()
                .map(|e| Tensor::zeros(e.value.shape()))
                .collect(),
        }
    }
}

/// `v <- momentum * v + g; w <- w - rate * v` for every trainable tensor.
pub fn sgd_step(
    params: &mut ParamStore<f32>,
    grads: &Gradients<f32>,
    state: &mut OptimizerState,
    rate: f64,
    momentum: f64,
) -> Result<()> {
    if grads.len() != params.len() || state.velocities.len() != params.len() {
        return Err(Error::Shape(format!(
            "{} parameters, {} gradients, {} velocities",
            params.len(),
            grads.len(),
            state.velocities.len()
        )));
    }
    let (rate, momentum) = (rate as f32, momentum as f32);
    for id in 0..params.len() {
        if !params.kind(id).is_trainable() {
            continue;
        }
        let g = grads.get(id);
        let v = &mut state.velocities[id];
        g.check_same_shape(v)?;
        g.check_same_shape(params.value(id))?;
        for (v, &g) in v.data_mut().iter_mut().zip(g.data()) {
            *v = momentum * *v + g;
        }
        for (w, &v) in params.value_mut(id).data_mut().iter_mut().zip(v.data()) {
            *w -= rate * v;
        }
    }
    Ok(())
}

/// Step schedule: `initial / 2^floor(epoch / period)` for `epoch < epochs`.
pub fn step_decay(initial: f64, period: usize, epochs: usize, epoch: usize) -> Result<f64> {
    if epoch >= epochs {
        return Err(Error::Argument(format!(
            "epoch {epoch} outside a {epochs}-epoch schedule"
        )));
    }
    Ok(initial / 2f64.powi((epoch / period) as i32))
}
