use crate::error::{shape_err, Result};
use crate::tensor::{Element, Tensor};

/// Adam moment buffers and hyperparameters.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub learning_rate: f64,
}

impl<T: Element> AdamState<T> {
    /// Zeroed moments matching `params`, with the usual defaults
    /// (beta1 = 0.9, beta2 = 0.999, epsilon = 1e-8).
    pub fn new(params: &[Tensor<T>], learning_rate: f64) -> Self {
        Self {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step_count: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            learning_rate,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step<T: Element>(params: &mut [Tensor<T>], grads: &[Tensor<T>], state: &mut AdamState<T>) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(shape_err(
            "adam_step",
            format!(
                "{} params, {} grads, {} moments",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(shape_err(
                "adam_step",
                format!("param {i}: {:?} vs grad {:?}", p.shape(), g.shape()),
            ));
        }
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    let lr = state.learning_rate;
    let eps = state.epsilon;
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let pd = p.data_mut();
        let md = m.data_mut();
        let vd = v.data_mut();
        for (j, gj) in g.data().iter().enumerate() {
            let gj = gj.as_f64();
            let mj = b1 * md[j].as_f64() + (1.0 - b1) * gj;
            let vj = b2 * vd[j].as_f64() + (1.0 - b2) * gj * gj;
            md[j] = T::of(mj);
            vd[j] = T::of(vj);
            let step = lr * (mj / bc1) / ((vj / bc2).sqrt() + eps);
            pd[j] = T::of(pd[j].as_f64() - step);
        }
    }
    Ok(())
}
