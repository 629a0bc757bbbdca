use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::mlp::Parameters;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            weight_decay: 1e-6,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter AdamW moments, aligned with [`Parameters::tensors`].
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Number of steps taken so far.
    pub t: u64,
    pub config: AdamWConfig,
}

impl OptState {
    pub fn new<P: Parameters + ?Sized>(params: &P, config: AdamWConfig) -> Self {
        let zeros: Vec<Tensor> = params
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            config,
        }
    }
}

/// One AdamW update in place. Weight decay multiplies the weights directly
/// and never enters the moment estimates.
pub fn adamw_step<P: Parameters + ?Sized>(
    params: &mut P,
    grads: &[Tensor],
    state: &mut OptState,
) -> Result<()> {
    let mut tensors = params.tensors_mut();
    if tensors.len() != grads.len() || tensors.len() != state.m.len() {
        return Err(Error::Dimension(format!(
            "{} parameters, {} gradients, {} moment slots",
            tensors.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (k, (p, g)) in tensors.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[k].shape() {
            return Err(Error::Dimension(format!(
                "parameter {k}: shape {:?}, gradient {:?}, moment {:?}",
                p.shape(),
                g.shape(),
                state.m[k].shape()
            )));
        }
    }

    let AdamWConfig {
        learning_rate: lr,
        weight_decay: wd,
        beta1: b1,
        beta2: b2,
        eps,
    } = state.config;
    state.t += 1;
    let bc1 = 1.0 - b1.powi(state.t as i32);
    let bc2 = 1.0 - b2.powi(state.t as i32);
    let decay = 1.0 - lr * wd;

    for (k, p) in tensors.iter_mut().enumerate() {
        let g = grads[k].data();
        let m = state.m[k].data_mut();
        for (mi, gi) in m.iter_mut().zip(g) {
            *mi = b1 * *mi + (1.0 - b1) * gi;
        }
        let v = state.v[k].data_mut();
        for (vi, gi) in v.iter_mut().zip(g) {
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
        }
        let (m, v) = (state.m[k].data(), state.v[k].data());
        for ((w, mi), vi) in p.data_mut().iter_mut().zip(m).zip(v) {
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            *w = *w * decay - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Loss value and gradients of `loss_fn` with respect to every tensor of
/// `params`, in parameter order.
///
/// `loss_fn` receives the graph and one [`Var`] per parameter tensor. Inputs
/// it adds with [`Graph::input`] or passes through [`Graph::stop_gradient`]
/// are treated as constants.
pub fn gradient<P, F>(params: &P, loss_fn: F) -> Result<(f64, Vec<Tensor>)>
where
    P: Parameters + ?Sized,
    F: FnOnce(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params
        .tensors()
        .into_iter()
        .map(|t| g.param(t.clone()))
        .collect();
    let loss = loss_fn(&mut g, &vars)?;
    let value = g.scalar(loss);
    if !value.is_finite() {
        return Err(Error::Numeric(format!("loss evaluated to {value}")));
    }
    let mut grads = g.backward(loss)?;
    let out = params
        .tensors()
        .iter()
        .zip(&vars)
        .map(|(t, &v)| grads.get_or_zeros(v, t))
        .collect();
    Ok((value, out))
}

/// Pairs gradients with the parameter names they belong to.
pub fn named_gradients<P: Parameters + ?Sized>(
    params: &P,
    grads: Vec<Tensor>,
) -> Vec<(String, Tensor)> {
    params
        .named_tensors()
        .into_iter()
        .map(|(n, _)| n)
        .zip(grads)
        .collect()
}
