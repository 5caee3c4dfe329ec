use serde::{Deserialize, Serialize};

use crate::error::{CampError, Result};
use crate::model::CampParams;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments, one tensor per parameter in canonical order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<S> {
    pub step: u64,
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(params: &CampParams<S>) -> Self {
        let zeros: Vec<Tensor<S>> = params.named().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update. `grads` follows the canonical parameter
/// order; a `None` entry is an error.
pub fn adam_step<S: Scalar>(
    params: &mut CampParams<S>,
    grads: &[Option<Tensor<S>>],
    state: &mut AdamState<S>,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
    if grads.len() != names.len() || state.m.len() != names.len() || state.v.len() != names.len() {
        return Err(CampError::Config(format!(
            "optimizer expects {} tensors, got {} gradients and {} moments",
            names.len(),
            grads.len(),
            state.m.len()
        )));
    }
    let mut checked = Vec::with_capacity(grads.len());
    let mut shapes_ok = Ok(());
    let mut k = 0;
    params.visit(&mut |name, p| {
        match &grads[k] {
            None => {
                if shapes_ok.is_ok() {
                    shapes_ok = Err(CampError::MissingGrad(name));
                }
            }
            Some(g) if g.shape() != p.shape() || state.m[k].shape() != p.shape() => {
                if shapes_ok.is_ok() {
                    shapes_ok = Err(CampError::Shape {
                        op: "adam_step",
                        lhs: p.shape().to_vec(),
                        rhs: g.shape().to_vec(),
                    });
                }
            }
            Some(g) => checked.push(g),
        }
        k += 1;
    });
    shapes_ok?;

    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (S::lit(cfg.beta1), S::lit(cfg.beta2));
    let c1 = S::lit(1.0 - cfg.beta1.powi(t));
    let c2 = S::lit(1.0 - cfg.beta2.powi(t));
    let (lr, eps) = (S::lit(lr), S::lit(cfg.eps));
    let one = S::one();
    let mut k = 0;
    params.visit_mut(&mut |_, p| {
        let g = checked[k].data();
        let m = state.m[k].data_mut();
        let v = state.v[k].data_mut();
        for (i, x) in p.data_mut().iter_mut().enumerate() {
            m[i] = b1 * m[i] + (one - b1) * g[i];
            v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            *x -= lr * mh / (vh.sqrt() + eps);
        }
        k += 1;
    });
    Ok(())
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm<S: Scalar>(grads: &mut [Tensor<S>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = S::lit(max_norm / norm);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}
