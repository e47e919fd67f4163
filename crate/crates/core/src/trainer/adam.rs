use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ModelParams;
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// Parameter name to flat gradient.
pub type Gradients<T = f32> = BTreeMap<String, Vec<T>>;

/// First and second moments per parameter, plus the step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimState<T = f32> {
    pub t: u64,
    pub m: BTreeMap<String, Vec<T>>,
    pub v: BTreeMap<String, Vec<T>>,
}

impl<T: Real> OptimState<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        let zeros: BTreeMap<_, _> = params.iter().map(|(k, p)| (k.clone(), vec![T::zero(); p.numel()])).collect();
        Self { t: 0, m: zeros.clone(), v: zeros }
    }
}

/// One bias-corrected Adam update, in place. Consumes the gradients.
///
/// Nothing is modified unless every parameter has a gradient of the
/// right length.
pub fn adam_step<T: Real>(
    params: &mut ModelParams<T>,
    grads: Gradients<T>,
    state: &mut OptimState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    for (name, p) in params.iter() {
        match grads.get(name) {
            Some(g) if g.len() == p.numel() => {}
            Some(g) => {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    left: p.shape().to_vec(),
                    right: vec![g.len()],
                })
            }
            None => return Err(Error::MissingGradient(name.clone())),
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let b1 = T::from_f64(cfg.beta1);
    let b2 = T::from_f64(cfg.beta2);
    let one = T::one();
    let c1 = T::from_f64(1.0 - cfg.beta1.powi(t));
    let c2 = T::from_f64(1.0 - cfg.beta2.powi(t));
    let lr = T::from_f64(cfg.lr);
    let eps = T::from_f64(cfg.eps);
    for (name, p) in params.iter_mut() {
        let g = &grads[name];
        let numel = p.numel();
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![T::zero(); numel]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![T::zero(); numel]);
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + (one - b1) * gi;
            *vi = b2 * *vi + (one - b2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
