use std::f64::consts::PI;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Scalar, Tensor};

/// Linear warmup from 0 to `base` over `warmup` steps, then cosine decay to 0
/// at `total`.
pub fn lr_at_step(base: f64, warmup: u64, total: u64, step: u64) -> Result<f64> {
    if step > total {
        return Err(Error::Contract(format!("step {step} outside schedule of {total} steps")));
    }
    if warmup >= total {
        return Err(Error::Contract(format!("warmup {warmup} must be below total {total}")));
    }
    if step < warmup {
        return Ok(base * step as f64 / warmup as f64);
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    Ok(base * 0.5 * (1.0 + (PI * progress).cos()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// Moment buffers for one parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T: Scalar> {
    pub step: u64,
    pub m: IndexMap<String, Tensor<T>>,
    pub v: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    /// Zeroed moments for every trainable tensor of `store`.
    pub fn new(store: &ParamStore<T>) -> Self {
        let mut st = OptimizerState {
            step: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        };
        for (name, p) in store.iter() {
            if !p.frozen {
                st.m.insert(name.to_string(), Tensor::zeros(p.value.shape().to_vec()));
                st.v.insert(name.to_string(), Tensor::zeros(p.value.shape().to_vec()));
            }
        }
        st
    }
}

/// Decoupled decay applies to matrices and tables only; biases, norm gains
/// and scalars are left alone.
pub fn decays(shape: &[usize]) -> bool {
    shape.len() >= 2
}

/// One AdamW update with bias correction. Frozen tensors and buffers are
/// skipped; trainable tensors without a gradient are treated as having a
/// zero gradient.
pub fn adamw_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &IndexMap<String, Tensor<T>>,
    st: &mut OptimizerState<T>,
    lr: f64,
    cfg: &AdamW,
) -> Result<()> {
    for (name, g) in grads {
        match params.param(name) {
            None => return Err(Error::Contract(format!("gradient for unknown parameter {name}"))),
            Some(p) if p.value.shape() != g.shape() => {
                return Err(Error::Contract(format!(
                    "gradient for {name} has shape {:?}, parameter {:?}",
                    g.shape(),
                    p.value.shape()
                )))
            }
            _ => {}
        }
    }
    st.step += 1;
    let t = st.step as i32;
    let (c1, c2) = (1.0 - cfg.beta1.powi(t), 1.0 - cfg.beta2.powi(t));
    for (name, p) in params.iter_mut() {
        if p.frozen {
            continue;
        }
        let shape = p.value.shape().to_vec();
        let m = st.m.entry(name.to_string()).or_insert_with(|| Tensor::zeros(shape.clone()));
        let v = st.v.entry(name.to_string()).or_insert_with(|| Tensor::zeros(shape.clone()));
        let g = grads.get(name);
        let shrink = if decays(&shape) { 1.0 - lr * cfg.weight_decay } else { 1.0 };
        let w = p.value.data_mut();
        for i in 0..w.len() {
            let gi = g.map_or(0.0, |g| g.data()[i].as_f64());
            let mi = cfg.beta1 * m.data()[i].as_f64() + (1.0 - cfg.beta1) * gi;
            let vi = cfg.beta2 * v.data()[i].as_f64() + (1.0 - cfg.beta2) * gi * gi;
            m.data_mut()[i] = T::of_f64(mi);
            v.data_mut()[i] = T::of_f64(vi);
            let step = lr * (mi / c1) / ((vi / c2).sqrt() + cfg.eps);
            w[i] = T::of_f64(w[i].as_f64() * shrink - step);
        }
    }
    Ok(())
}
