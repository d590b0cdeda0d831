//! Parameter updates: plain SGD, Adam and global-norm clipping.
//!
//! Adam keeps its moment estimates inside the [`ParamStore`] under
//! `__adam/m/<path>`, `__adam/v/<path>` and the step counter
//! `__adam/step`, so a checkpoint of the store captures optimizer state.

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

const STEP_KEY: &str = "__adam/step";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

fn matching_grad<'a>(grads: &'a ParamStore, path: &str, p: &Tensor) -> Result<&'a Tensor> {
    let g = grads
        .get(path)
        .map_err(|_| Error::Contract(format!("missing gradient for {path}")))?;
    if g.shape() != p.shape() {
        return Err(Error::shape(
            format!("gradient of {path}"),
            p.shape(),
            g.shape(),
        ));
    }
    Ok(g)
}

pub fn sgd_step(params: &ParamStore, grads: &ParamStore, lr: f32) -> Result<ParamStore> {
    let mut out = params.clone();
    for (path, p) in params.trainable() {
        let g = matching_grad(grads, path, p)?;
        let updated = p.zip_map(g, |a, b| a - lr * b)?;
        out.insert(path, updated)?;
    }
    out.version += 1;
    Ok(out)
}

pub fn adam_step(params: &ParamStore, grads: &ParamStore, cfg: &AdamConfig) -> Result<ParamStore> {
    let mut out = params.clone();
    let step = match params.get(STEP_KEY) {
        Ok(t) => t.item()? + 1.0,
        Err(_) => 1.0,
    };
    let bc1 = 1.0 - cfg.beta1.powf(step);
    let bc2 = 1.0 - cfg.beta2.powf(step);
    for (path, p) in params.trainable() {
        let g = matching_grad(grads, path, p)?;
        let mk = format!("__adam/m/{path}");
        let vk = format!("__adam/v/{path}");
        let m0 = params
            .get(&mk)
            .cloned()
            .unwrap_or_else(|_| Tensor::zeros(p.shape().to_vec()));
        let v0 = params
            .get(&vk)
            .cloned()
            .unwrap_or_else(|_| Tensor::zeros(p.shape().to_vec()));
        let m = m0.zip_map(g, |m, g| cfg.beta1 * m + (1.0 - cfg.beta1) * g)?;
        let v = v0.zip_map(g, |v, g| cfg.beta2 * v + (1.0 - cfg.beta2) * g * g)?;
        let data = p
            .data()
            .iter()
            .zip(m.data().iter().zip(v.data()))
            .map(|(&p, (&m, &v))| {
                let mh = m / bc1;
                let vh = v / bc2;
                p - cfg.lr * mh / (vh.sqrt() + cfg.eps)
            })
            .collect();
        out.insert(path, Tensor::new(p.shape().to_vec(), data)?)?;
        out.insert(mk, m)?;
        out.insert(vk, v)?;
    }
    out.insert(STEP_KEY, Tensor::scalar(step))?;
    out.version += 1;
    Ok(out)
}

/// Rescales `grads` so their global norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        let s = (max_norm / norm) as f32;
        let paths: Vec<String> = grads.trainable().map(|(k, _)| k.to_string()).collect();
        for k in paths {
            if let Some(t) = grads.get_mut(&k) {
                for v in t.data_mut() {
                    *v *= s;
                }
            }
        }
    }
    norm
}
