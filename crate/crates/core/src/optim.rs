//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one buffer pair per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn for_params(params: &ParamStore) -> Self {
        let zeros = || params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Records under which the state is stored in a checkpoint.
    pub fn to_records(&self, params: &ParamStore) -> Vec<(String, Tensor)> {
        let mut out = vec![("adam/step".to_string(), Tensor::scalar(self.step as f64))];
        for (((name, t), m), v) in params.iter().zip(&self.m).zip(&self.v) {
            out.push((
                format!("adam/m/{name}"),
                Tensor::from_parts(t.shape().to_vec(), m.clone()),
            ));
            out.push((
                format!("adam/v/{name}"),
                Tensor::from_parts(t.shape().to_vec(), v.clone()),
            ));
        }
        out
    }

    pub fn from_records(params: &ParamStore, records: &[(String, Tensor)]) -> Result<Self> {
        let find = |key: &str| {
            records
                .iter()
                .find(|(n, _)| n == key)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Format(format!("missing optimizer record {key}")))
        };
        let mut state = Self::for_params(params);
        state.step = find("adam/step")?.item()? as u64;
        for (i, (name, t)) in params.iter().enumerate() {
            let m = find(&format!("adam/m/{name}"))?;
            let v = find(&format!("adam/v/{name}"))?;
            if m.shape() != t.shape() || v.shape() != t.shape() {
                return Err(Error::Format(format!("optimizer state shape for {name}")));
            }
            state.m[i] = m.data().to_vec();
            state.v[i] = v.data().to_vec();
        }
        Ok(state)
    }
}

/// One Adam update of a single parameter buffer at (1-based) step `t`.
pub fn adam_update(
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    cfg: &AdamConfig,
) {
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        param[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
    }
}

/// Applies one Adam step to every parameter with a gradient. Parameters
/// whose gradient contains NaN/Inf are left untouched; their names are
/// returned.
pub fn adam_step(
    params: &mut ParamStore,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<Vec<String>> {
    if state.m.len() != params.len() {
        return Err(Error::Contract(format!(
            "optimizer state for {} parameters, model has {}",
            state.m.len(),
            params.len()
        )));
    }
    state.step += 1;
    let mut skipped = Vec::new();
    for (i, (name, t)) in params.tensors_mut().enumerate() {
        let Some(grad) = t.grad().map(<[f64]>::to_vec) else {
            continue;
        };
        if grad.iter().any(|g| !g.is_finite()) {
            log::warn!("skipping update of {name}: non-finite gradient");
            skipped.push(name.to_string());
            continue;
        }
        adam_update(t.data_mut(), &grad, &mut state.m[i], &mut state.v[i], state.step, cfg);
    }
    Ok(skipped)
}
