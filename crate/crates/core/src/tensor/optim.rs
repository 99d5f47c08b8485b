use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Grads, ParamStore};
use crate::error::{contract, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip applied before the update.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            clip_norm: Some(5.0),
        }
    }
}

#[derive(Clone, Debug, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

#[derive(Clone, Debug, Default)]
pub struct AdamState {
    pub step: u64,
    /// Number of parameter updates skipped because of non-finite gradients.
    pub skipped_nonfinite: u64,
    moments: BTreeMap<String, Moments>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One Adam update of every parameter that has a gradient in `grads`.
///
/// A parameter whose gradient contains a non-finite value is left untouched
/// and counted in `state.skipped_nonfinite`.
pub fn adam_step(params: &mut ParamStore, grads: &Grads, state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    let finite = |g: &super::Tensor| g.is_finite();
    let scale = match cfg.clip_norm {
        Some(c) => {
            let sq: f64 = grads
                .values()
                .filter(|g| finite(g))
                .flat_map(|g| g.data())
                .map(|x| x * x)
                .sum();
            let norm = sq.sqrt();
            if norm > c {
                c / norm
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    for (name, g) in grads {
        let p = params
            .get_mut(name)
            .ok_or_else(|| contract(format!("adam_step: gradient for unknown parameter `{name}`")))?;
        if p.shape() != g.shape() {
            return Err(crate::Error::Shape {
                op: "adam_step",
                shapes: vec![p.shape().to_vec(), g.shape().to_vec()],
            });
        }
        if !finite(g) {
            state.skipped_nonfinite += 1;
            log::warn!("adam_step: non-finite gradient for `{name}`, update skipped");
            continue;
        }
        let mo = state.moments.entry(name.clone()).or_insert_with(|| Moments {
            m: vec![0.0; g.len()],
            v: vec![0.0; g.len()],
            t: 0,
        });
        if mo.m.len() != g.len() {
            return Err(contract(format!("adam_step: moment buffer shape mismatch for `{name}`")));
        }
        mo.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(mo.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(mo.t as i32);
        for ((w, &gr), (m, v)) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(mo.m.iter_mut().zip(mo.v.iter_mut()))
        {
            let gr = gr * scale;
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * gr;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * gr * gr;
            let mh = *m / bc1;
            let vh = *v / bc2;
            *w -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
    state.step += 1;
    Ok(())
}
