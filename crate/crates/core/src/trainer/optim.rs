use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numgrad::{Gradients, ParamStore};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

/// Per-parameter largest absolute change made by one optimizer step.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepDelta {
    pub value: f64,
    pub m: f64,
    pub v: f64,
}

/// One Adam update. Only parameters the loss reached are touched (their
/// moments and step counts included), so branches outside the routed group
/// keep their state exactly. Updated values are rounded to `f32`.
pub fn adam_step<T: Scalar>(store: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64, cfg: &AdamConfig) -> Vec<StepDelta> {
    let (b1, b2, eps) = (T::lit(cfg.beta1), T::lit(cfg.beta2), T::lit(cfg.eps));
    let lr = T::lit(lr);
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    let mut deltas = vec![StepDelta::default(); ids.len()];
    for id in ids {
        if !grads.reached(id) {
            continue;
        }
        let g = grads.get(id).data();
        let p = store.get_mut(id);
        p.steps += 1;
        let c1 = T::one() - b1.powi(p.steps.min(i32::MAX as u64) as i32);
        let c2 = T::one() - b2.powi(p.steps.min(i32::MAX as u64) as i32);
        let d = &mut deltas[id.0];
        let (m, v, val) = (p.m.data_mut(), p.v.data_mut(), p.value.data_mut());
        for k in 0..g.len() {
            let nm = b1 * m[k] + (T::one() - b1) * g[k];
            let nv = b2 * v[k] + (T::one() - b2) * g[k] * g[k];
            d.m = d.m.max((nm - m[k]).abs().as_f64());
            d.v = d.v.max((nv - v[k]).abs().as_f64());
            m[k] = nm;
            v[k] = nv;
            let upd = lr * (nm / c1) / ((nv / c2).sqrt() + eps);
            let nval = T::lit((val[k] - upd).as_f64() as f32 as f64);
            d.value = d.value.max((nval - val[k]).abs().as_f64());
            val[k] = nval;
        }
    }
    deltas
}

/// Triangular wave from `lr_min` (step 0) up to `lr_max` (step `cycle/2`)
/// and back, with period `cycle` steps.
pub fn cyclic_lr(step: usize, lr_min: f64, lr_max: f64, cycle: usize) -> f64 {
    let cycle = cycle.max(1);
    let pos = (step % cycle) as f64 / cycle as f64;
    lr_min + (lr_max - lr_min) * (1.0 - (2.0 * pos - 1.0).abs())
}
