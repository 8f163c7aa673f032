use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::decays;
use crate::numerics::{ParamStore, Real, Tensor};

/// Warmup-then-cosine learning rate for update `step` of `steps`.
///
/// Rises linearly from 0 at step 0 to `lr_peak` at `warmup_steps`, then
/// follows a half cosine down to `lr_peak * lr_floor_ratio` at `steps`.
pub fn lr_at(step: u64, steps: u64, warmup_steps: u64, lr_peak: f64, lr_floor_ratio: f64) -> Result<f64> {
    if step > steps {
        return Err(Error::Argument(format!("step {step} beyond schedule end {steps}")));
    }
    if step < warmup_steps {
        return Ok(lr_peak * step as f64 / warmup_steps as f64);
    }
    if steps == warmup_steps {
        return Ok(lr_peak);
    }
    let progress = (step - warmup_steps) as f64 / (steps - warmup_steps) as f64;
    let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    Ok(lr_peak * (lr_floor_ratio + (1.0 - lr_floor_ratio) * cosine))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

/// First and second moments per parameter plus the number of updates taken.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<T: Real = f32> {
    pub m: ParamStore<T>,
    pub v: ParamStore<T>,
    pub step: u64,
}

impl<T: Real> OptimState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let mut m = ParamStore::new();
        let mut v = ParamStore::new();
        for (name, p) in params.iter() {
            m.insert(name, Tensor::zeros(p.shape().to_vec())).expect("names are unique");
            v.insert(name, Tensor::zeros(p.shape().to_vec())).expect("names are unique");
        }
        Self { m, v, step: 0 }
    }
}

pub type Grads<T> = BTreeMap<String, Vec<T>>;

/// Global L2 norm over all gradients.
pub fn grad_norm<T: Real>(grads: &Grads<T>) -> f64 {
    grads
        .values()
        .flat_map(|g| g.iter())
        .map(|x| x.as_f64() * x.as_f64())
        .sum::<f64>()
        .sqrt()
}

/// One decoupled-weight-decay Adam step with bias correction.
///
/// Parameters without an entry in `grads` are treated as having zero
/// gradient. Decay (`p *= 1 - lr·wd`) is skipped for names exempted by
/// [`decays`]. Non-finite gradients abort before anything is modified.
pub fn adamw_update<T: Real>(
    params: &mut ParamStore<T>,
    grads: &Grads<T>,
    state: &mut OptimState<T>,
    lr: f64,
    hp: &AdamW,
) -> Result<()> {
    for (name, g) in grads {
        let p = params.get(name)?;
        if g.len() != p.numel() {
            return Err(Error::dim("adamw", format!("gradient for {name} has {} of {} entries", g.len(), p.numel())));
        }
        if let Some(i) = g.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                op: "adamw gradient",
                index: i,
                value: g[i].as_f64(),
            });
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - hp.beta1.powf(t);
    let bc2 = 1.0 - hp.beta2.powf(t);
    let (b1, b2) = (T::lit(hp.beta1), T::lit(hp.beta2));
    let (ob1, ob2) = (T::lit(1.0 - hp.beta1), T::lit(1.0 - hp.beta2));
    let (ibc1, ibc2) = (T::lit(1.0 / bc1), T::lit(1.0 / bc2));
    let lr_t = T::lit(lr);
    let eps = T::lit(hp.eps);
    for (name, p) in params.iter_mut() {
        let shrink = if decays(name) {
            T::lit(1.0 - lr * hp.weight_decay)
        } else {
            T::one()
        };
        let m = state.m.get_mut(name)?.data_mut();
        let v = state.v.get_mut(name)?.data_mut();
        let g = grads.get(name);
        for (i, w) in p.data_mut().iter_mut().enumerate() {
            let gi = g.map_or(T::zero(), |g| g[i]);
            m[i] = b1 * m[i] + ob1 * gi;
            v[i] = b2 * v[i] + ob2 * gi * gi;
            let mhat = m[i] * ibc1;
            let vhat = v[i] * ibc2;
            *w = *w * shrink - lr_t * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Scales all gradients so their global norm is at most `max_norm`.
pub fn clip_grads<T: Real>(grads: &mut Grads<T>, max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let s = T::lit(max_norm / norm);
        grads.values_mut().flat_map(|g| g.iter_mut()).for_each(|x| *x *= s);
    }
    norm
}
