use super::config::OptimConfig;
use crate::error::{Error, Result};
use crate::tensor::{Gradients, ParamStore, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamHyper {
    pub fn from_config(o: &OptimConfig, lr: f64) -> Self {
        AdamHyper {
            lr,
            weight_decay: o.weight_decay,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
        }
    }
}

/// First and second moments per parameter and the number of updates taken.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Real = f32> {
    pub t: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros: Vec<Tensor<T>> = params.iter().map(|(_, _, v)| Tensor::zeros(v.shape())).collect();
        AdamState {
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One AdamW update with bias correction; weight decay is applied to the
/// parameter directly, apart from the adaptive step. Nothing is modified if
/// any gradient is non-finite.
pub fn adamw_step<T: Real>(params: &mut ParamStore<T>, grads: &Gradients<T>, state: &mut AdamState<T>, h: &AdamHyper) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::Contract("parameter, gradient and moment counts differ".into()));
    }
    let ids: Vec<_> = params.ids().collect();
    for &id in &ids {
        let shape = params.value(id).shape();
        if grads.get(id).shape() != shape || state.m[id.index()].shape() != shape || state.v[id.index()].shape() != shape {
            return Err(Error::Dimension {
                op: "adamw_step",
                lhs: shape.to_vec(),
                rhs: grads.get(id).shape().to_vec(),
            });
        }
    }
    if !grads.is_finite() {
        return Err(Error::NonFinite("adamw_step gradient"));
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - h.beta1.powi(t);
    let c2 = 1.0 - h.beta2.powi(t);
    let decay = 1.0 - h.lr * h.weight_decay;
    for &id in &ids {
        let g = grads.get(id).data();
        let m = state.m[id.index()].data_mut();
        let v = state.v[id.index()].data_mut();
        let p = params.value_mut(id).data_mut();
        for i in 0..p.len() {
            let gi = g[i].f64();
            let mi = h.beta1 * m[i].f64() + (1.0 - h.beta1) * gi;
            let vi = h.beta2 * v[i].f64() + (1.0 - h.beta2) * gi * gi;
            m[i] = T::cast(mi);
            v[i] = T::cast(vi);
            let step = h.lr * (mi / c1) / ((vi / c2).sqrt() + h.eps);
            p[i] = T::cast(p[i].f64() * decay - step);
        }
    }
    Ok(())
}

/// Base rate divided by ten for every drop fraction already passed.
pub fn lr_at(step: usize, cfg: &OptimConfig) -> f64 {
    let total = cfg.total_steps as f64;
    let passed = cfg.drops.iter().filter(|&&d| step as f64 >= d * total).count();
    cfg.lr * 10f64.powi(-(passed as i32))
}

/// Rescales gradients so their global norm is at most `max_norm`.
pub fn clip_grad_norm<T: Real>(grads: &mut Gradients<T>, params: &ParamStore<T>, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if max_norm > 0.0 && norm > max_norm {
        let s = T::cast(max_norm / (norm + 1e-6));
        for id in params.ids() {
            for x in grads.get_mut(id).data_mut() {
                *x *= s;
            }
        }
    }
    norm
}
