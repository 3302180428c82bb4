//! Loss, optimizer, learning-rate schedule, metrics and the training loop.

mod metrics;
mod trainer;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Var};

pub use metrics::{psnr, ssim, PSNR_CAP};
pub use trainer::{evaluate, restore, train_loop, EpochStats, EvalReport, EvalRow, TrainConfig, Trainer};

pub const CHARBONNIER_EPS: f64 = 1e-3;

/// Mean over elements of `sqrt((pred − gt)² + eps²)`.
///
/// Evaluated as `eps + mean(r² / (sqrt(r² + eps²) + eps))`, which is the
/// same quantity but returns `eps` exactly for a zero residual.
pub fn charbonnier<'t, S: Scalar>(pred: Var<'t, S>, gt: Var<'t, S>, eps: f64) -> Result<Var<'t, S>> {
    if !(eps > 0.0) {
        return Err(Error::Contract(format!("charbonnier eps must be positive, got {eps}")));
    }
    let (p, g) = (pred.value(), gt.value());
    if p.shape() != g.shape() {
        return Err(Error::shape(format!("charbonnier of {:?} vs {:?}", p.shape(), g.shape())));
    }
    let n = p.len();
    if n == 0 {
        return Err(Error::shape("charbonnier of empty tensors"));
    }
    let e = S::of(eps);
    let e2 = e * e;
    let excess: S = p
        .data()
        .iter()
        .zip(g.data())
        .map(|(&a, &b)| {
            let r = a - b;
            r * r / ((r * r + e2).sqrt() + e)
        })
        .sum();
    let value = crate::tensor::Tensor::scalar(e + excess / S::of(n as f64));
    pred.tape().record(&[pred, gt], value, move |ctx| {
        let scale = ctx.gout[0] / S::of(n as f64);
        let dp: Vec<S> = ctx.inputs[0]
            .data()
            .iter()
            .zip(ctx.inputs[1].data())
            .map(|(&a, &b)| {
                let r = a - b;
                scale * r / (r * r + e2).sqrt()
            })
            .collect();
        let dg = ctx.needs[1].then(|| dp.iter().map(|&v| -v).collect());
        Ok(vec![ctx.needs[0].then_some(dp), dg])
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
        }
    }
}

impl AdamHyper {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid AdamW hyperparameters {self:?}")))
        }
    }
}

/// First and second moments per parameter, in registry order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<S: Scalar = f32> {
    pub m: Vec<Vec<S>>,
    pub v: Vec<Vec<S>>,
    pub t: u64,
    pub hyper: AdamHyper,
}

impl<S: Scalar> OptimState<S> {
    pub fn new(params: &ParamStore<S>, hyper: AdamHyper) -> Self {
        let zeros = || params.iter().map(|(_, t)| vec![S::zero(); t.len()]).collect();
        OptimState {
            m: zeros(),
            v: zeros(),
            t: 0,
            hyper,
        }
    }
}

/// One decoupled-weight-decay Adam update from the gradients stored on
/// `params`. A parameter with no gradient is treated as having a zero one.
pub fn adamw_step<S: Scalar>(params: &mut ParamStore<S>, state: &mut OptimState<S>, lr: f64) -> Result<()> {
    if !(lr >= 0.0) {
        return Err(Error::Contract(format!("learning rate must be ≥ 0, got {lr}")));
    }
    if state.m.len() != params.len() {
        return Err(Error::shape(format!(
            "optimizer holds {} moments for {} parameters",
            state.m.len(),
            params.len()
        )));
    }
    for (name, p) in params.iter() {
        if let Some(g) = &p.grad {
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite gradient in {name} at index {i}")));
            }
        }
    }
    let h = state.hyper;
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (S::of(h.beta1), S::of(h.beta2));
    let c1 = S::of(1.0 - h.beta1.powi(t));
    let c2 = S::of(1.0 - h.beta2.powi(t));
    let (lr, eps, wd) = (S::of(lr), S::of(h.eps), S::of(h.weight_decay));
    for (i, (_, p)) in params.iter_mut().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        if m.len() != p.len() {
            return Err(Error::shape(format!("moment {i} has {} entries, parameter {}", m.len(), p.len())));
        }
        let grad = p.grad.take();
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            let g = grad.as_ref().map_or(S::zero(), |g| g[j]);
            m[j] = b1 * m[j] + (S::one() - b1) * g;
            v[j] = b2 * v[j] + (S::one() - b2) * g * g;
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            *w = *w - lr * (mh / (vh.sqrt() + eps) + wd * *w);
        }
        p.grad = grad;
    }
    Ok(())
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<S: Scalar>(params: &mut ParamStore<S>, max_norm: f64) -> f64 {
    let sq: f64 = params
        .iter()
        .filter_map(|(_, t)| t.grad.as_ref())
        .flat_map(|g| g.iter().map(|v| v.as_f64() * v.as_f64()))
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = S::of(max_norm / norm);
        for (_, t) in params.iter_mut() {
            if let Some(g) = &mut t.grad {
                g.iter_mut().for_each(|v| *v = *v * s);
            }
        }
    }
    norm
}

/// Constant learning rate, then linear decay to zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedule {
    pub lr0: f64,
    pub hold_epochs: u64,
    pub total_epochs: u64,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            lr0: 7e-4,
            hold_epochs: 250,
            total_epochs: 600,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if self.hold_epochs >= self.total_epochs {
            return Err(Error::config(format!(
                "hold_epochs ({}) must be below total_epochs ({})",
                self.hold_epochs, self.total_epochs
            )));
        }
        Ok(())
    }
}

pub fn lr_at(epoch: u64, s: &Schedule) -> Result<f64> {
    s.validate()?;
    if epoch > s.total_epochs {
        return Err(Error::input(format!("epoch {epoch} is past total_epochs {}", s.total_epochs)));
    }
    if epoch < s.hold_epochs {
        return Ok(s.lr0);
    }
    let frac = (epoch - s.hold_epochs) as f64 / (s.total_epochs - s.hold_epochs) as f64;
    Ok(s.lr0 * (1.0 - frac))
}
