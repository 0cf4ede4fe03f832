use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};
use crate::srwm::Params;

/// Linear warmup to `peak`, then `peak * sqrt(warmup / step)`.
/// With `warmup == 0` the rate is constant.
pub fn lr_schedule(step: u64, peak: f64, warmup: u64) -> f64 {
    let step = step.max(1) as f64;
    if warmup == 0 {
        return peak;
    }
    let w = warmup as f64;
    if step <= w {
        peak * step / w
    } else {
        peak * (w / step).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments, one pair per parameter tensor in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub hyper: AdamConfig,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &Params<T>) -> Self {
        let zeros: Vec<Tensor<T>> = params.leaves().iter().map(|p| p.zeros_like()).collect();
        Adam {
            hyper: AdamConfig::default(),
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// One bias-corrected update. Gradients are checked before anything
    /// is modified, so a failed step leaves parameters and moments intact.
    pub fn step(&mut self, params: &mut Params<T>, grads: &[Tensor<T>], lr: f64) -> Result<()> {
        let names: Vec<String> = params.entries().into_iter().map(|(n, _)| n).collect();
        if grads.len() != names.len() || self.m.len() != names.len() {
            return Err(Error::Config(format!(
                "{} gradients and {} moment slots for {} parameters",
                grads.len(),
                self.m.len(),
                names.len()
            )));
        }
        for ((name, g), p) in names.iter().zip(grads).zip(params.leaves()) {
            if g.shape() != p.shape() {
                return Err(Error::Shape {
                    op: "adam",
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(name.clone()));
            }
        }
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.hyper;
        let (b1, b2, eps, lr) = (T::c(beta1), T::c(beta2), T::c(eps), T::c(lr));
        let c1 = T::one() - b1.powi(self.t as i32);
        let c2 = T::one() - b2.powi(self.t as i32);
        for (((p, g), m), v) in params.leaves_mut().into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let p = Arc::make_mut(p);
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *pi = *pi - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Scales `grads` so their joint L2 norm is at most `max_norm`; returns
/// the norm before clipping. `max_norm == 0` disables clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|g| g.squared_norm())
        .fold(T::zero(), |a, b| a + b)
        .sqrt()
        .to_f64()
        .unwrap_or(f64::NAN);
    if max_norm > 0.0 && norm > max_norm {
        let s = T::c(max_norm / norm);
        for g in grads.iter_mut() {
            g.scale_in_place(s);
        }
    }
    norm
}
