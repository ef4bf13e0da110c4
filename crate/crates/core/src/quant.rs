//! Per-layer fake quantization with a learned step size (LSQ style).
//!
//! Weights are mapped to integer codes `round(clip(w / s, q_min, q_max))`
//! and dequantized as `codes * s`. Rounding is half-to-even. The backward
//! rule is the straight-through estimator for `w` and the LSQ step-size
//! gradient, scaled by `1 / sqrt(N_w * q_max)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub bits: u32,
    pub step: f64,
}

impl QuantSpec {
    pub fn new(bits: u32, step: f64) -> Result<Self> {
        if !(2..=16).contains(&bits) {
            return Err(Error::InvalidArgument(format!("bit width {bits} outside 2..=16")));
        }
        if !(step > 0.0) || !step.is_finite() {
            return Err(Error::NonPositiveStep(step));
        }
        Ok(Self { bits, step })
    }

    pub fn q_min(&self) -> f64 {
        -((1u64 << (self.bits - 1)) as f64)
    }

    pub fn q_max(&self) -> f64 {
        ((1u64 << (self.bits - 1)) - 1) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedView {
    pub w_hat: Tensor,
    pub delta: Tensor,
    pub codes: Vec<i64>,
    pub spec: QuantSpec,
}

pub fn quantize(w: &Tensor, spec: &QuantSpec) -> Result<QuantizedView> {
    let s = spec.step;
    if !(s > 0.0) {
        return Err(Error::NonPositiveStep(s));
    }
    let (lo, hi) = (spec.q_min(), spec.q_max());
    let mut codes = Vec::with_capacity(w.len());
    let mut w_hat = Vec::with_capacity(w.len());
    let mut delta = Vec::with_capacity(w.len());
    for &v in w.data() {
        let q = (v / s).clamp(lo, hi).round_ties_even();
        codes.push(q as i64);
        let h = q * s;
        w_hat.push(h);
        delta.push(v - h);
    }
    Ok(QuantizedView {
        w_hat: Tensor::new(w.shape().to_vec(), w_hat)?,
        delta: Tensor::new(w.shape().to_vec(), delta)?,
        codes,
        spec: *spec,
    })
}

/// Dequantized weights only.
pub fn fake_quantize(w: &[f64], spec: &QuantSpec) -> Vec<f64> {
    let (lo, hi) = (spec.q_min(), spec.q_max());
    w.iter()
        .map(|&v| (v / spec.step).clamp(lo, hi).round_ties_even() * spec.step)
        .collect()
}

/// Straight-through gradients for `(w, s)` given the gradient with respect
/// to the dequantized weights. `view` must come from `quantize(w, spec)`.
pub fn ste_backward(
    upstream: &Tensor,
    w: &Tensor,
    spec: &QuantSpec,
    view: Option<&QuantizedView>,
) -> Result<(Tensor, f64)> {
    let view = view.ok_or(Error::QuantizeNotEvaluated)?;
    if view.spec != *spec || view.codes.len() != w.len() {
        return Err(Error::QuantizeNotEvaluated);
    }
    if upstream.shape() != w.shape() {
        return Err(Error::InvalidShape(format!(
            "upstream {:?} vs weights {:?}",
            upstream.shape(),
            w.shape()
        )));
    }
    let (grad_w, grad_s) = ste_grads(upstream.data(), w.data(), spec);
    Ok((Tensor::new(w.shape().to_vec(), grad_w)?, grad_s))
}

pub(crate) fn ste_grads(upstream: &[f64], w: &[f64], spec: &QuantSpec) -> (Vec<f64>, f64) {
    let (lo, hi) = (spec.q_min(), spec.q_max());
    let scale = 1.0 / (w.len() as f64 * hi).sqrt();
    let mut grad_w = Vec::with_capacity(w.len());
    let mut grad_s = 0.0;
    for (&g, &v) in upstream.iter().zip(w) {
        let r = v / spec.step;
        let ds = if r < lo {
            grad_w.push(0.0);
            lo
        } else if r > hi {
            grad_w.push(0.0);
            hi
        } else {
            grad_w.push(g);
            r.round_ties_even() - r
        };
        grad_s += ds * g;
    }
    (grad_w, grad_s * scale)
}

/// LSQ initial step: `2 mean(|w|) / sqrt(q_max)`, or `1e-3` for all-zero weights.
pub fn init_step(w: &[f64], bits: u32) -> f64 {
    if w.is_empty() {
        return 1e-3;
    }
    let q_max = ((1u64 << (bits - 1)) - 1) as f64;
    let mean_abs = w.iter().fold(0.0, |s, v| s + v.abs()) / w.len() as f64;
    if mean_abs == 0.0 {
        1e-3
    } else {
        2.0 * mean_abs / q_max.sqrt()
    }
}
