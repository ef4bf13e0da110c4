//! Weight-noise samplers and the projected gradient-ascent search for
//! worst-case perturbations inside a box.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::Evaluator;

/// `n` draws from `U[-half, half]`.
pub fn uniform(rng: &mut impl Rng, n: usize, half: f64) -> Vec<f64> {
    if half == 0.0 {
        return vec![0.0; n];
    }
    (0..n).map(|_| rng.random_range(-half..=half)).collect()
}

pub fn standard_normal(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Per-coordinate perturbation scale: `budget` or `budget * (|w_i| + eps)`.
pub fn coordinate_scales(w: &[f64], budget: f64, magnitude_aware: bool, eps: f64) -> Vec<f64> {
    if magnitude_aware {
        w.iter().map(|v| budget * (v.abs() + eps)).collect()
    } else {
        vec![budget; w.len()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AscentConfig {
    pub steps: usize,
    pub lr: f64,
}

impl Default for AscentConfig {
    fn default() -> Self {
        Self { steps: 20, lr: 1e-4 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AscentResult {
    pub u: Vec<f64>,
    /// Loss at the start point followed by the loss after every step.
    pub losses: Vec<f64>,
}

/// Maximize `L(w + u)` over `|u_i| <= bounds_i` by projected gradient ascent
/// starting from `u0`. A step that would lower the loss is rejected and the
/// learning rate halved, so the recorded losses never decrease.
pub fn projected_ascent(
    eval: &impl Evaluator,
    bounds: &[f64],
    u0: Vec<f64>,
    cfg: &AscentConfig,
) -> Result<AscentResult> {
    let w = eval.center();
    if bounds.len() != w.len() || u0.len() != w.len() {
        return Err(Error::InvalidArgument("ascent dimensions disagree".into()));
    }
    let point = |u: &[f64]| -> Vec<f64> { w.iter().zip(u).map(|(a, b)| a + b).collect() };
    let mut u: Vec<f64> = u0
        .iter()
        .zip(bounds)
        .map(|(v, b)| v.clamp(-b, *b))
        .collect();
    let (mut loss, mut grad) = loss_grad_or_inf(eval, &point(&u))?;
    let mut losses = vec![loss];
    let mut lr = cfg.lr;
    for _ in 0..cfg.steps {
        if !loss.is_finite() {
            losses.push(loss);
            continue;
        }
        let cand: Vec<f64> = u
            .iter()
            .zip(&grad)
            .zip(bounds)
            .map(|((v, g), b)| (v + lr * g).clamp(-b, *b))
            .collect();
        let (l, g) = loss_grad_or_inf(eval, &point(&cand))?;
        if l >= loss {
            u = cand;
            loss = l;
            grad = g;
        } else {
            lr *= 0.5;
        }
        losses.push(loss);
    }
    Ok(AscentResult { u, losses })
}

fn loss_grad_or_inf(eval: &impl Evaluator, w: &[f64]) -> Result<(f64, Vec<f64>)> {
    match eval.loss_grad(w) {
        Ok(r) => Ok(r),
        Err(Error::NonFinite { .. }) => Ok((f64::INFINITY, vec![0.0; w.len()])),
        Err(e) => Err(e),
    }
}

/// Mean and standard error (sample std / sqrt(n)), accumulated in order.
pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().fold(0.0, |s, v| s + v) / n;
    if values.len() < 2 || !mean.is_finite() {
        return (mean, 0.0);
    }
    let var = values.iter().fold(0.0, |s, v| s + (v - mean) * (v - mean)) / (n - 1.0);
    (mean, (var / n).sqrt())
}
