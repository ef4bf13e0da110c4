//! Monte-Carlo studies of weight noise.
//!
//! Under MSE, adding zero-mean noise `D` to the weights changes the loss to
//! `L~ = L + E[(D . grad_w yhat)^2] + E[2 (yhat - y)(D . grad_w yhat)]` to
//! first order; the last term vanishes in expectation. [`identity_check`]
//! estimates all four quantities from the same noise draws so that their
//! difference has low variance.
//!
//! Every draw `i` uses the generator `rng_for(seed, i)` and results are
//! reduced in draw order, so estimates do not depend on the thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Task};
use crate::error::{Error, Result};
use crate::eval::{output_jacobian, Evaluator, NetEvaluator};
use crate::model::{LossKind, ModelState, Which};
use crate::perturb::{self, mean_se, AscentConfig};
use crate::rng::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    /// `U[-scale, scale]` per coordinate (`scale` is half a bin width).
    UniformBin,
    /// `N(0, scale^2)` per coordinate.
    Gaussian,
    /// Worst case in the box `|u_i| <= scale`, found by projected ascent
    /// from a uniform start.
    Adversarial,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseBudget {
    pub kind: NoiseKind,
    pub scale: f64,
    pub draws: usize,
    pub seed: u64,
}

impl NoiseBudget {
    pub fn new(kind: NoiseKind, scale: f64, draws: usize, seed: u64) -> Result<Self> {
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::InvalidBudget(format!("scale must be positive, got {scale}")));
        }
        if draws == 0 {
            return Err(Error::InvalidBudget("draws must be at least 1".into()));
        }
        Ok(Self {
            kind,
            scale,
            draws,
            seed,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub std_err: f64,
    pub draws: usize,
    /// Draws whose loss was non-finite; they count as `+inf`.
    pub non_finite: usize,
}

impl McEstimate {
    fn from_values(values: &[f64]) -> Self {
        let non_finite = values.iter().filter(|v| !v.is_finite()).count();
        let (mean, std_err) = if non_finite > 0 {
            (f64::INFINITY, f64::INFINITY)
        } else {
            mean_se(values)
        };
        Self {
            mean,
            std_err,
            draws: values.len(),
            non_finite,
        }
    }
}

fn loss_or_inf(eval: &impl Evaluator, w: &[f64]) -> Result<f64> {
    match eval.loss(w) {
        Ok(l) if l.is_finite() => Ok(l),
        Ok(_) | Err(Error::NonFinite { .. }) => Ok(f64::INFINITY),
        Err(e) => Err(e),
    }
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// Sampled perturbation for draw `i` of `budget`.
pub fn draw_noise(eval: &impl Evaluator, budget: &NoiseBudget, i: usize) -> Result<Vec<f64>> {
    let n = eval.center().len();
    let mut rng = rng_for(budget.seed, i as u64);
    Ok(match budget.kind {
        NoiseKind::UniformBin => perturb::uniform(&mut rng, n, budget.scale),
        NoiseKind::Gaussian => perturb::standard_normal(&mut rng, n)
            .into_iter()
            .map(|z| z * budget.scale)
            .collect(),
        NoiseKind::Adversarial => {
            let u0 = perturb::uniform(&mut rng, n, budget.scale);
            let bounds = vec![budget.scale; n];
            perturb::projected_ascent(eval, &bounds, u0, &AscentConfig::default())?.u
        }
    })
}

/// Mean loss under weight noise, with its standard error.
pub fn perturb_eval(eval: &impl Evaluator, budget: &NoiseBudget) -> Result<McEstimate> {
    let center = eval.center();
    let losses = (0..budget.draws)
        .into_par_iter()
        .map(|i| {
            let u = draw_noise(eval, budget, i)?;
            loss_or_inf(eval, &add(center, &u))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(McEstimate::from_values(&losses))
}

fn require_mse(data: &Dataset, loss: LossKind) -> Result<()> {
    if loss != LossKind::Mse {
        return Err(Error::NotMse(format!("got {loss:?}")));
    }
    if data.task != Task::Regression {
        return Err(Error::NotMse("dataset is a classification task".into()));
    }
    Ok(())
}

struct DrawTerms {
    perturbed: f64,
    reg: f64,
    cross: f64,
}

/// Evaluate the per-draw terms with noise `U[-half, half]`.
fn draw_terms(
    ev: &NetEvaluator<'_>,
    jac: &[Vec<f64>],
    residuals: &[f64],
    n: f64,
    half: f64,
    seed: u64,
    i: usize,
    with_loss: bool,
) -> Result<DrawTerms> {
    let delta = perturb::uniform(&mut rng_for(seed, i as u64), ev.center().len(), half);
    let mut reg = 0.0;
    let mut cross = 0.0;
    for (row, r) in jac.iter().zip(residuals) {
        let proj = row.iter().zip(&delta).fold(0.0, |s, (g, d)| s + g * d);
        reg += proj * proj;
        cross += 2.0 * r * proj;
    }
    let perturbed = if with_loss {
        loss_or_inf(ev, &add(ev.center(), &delta))?
    } else {
        f64::NAN
    };
    Ok(DrawTerms {
        perturbed,
        reg: reg / n,
        cross: cross / n,
    })
}

fn prepare<'a>(model: &'a ModelState, data: &'a Dataset) -> Result<(NetEvaluator<'a>, Vec<Vec<f64>>, Vec<f64>)> {
    let ev = NetEvaluator::new(model, data)?;
    let (jac, preds) = output_jacobian(model, data, ev.center())?;
    let residuals = preds.iter().zip(data.y.data()).map(|(p, y)| p - y).collect();
    Ok((ev, jac, residuals))
}

/// Monte-Carlo estimate of `E ||D^T grad_w yhat||^2` over the data and
/// `D ~ U[-half_width, half_width]`, with its standard error over draws.
pub fn regularizer_estimate(
    model: &ModelState,
    data: &Dataset,
    loss: LossKind,
    half_width: f64,
    draws: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    require_mse(data, loss)?;
    if draws == 0 || !(half_width >= 0.0) {
        return Err(Error::InvalidBudget("need draws >= 1 and half width >= 0".into()));
    }
    let (ev, jac, residuals) = prepare(model, data)?;
    let n = data.len() as f64;
    let regs = (0..draws)
        .into_par_iter()
        .map(|i| draw_terms(&ev, &jac, &residuals, n, half_width, seed, i, false).map(|t| t.reg))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_se(&regs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityCheck {
    pub clean_loss: f64,
    pub perturbed_loss: f64,
    pub perturbed_se: f64,
    pub regularizer: f64,
    pub regularizer_se: f64,
    pub cross_term: f64,
    pub cross_se: f64,
    /// Per-draw `L~ - L - R - cross`, averaged: the Taylor remainder.
    pub residual: f64,
    pub residual_se: f64,
    /// Bin width; noise is `U[-delta/2, delta/2]`.
    pub delta: f64,
    /// `delta / max_i |w_i|`.
    pub delta_ratio: f64,
    pub draws: usize,
    pub seed: u64,
}

impl IdentityCheck {
    /// `|L~ - (L + R)| / L`.
    pub fn relative_gap(&self) -> f64 {
        (self.perturbed_loss - (self.clean_loss + self.regularizer)).abs() / self.clean_loss
    }
}

/// Clean loss, perturbed loss, regularizer and cross term from common draws
/// of `D ~ U[-delta/2, delta/2]`.
pub fn identity_check(model: &ModelState, data: &Dataset, delta: f64, draws: usize, seed: u64) -> Result<IdentityCheck> {
    require_mse(data, crate::eval::loss_for(data))?;
    if draws == 0 || !(delta >= 0.0) || !delta.is_finite() {
        return Err(Error::InvalidBudget("need draws >= 1 and delta >= 0".into()));
    }
    let (ev, jac, residuals) = prepare(model, data)?;
    let clean = ev.loss(ev.center())?;
    let n = data.len() as f64;
    let terms = (0..draws)
        .into_par_iter()
        .map(|i| draw_terms(&ev, &jac, &residuals, n, delta / 2.0, seed, i, true))
        .collect::<Result<Vec<_>>>()?;
    let col = |f: fn(&DrawTerms) -> f64| terms.iter().map(f).collect::<Vec<_>>();
    let (pl, pse) = mean_se(&col(|t| t.perturbed));
    let (rg, rse) = mean_se(&col(|t| t.reg));
    let (cr, cse) = mean_se(&col(|t| t.cross));
    let rem: Vec<f64> = terms
        .iter()
        .map(|t| t.perturbed - clean - t.reg - t.cross)
        .collect();
    let (res, res_se) = mean_se(&rem);
    let w_inf = model
        .effective_weights(Which::Current)
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()));
    Ok(IdentityCheck {
        clean_loss: clean,
        perturbed_loss: pl,
        perturbed_se: pse,
        regularizer: rg,
        regularizer_se: rse,
        cross_term: cr,
        cross_se: cse,
        residual: res,
        residual_se: res_se,
        delta,
        delta_ratio: if w_inf > 0.0 { delta / w_inf } else { f64::INFINITY },
        draws,
        seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dominance {
    pub violation_rate: f64,
    pub violations: usize,
    pub draws: usize,
    pub clean_loss: f64,
}

/// Fraction of draws `D ~ U[-delta/2, delta/2]` with `L(w + D) < L(w)`.
pub fn dominance_check(eval: &impl Evaluator, delta: f64, draws: usize, seed: u64) -> Result<Dominance> {
    if draws == 0 || !(delta >= 0.0) {
        return Err(Error::InvalidBudget("need draws >= 1 and delta >= 0".into()));
    }
    let center = eval.center();
    let clean = eval.loss(center)?;
    let lower = (0..draws)
        .into_par_iter()
        .map(|i| {
            let d = perturb::uniform(&mut rng_for(seed, i as u64), center.len(), delta / 2.0);
            Ok(loss_or_inf(eval, &add(center, &d))? < clean)
        })
        .collect::<Result<Vec<bool>>>()?;
    let violations = lower.iter().filter(|&&b| b).count();
    Ok(Dominance {
        violation_rate: violations as f64 / draws as f64,
        violations,
        draws,
        clean_loss: clean,
    })
}
