//! PAC-Bayes and sharpness flatness measures.
//!
//! Two perturbation budgets are searched for each model: the largest
//! Gaussian standard deviation `sigma` and the largest box radius `alpha`
//! (worst case found by projected gradient ascent) that keep the training
//! accuracy drop within a target. Both have magnitude-aware variants where
//! coordinate `i` is scaled by `|w_i| + eps_mag`. From the budgets eight
//! measures are computed, each against the initialization (`init`) or the
//! origin (`orig`).
//!
//! Logarithms are natural. The confidence term is `ln(m / delta_conf)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::{Evaluator, NetEvaluator};
use crate::model::{ModelState, Which};
use crate::perturb::{self, AscentConfig};
use crate::rng::rng_for;

pub const MAG_EPS: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    /// Drop in training accuracy.
    AccuracyDrop,
    /// Increase in training loss.
    LossIncrease,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub target_dev: f64,
    pub iters: usize,
    /// Noise draws averaged per sigma candidate.
    pub draws: usize,
    pub ascent: AscentConfig,
    pub bracket_lo: f64,
    pub bracket_hi: f64,
    pub cap: f64,
    pub eps_mag: f64,
    pub criterion: Criterion,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            target_dev: 0.1,
            iters: 15,
            draws: 10,
            ascent: AscentConfig::default(),
            bracket_lo: 1e-5,
            bracket_hi: 2.0,
            cap: (1u64 << 20) as f64,
            eps_mag: MAG_EPS,
            criterion: Criterion::AccuracyDrop,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetKind {
    GaussianSigma,
    AdversarialAlpha,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationBudget {
    pub kind: BudgetKind,
    pub magnitude_aware: bool,
    pub value: f64,
    pub deviation: f64,
    /// Final upper bracket and its deviation.
    pub upper: f64,
    pub upper_deviation: f64,
    /// Set when no candidate up to the cap exceeded the target.
    pub capped: bool,
    pub expansions: usize,
    /// Bisection candidates and their deviations.
    pub trace: Vec<(f64, f64)>,
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// The quantity the criterion compares, with failures mapped to the worst value.
fn score(eval: &impl Evaluator, w: &[f64], criterion: Criterion) -> Result<f64> {
    let r = match criterion {
        Criterion::AccuracyDrop => eval.accuracy(w),
        Criterion::LossIncrease => eval.loss(w),
    };
    match (r, criterion) {
        (Ok(v), _) if v.is_finite() => Ok(v),
        (Ok(_) | Err(Error::NonFinite { .. }), Criterion::AccuracyDrop) => Ok(0.0),
        (Ok(_) | Err(Error::NonFinite { .. }), Criterion::LossIncrease) => Ok(f64::INFINITY),
        (Err(e), _) => Err(e),
    }
}

fn deviation_of(base: f64, perturbed: f64, criterion: Criterion) -> f64 {
    match criterion {
        Criterion::AccuracyDrop => base - perturbed,
        Criterion::LossIncrease => perturbed - base,
    }
}

/// Mean deviation under Gaussian noise of scale `sigma`. Draw `d` always
/// uses the same unit normal vector, so this is a deterministic function of
/// `sigma`.
pub fn sigma_deviation(eval: &impl Evaluator, sigma: f64, magnitude_aware: bool, cfg: &SearchConfig) -> Result<f64> {
    let w = eval.center();
    let base = score(eval, w, cfg.criterion)?;
    let scales = perturb::coordinate_scales(w, sigma, magnitude_aware, cfg.eps_mag);
    let scores = (0..cfg.draws.max(1))
        .into_par_iter()
        .map(|d| {
            let z = perturb::standard_normal(&mut rng_for(cfg.seed, d as u64), w.len());
            let u: Vec<f64> = z.iter().zip(&scales).map(|(a, s)| a * s).collect();
            score(eval, &add(w, &u), cfg.criterion)
        })
        .collect::<Result<Vec<_>>>()?;
    let mean = scores.iter().fold(0.0, |s, v| s + v) / scores.len() as f64;
    Ok(deviation_of(base, mean, cfg.criterion))
}

/// Worst-case perturbation in the box of radius `alpha` (per-coordinate
/// `alpha (|w_i| + eps)` when magnitude aware), from a fixed uniform start.
pub fn worst_case(eval: &impl Evaluator, alpha: f64, magnitude_aware: bool, cfg: &SearchConfig) -> Result<perturb::AscentResult> {
    let w = eval.center();
    let bounds = perturb::coordinate_scales(w, alpha, magnitude_aware, cfg.eps_mag);
    let unit = perturb::uniform(&mut rng_for(cfg.seed, u64::MAX), w.len(), 1.0);
    let u0 = unit.iter().zip(&bounds).map(|(a, b)| a * b).collect();
    perturb::projected_ascent(eval, &bounds, u0, &cfg.ascent)
}

pub fn alpha_deviation(eval: &impl Evaluator, alpha: f64, magnitude_aware: bool, cfg: &SearchConfig) -> Result<f64> {
    let w = eval.center();
    let base = score(eval, w, cfg.criterion)?;
    let res = worst_case(eval, alpha, magnitude_aware, cfg)?;
    let perturbed = score(eval, &add(w, &res.u), cfg.criterion)?;
    Ok(deviation_of(base, perturbed, cfg.criterion))
}

fn check_criterion(eval: &impl Evaluator, cfg: &SearchConfig) -> Result<()> {
    if cfg.criterion == Criterion::AccuracyDrop {
        eval.accuracy(eval.center())?;
    }
    if cfg.iters == 0 || !(cfg.bracket_lo > 0.0) || !(cfg.bracket_hi > cfg.bracket_lo) {
        return Err(Error::InvalidArgument("search needs iters >= 1 and 0 < lo < hi".into()));
    }
    Ok(())
}

/// Largest budget whose deviation stays within the target, by bracket
/// expansion (x2 up to the cap) followed by `iters` bisection steps.
fn search(
    kind: BudgetKind,
    magnitude_aware: bool,
    cfg: &SearchConfig,
    dev: impl Fn(f64) -> Result<f64>,
) -> Result<PerturbationBudget> {
    let target = cfg.target_dev;
    let mut lo = cfg.bracket_lo;
    let mut dev_lo = dev(lo)?;
    let mut shrink = 0;
    while dev_lo > target {
        shrink += 1;
        if shrink > 60 {
            return Err(Error::InvalidBudget(
                "deviation exceeds the target even for vanishing perturbations".into(),
            ));
        }
        lo *= 0.5;
        dev_lo = dev(lo)?;
    }
    let mut hi = cfg.bracket_hi.max(lo * 2.0);
    let mut dev_hi = dev(hi)?;
    let mut expansions = 0;
    while dev_hi <= target {
        if hi >= cfg.cap {
            return Ok(PerturbationBudget {
                kind,
                magnitude_aware,
                value: hi,
                deviation: dev_hi,
                upper: hi,
                upper_deviation: dev_hi,
                capped: true,
                expansions,
                trace: Vec::new(),
            });
        }
        lo = hi;
        dev_lo = dev_hi;
        hi = (hi * 2.0).min(cfg.cap);
        dev_hi = dev(hi)?;
        expansions += 1;
    }
    let mut trace = Vec::with_capacity(cfg.iters);
    for _ in 0..cfg.iters {
        let mid = 0.5 * (lo + hi);
        let d = dev(mid)?;
        trace.push((mid, d));
        if d <= target {
            lo = mid;
            dev_lo = d;
        } else {
            hi = mid;
            dev_hi = d;
        }
    }
    Ok(PerturbationBudget {
        kind,
        magnitude_aware,
        value: lo,
        deviation: dev_lo,
        upper: hi,
        upper_deviation: dev_hi,
        capped: false,
        expansions,
        trace,
    })
}

pub fn search_sigma(eval: &impl Evaluator, cfg: &SearchConfig, magnitude_aware: bool) -> Result<PerturbationBudget> {
    check_criterion(eval, cfg)?;
    search(BudgetKind::GaussianSigma, magnitude_aware, cfg, |s| {
        sigma_deviation(eval, s, magnitude_aware, cfg)
    })
}

pub fn search_alpha(eval: &impl Evaluator, cfg: &SearchConfig, magnitude_aware: bool) -> Result<PerturbationBudget> {
    check_criterion(eval, cfg)?;
    search(BudgetKind::AdversarialAlpha, magnitude_aware, cfg, |a| {
        alpha_deviation(eval, a, magnitude_aware, cfg)
    })
}

/// Re-evaluate a budget's deviation at an arbitrary value.
pub fn deviation(eval: &impl Evaluator, budget: &PerturbationBudget, value: f64, cfg: &SearchConfig) -> Result<f64> {
    match budget.kind {
        BudgetKind::GaussianSigma => sigma_deviation(eval, value, budget.magnitude_aware, cfg),
        BudgetKind::AdversarialAlpha => alpha_deviation(eval, value, budget.magnitude_aware, cfg),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Displacement from the initialization, `w - w0`.
    Init,
    /// Distance from the origin, `w`.
    Orig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    PacBayes,
    Sharpness,
}

fn confidence_tail(m: f64, delta_conf: f64) -> f64 {
    (m / delta_conf).ln() + 10.0
}

fn sq_dist(w: &[f64], w0: &[f64], variant: Variant) -> f64 {
    match variant {
        Variant::Init => w.iter().zip(w0).fold(0.0, |s, (a, b)| s + (a - b) * (a - b)),
        Variant::Orig => w.iter().fold(0.0, |s, a| s + a * a),
    }
}

fn check_common(budget: f64, m: f64, delta_conf: f64) -> Result<()> {
    if !(budget > 0.0) {
        return Err(Error::InvalidBudget(format!("budget must be positive, got {budget}")));
    }
    if !(m >= 1.0) || !(delta_conf > 0.0 && delta_conf < 1.0) {
        return Err(Error::InvalidArgument("need m >= 1 and 0 < delta_conf < 1".into()));
    }
    Ok(())
}

/// `sq_norm / (4 sigma^2) + ln(m / delta_conf) + 10`.
pub fn pac_bayes_value(sq_norm: f64, sigma: f64, m: f64, delta_conf: f64) -> Result<f64> {
    check_common(sigma, m, delta_conf)?;
    Ok(sq_norm / (4.0 * sigma * sigma) + confidence_tail(m, delta_conf))
}

/// `sq_norm ln(2 omega) / (4 alpha^2) + ln(m / delta_conf) + 10`.
pub fn sharpness_value(sq_norm: f64, omega: f64, alpha: f64, m: f64, delta_conf: f64) -> Result<f64> {
    check_common(alpha, m, delta_conf)?;
    if !(omega >= 0.5) {
        return Err(Error::InvalidArgument(format!("parameter count {omega} too small")));
    }
    Ok(sq_norm * (2.0 * omega).ln() / (4.0 * alpha * alpha) + confidence_tail(m, delta_conf))
}

pub fn pac_bayes_measure(w: &[f64], w0: &[f64], sigma: f64, m: f64, delta_conf: f64, variant: Variant) -> Result<f64> {
    pac_bayes_value(sq_dist(w, w0, variant), sigma, m, delta_conf)
}

pub fn sharpness_measure(w: &[f64], w0: &[f64], alpha: f64, m: f64, delta_conf: f64, variant: Variant) -> Result<f64> {
    sharpness_value(sq_dist(w, w0, variant), w.len() as f64, alpha, m, delta_conf)
}

/// Magnitude-aware measure with an explicit floor `eps`:
///
/// `1/4 sum_i ln[(eps^2 + (v^2 + c) ||r||^2 / omega) / (eps^2 + v^2 (w_i - w0_i)^2)] + ln(m / delta_conf) + 10`
///
/// with `c = 1` for PAC-Bayes and `c = 4 ln(2 omega / delta_conf)` for
/// sharpness, `r = w - w0` (init) or `w` (orig). The denominator uses the
/// displacement from initialization for both variants.
pub fn mag_measure_eps(
    w: &[f64],
    w0: &[f64],
    budget: f64,
    m: f64,
    delta_conf: f64,
    family: Family,
    variant: Variant,
    eps: f64,
) -> Result<f64> {
    check_common(budget, m, delta_conf)?;
    if w.len() != w0.len() || w.is_empty() {
        return Err(Error::InvalidArgument("weight vectors must be nonempty and equal length".into()));
    }
    let omega = w.len() as f64;
    let c = match family {
        Family::PacBayes => 1.0,
        Family::Sharpness => 4.0 * (2.0 * omega / delta_conf).ln(),
    };
    let v2 = budget * budget;
    let eps2 = eps * eps;
    let num = eps2 + (v2 + c) * sq_dist(w, w0, variant) / omega;
    let sum = w.iter().zip(w0).fold(0.0, |s, (a, b)| {
        let d = a - b;
        s + (num / (eps2 + v2 * d * d)).ln()
    });
    Ok(0.25 * sum + confidence_tail(m, delta_conf))
}

pub fn mag_measure(
    w: &[f64],
    w0: &[f64],
    budget: f64,
    m: f64,
    delta_conf: f64,
    family: Family,
    variant: Variant,
) -> Result<f64> {
    mag_measure_eps(w, w0, budget, m, delta_conf, family, variant, MAG_EPS)
}

/// `sqrt(x / m)`.
pub fn normalize(x: f64, m: f64) -> Result<f64> {
    if x < 0.0 || x.is_nan() {
        return Err(Error::InvalidArgument(format!("cannot normalize negative measure {x}")));
    }
    if !(m >= 1.0) {
        return Err(Error::InvalidArgument(format!("m must be >= 1, got {m}")));
    }
    Ok((x / m).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Measures {
    pub pac_bayes_init: f64,
    pub pac_bayes_orig: f64,
    pub pac_bayes_mag_init: f64,
    pub pac_bayes_mag_orig: f64,
    pub sharpness_init: f64,
    pub sharpness_orig: f64,
    pub sharpness_mag_init: f64,
    pub sharpness_mag_orig: f64,
}

impl Measures {
    pub const NAMES: [&'static str; 8] = [
        "pac_bayes_init",
        "pac_bayes_orig",
        "pac_bayes_mag_init",
        "pac_bayes_mag_orig",
        "sharpness_init",
        "sharpness_orig",
        "sharpness_mag_init",
        "sharpness_mag_orig",
    ];

    pub fn values(&self) -> [f64; 8] {
        [
            self.pac_bayes_init,
            self.pac_bayes_orig,
            self.pac_bayes_mag_init,
            self.pac_bayes_mag_orig,
            self.sharpness_init,
            self.sharpness_orig,
            self.sharpness_mag_init,
            self.sharpness_mag_orig,
        ]
    }

    fn try_map(&self, f: impl Fn(f64) -> Result<f64>) -> Result<Self> {
        Ok(Self {
            pac_bayes_init: f(self.pac_bayes_init)?,
            pac_bayes_orig: f(self.pac_bayes_orig)?,
            pac_bayes_mag_init: f(self.pac_bayes_mag_init)?,
            pac_bayes_mag_orig: f(self.pac_bayes_mag_orig)?,
            sharpness_init: f(self.sharpness_init)?,
            sharpness_orig: f(self.sharpness_orig)?,
            sharpness_mag_init: f(self.sharpness_mag_init)?,
            sharpness_mag_orig: f(self.sharpness_mag_orig)?,
        })
    }
}

/// Which weights of a quantized model the measures are taken at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WeightSource {
    /// Dequantized weights, with the dequantized initialization as `w0`,
    /// perturbed directly.
    #[default]
    Dequantized,
    /// Latent weights; every perturbed point passes through the quantizers.
    Latent,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlatnessConfig {
    pub search: SearchConfig,
    pub delta_conf: f64,
    /// Dataset size used in the measures; defaults to the training set size.
    pub m: Option<usize>,
    pub normalize: bool,
    pub weights: WeightSource,
}

impl Default for FlatnessConfig {
    fn default() -> Self {
        Self {
            search: SearchConfig::default(),
            delta_conf: 0.05,
            m: None,
            normalize: true,
            weights: WeightSource::Dequantized,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlatnessReport {
    pub raw: Measures,
    pub normalized: Option<Measures>,
    pub sigma: PerturbationBudget,
    pub sigma_mag: PerturbationBudget,
    pub alpha: PerturbationBudget,
    pub alpha_mag: PerturbationBudget,
    pub m: usize,
    pub delta_conf: f64,
    pub omega: usize,
    pub seed: u64,
    pub weights: WeightSource,
}

impl FlatnessReport {
    /// Normalized measures when requested, raw otherwise.
    pub fn reported(&self) -> &Measures {
        self.normalized.as_ref().unwrap_or(&self.raw)
    }
}

/// Evaluate all eight measures at fixed budgets.
pub fn measures_at(
    w: &[f64],
    w0: &[f64],
    sigma: f64,
    sigma_mag: f64,
    alpha: f64,
    alpha_mag: f64,
    m: f64,
    delta_conf: f64,
) -> Result<Measures> {
    use Family::*;
    use Variant::*;
    Ok(Measures {
        pac_bayes_init: pac_bayes_measure(w, w0, sigma, m, delta_conf, Init)?,
        pac_bayes_orig: pac_bayes_measure(w, w0, sigma, m, delta_conf, Orig)?,
        pac_bayes_mag_init: mag_measure(w, w0, sigma_mag, m, delta_conf, PacBayes, Init)?,
        pac_bayes_mag_orig: mag_measure(w, w0, sigma_mag, m, delta_conf, PacBayes, Orig)?,
        sharpness_init: sharpness_measure(w, w0, alpha, m, delta_conf, Init)?,
        sharpness_orig: sharpness_measure(w, w0, alpha, m, delta_conf, Orig)?,
        sharpness_mag_init: mag_measure(w, w0, alpha_mag, m, delta_conf, Sharpness, Init)?,
        sharpness_mag_orig: mag_measure(w, w0, alpha_mag, m, delta_conf, Sharpness, Orig)?,
    })
}

/// All four searches and all eight measures for a trained classifier.
pub fn full_report(model: &ModelState, train: &Dataset, cfg: &FlatnessConfig) -> Result<FlatnessReport> {
    let (w, w0, requantize) = match cfg.weights {
        WeightSource::Dequantized => (
            model.effective_weights(Which::Current),
            model.effective_weights(Which::Init),
            false,
        ),
        WeightSource::Latent => (
            model.flat_weights(Which::Current),
            model.flat_weights(Which::Init),
            true,
        ),
    };
    let eval = NetEvaluator::with_center(model, train, w.clone(), requantize)?;
    let s = &cfg.search;
    let sigma = search_sigma(&eval, s, false)?;
    let sigma_mag = search_sigma(&eval, s, true)?;
    let alpha = search_alpha(&eval, s, false)?;
    let alpha_mag = search_alpha(&eval, s, true)?;
    let m = cfg.m.unwrap_or(train.len());
    let raw = measures_at(
        &w,
        &w0,
        sigma.value,
        sigma_mag.value,
        alpha.value,
        alpha_mag.value,
        m as f64,
        cfg.delta_conf,
    )?;
    let normalized = if cfg.normalize {
        Some(raw.try_map(|x| normalize(x, m as f64))?)
    } else {
        None
    };
    Ok(FlatnessReport {
        raw,
        normalized,
        sigma,
        sigma_mag,
        alpha,
        alpha_mag,
        m,
        delta_conf: cfg.delta_conf,
        omega: w.len(),
        seed: s.seed,
        weights: cfg.weights,
    })
}

/// One row per model in the PAC-Bayes / sharpness column layout.
pub fn write_table_csv<W: std::io::Write>(out: W, rows: &[(String, String, String, FlatnessReport)]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record([
        "dataset",
        "model",
        "precision",
        "pac_bayes_init",
        "pac_bayes_orig",
        "pac_bayes_mag_init",
        "pac_bayes_mag_orig",
        "sharpness_init",
        "sharpness_orig",
        "sharpness_mag_init",
        "sharpness_mag_orig",
    ])?;
    for (dataset, model, precision, report) in rows {
        let mut rec = vec![dataset.clone(), model.clone(), precision.clone()];
        rec.extend(report.reported().values().iter().map(|v| v.to_string()));
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::QuadraticBowl;

    const TAIL: f64 = 19.903_487_552_536_127; // ln(20000) + 10

    #[test]
    fn pac_bayes_plugins() {
        let w = [0.5, -1.0];
        assert!((pac_bayes_measure(&w, &w, 0.3, 1000.0, 0.05, Variant::Init).unwrap() - TAIL).abs() < 1e-12);
        let w0 = [0.0, 0.0, 0.0];
        let w = [2.0, 0.0, 0.0];
        let v = pac_bayes_measure(&w, &w0, 1.0, 1000.0, 0.05, Variant::Init).unwrap();
        assert!((v - (1.0 + TAIL)).abs() < 1e-12);
    }

    #[test]
    fn sharpness_zero_displacement() {
        let w = [0.1, 0.2, 0.3];
        let v = sharpness_measure(&w, &w, 0.7, 1000.0, 0.05, Variant::Init).unwrap();
        assert!((v - TAIL).abs() < 1e-12);
    }

    #[test]
    fn doubling_alpha_quarters_first_term() {
        let w = [1.0, -2.0, 0.5];
        let w0 = [0.0; 3];
        let a = sharpness_measure(&w, &w0, 0.2, 500.0, 0.05, Variant::Orig).unwrap() - (500f64 / 0.05).ln() - 10.0;
        let b = sharpness_measure(&w, &w0, 0.4, 500.0, 0.05, Variant::Orig).unwrap() - (500f64 / 0.05).ln() - 10.0;
        assert!((a / b - 4.0).abs() < 1e-12);
    }

    #[test]
    fn strictly_decreasing_in_budget() {
        let w = [1.0, -2.0];
        let w0 = [0.5, 0.0];
        let mut last = f64::INFINITY;
        for s in [0.01, 0.1, 0.5, 1.0, 3.0] {
            let v = pac_bayes_measure(&w, &w0, s, 100.0, 0.05, Variant::Init).unwrap();
            assert!(v < last);
            last = v;
        }
    }

    #[test]
    fn mag_measure_zero_displacement_is_tail() {
        let w = [0.3, -0.4, 1.2];
        for fam in [Family::PacBayes, Family::Sharpness] {
            let v = mag_measure(&w, &w, 0.5, 1000.0, 0.05, fam, Variant::Init).unwrap();
            assert!((v - TAIL).abs() < 1e-12);
        }
    }

    #[test]
    fn mag_measure_single_parameter_limit() {
        let v = mag_measure_eps(&[1.0], &[0.0], 1.0, 1000.0, 0.05, Family::PacBayes, Variant::Init, 0.0).unwrap();
        assert!((v - (0.25 * 2f64.ln() + TAIL)).abs() < 1e-12);
    }

    #[test]
    fn budget_errors() {
        assert!(pac_bayes_measure(&[1.0], &[0.0], 0.0, 10.0, 0.05, Variant::Init).is_err());
        assert!(sharpness_measure(&[1.0], &[0.0], -1.0, 10.0, 0.05, Variant::Init).is_err());
        assert!(mag_measure(&[1.0], &[0.0], 0.0, 10.0, 0.05, Family::PacBayes, Variant::Init).is_err());
    }

    #[test]
    fn normalize_cases() {
        assert_eq!(normalize(1000.0, 1000.0).unwrap(), 1.0);
        assert_eq!(normalize(0.0, 7.0).unwrap(), 0.0);
        assert!((normalize(4.0, 1000.0).unwrap() - 0.063_245_553_203_367_59).abs() < 1e-12);
        assert!(normalize(-1.0, 10.0).is_err());
    }

    #[test]
    fn accuracy_criterion_needs_classifier() {
        let bowl = QuadraticBowl::at_minimum(3);
        assert!(matches!(
            search_sigma(&bowl, &SearchConfig::default(), false),
            Err(Error::AccuracyUndefined)
        ));
    }
}
