//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.
//!
//! `cargo test -p qlens-core --test acceptance -- 3 8` runs criteria 3 and 8 only.

mod support;

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Instant;

use qlens::checkpoint::{load_model, save_model};
use qlens::corrupt::{corrupted_gap, CorruptionKind, CorruptionSpec};
use qlens::desk;
use qlens::eval::{NetEvaluator, QuadraticBowl};
use qlens::flatness::{
    deviation, full_report, mag_measure_eps, normalize, pac_bayes_measure, sharpness_value, Family, FlatnessConfig,
    FlatnessReport, Measures, SearchConfig, Variant,
};
use qlens::grid::{run_grid, Axis};
use qlens::landscape::{evaluate_grid, landscape};
use qlens::model::{ArchSpec, Which};
use qlens::noise::identity_check;
use qlens::quant::{quantize, QuantSpec};
use qlens::rng::rng_for;
use qlens::train::{
    bin_width_report, run, write_bin_width_csv, DataSource, DataSpec, ExperimentSpec, Precision,
    RunOutput,
};
use qlens::Tensor;
use rand::Rng;
use rayon::prelude::*;

const SEEDS: u64 = 5;

type Verdict = (bool, String);

fn desk_runs(keys: &[(Precision, u64)]) -> Vec<Arc<RunOutput>> {
    static CACHE: OnceLock<Mutex<HashMap<(u32, u64), Arc<RunOutput>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    let missing: Vec<(Precision, u64)> = {
        let c = cache.lock().unwrap();
        keys.iter().copied().filter(|(p, s)| !c.contains_key(&(p.rank(), *s))).collect()
    };
    let fresh: Vec<_> = missing
        .par_iter()
        .map(|&(p, s)| ((p.rank(), s), Arc::new(run(&desk::spec(p, s)).expect("desk training"))))
        .collect();
    let mut c = cache.lock().unwrap();
    c.extend(fresh);
    keys.iter().map(|(p, s)| c[&(p.rank(), *s)].clone()).collect()
}

fn flatness_reports() -> &'static Vec<(u64, FlatnessReport, FlatnessReport)> {
    static REPORTS: OnceLock<Vec<(u64, FlatnessReport, FlatnessReport)>> = OnceLock::new();
    REPORTS.get_or_init(|| {
        let keys: Vec<_> = (0..SEEDS).flat_map(|s| [(Precision::Fp, s), (Precision::Int(2), s)]).collect();
        let runs = desk_runs(&keys);
        let cfg = FlatnessConfig::default();
        let reports: Vec<FlatnessReport> =
            runs.par_iter().map(|r| full_report(&r.model, &r.train, &cfg).expect("flatness")).collect();
        (0..SEEDS as usize)
            .map(|i| (i as u64, reports[2 * i].clone(), reports[2 * i + 1].clone()))
            .collect()
    })
}

/// Round half to even, written without the standard library's rounding.
fn reference_quantize(w: f64, s: f64, bits: u32) -> (i64, f64, f64) {
    let q_min = -((1i64 << (bits - 1)) as f64);
    let q_max = ((1i64 << (bits - 1)) - 1) as f64;
    let mut r = w / s;
    if r < q_min {
        r = q_min;
    }
    if r > q_max {
        r = q_max;
    }
    let f = r.floor();
    let frac = r - f;
    let q = if frac > 0.5 {
        f + 1.0
    } else if frac < 0.5 {
        f
    } else if f % 2.0 == 0.0 {
        f
    } else {
        f + 1.0
    };
    (q as i64, q * s, w - q * s)
}

fn criterion_1() -> Verdict {
    let start = Instant::now();
    let mut mismatches = 0;
    let mut bound_violations = 0;
    let mut in_range = 0;
    for t in 0..1000u64 {
        let rng = &mut rng_for(0xC1, t);
        let bits = [2, 4, 8][rng.random_range(0..3)];
        let s: f64 = rng.random_range(0.001..1.0);
        let n = rng.random_range(1..64);
        let w: Vec<f64> = (0..n)
            .map(|_| {
                if rng.random_bool(0.1) {
                    (rng.random_range(-130i32..130) as f64 + 0.5) * s
                } else {
                    rng.random_range(-3.0..3.0) * s * 2f64.powi(bits as i32 - 1)
                }
            })
            .collect();
        let spec = QuantSpec::new(bits, s).unwrap();
        let v = quantize(&Tensor::vector(&w), &spec).unwrap();
        for (i, &x) in w.iter().enumerate() {
            let (code, hat, delta) = reference_quantize(x, s, bits);
            if v.codes[i] != code
                || v.w_hat.data()[i] != hat
                || v.delta.data()[i] != delta
            {
                mismatches += 1;
            }
            let r = x / s;
            if r >= spec.q_min() - 0.5 && r <= spec.q_max() + 0.5 {
                in_range += 1;
                if v.delta.data()[i].abs() > s / 2.0 * (1.0 + 1e-12) {
                    bound_violations += 1;
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    (
        mismatches == 0 && bound_violations == 0 && secs < 5.0,
        format!(
            "1000 triples: {mismatches} oracle mismatches, {bound_violations}/{in_range} in-range |delta| > s/2 (1e-12 rel), {secs:.2}s < 5s"
        ),
    )
}

fn criterion_2() -> Verdict {
    let start = Instant::now();
    let mut worst: (f64, &str) = (0.0, "");
    for (k, (name, build)) in support::all_ops().iter().enumerate() {
        let e = support::op_error(100 + k as u64, build.as_ref());
        if e > worst.0 {
            worst = (e, name);
        }
    }
    let ste = support::ste_error();
    let secs = start.elapsed().as_secs_f64();
    (
        worst.0 <= support::TOL && ste <= support::TOL && secs < 30.0,
        format!(
            "14 op configurations x {} points: worst rel err {:.1e} ({}); STE vs LSQ rule {:.1e}; tol 1e-4; {secs:.2}s < 30s",
            support::POINTS,
            worst.0,
            worst.1,
            ste
        ),
    )
}

fn criterion_3() -> Verdict {
    let start = Instant::now();
    let out = run(&desk::regression_spec(0)).expect("regression training");
    let w_inf = out.model.effective_weights(Which::Current).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let c = identity_check(&out.model, &out.train, 0.01 * w_inf, 10_000, 0).expect("identity check");
    let rel = c.relative_gap();
    let cross_z = c.cross_term.abs() / c.cross_se;

    let lin = ExperimentSpec {
        arch: ArchSpec::linear(3, 1, true),
        data: DataSpec {
            source: DataSource::LinearRegression { n: 256, dim: 3, noise: 0.1 },
            split: 0.5,
            seed: 0,
        },
        ..desk::regression_spec(0)
    };
    let lin_out = run(&lin).expect("linear training");
    let lw = lin_out.model.effective_weights(Which::Current).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let lc = identity_check(&lin_out.model, &lin_out.train, 0.01 * lw, 10_000, 0).expect("identity check");
    let secs = start.elapsed().as_secs_f64();
    (
        rel <= 0.02 && cross_z <= 3.0 && lc.residual.abs() <= 1e-10 && secs < 120.0,
        format!(
            "|L~-(L+R)|/L = {rel:.2e} <= 0.02, |cross| = {cross_z:.2} SE <= 3, linear residual {:.1e} <= 1e-10, {secs:.1}s < 120s",
            lc.residual.abs()
        ),
    )
}

fn mean_step(r: &RunOutput) -> f64 {
    let rows = bin_width_report(&r.model).expect("quantized");
    rows.iter().map(|(_, s)| s).sum::<f64>() / rows.len() as f64
}

fn criterion_4() -> Verdict {
    let start = Instant::now();
    let mut ordered = 0;
    let mut detail = vec![];
    for seed in 0..SEEDS {
        let runs = desk_runs(&[(Precision::Int(2), seed), (Precision::Int(4), seed), (Precision::Int(8), seed)]);
        let s: Vec<f64> = runs.iter().map(|r| mean_step(r)).collect();
        if s[0] > s[1] && s[1] > s[2] {
            ordered += 1;
        }
        detail.push(format!("{:.3}/{:.3}/{:.3}", s[0], s[1], s[2]));
    }
    let secs = start.elapsed().as_secs_f64();
    (
        ordered >= 4 && secs < 600.0,
        format!(
            "s(2) > s(4) > s(8) in {ordered}/5 seeds (need 4) [{}], {secs:.0}s < 600s",
            detail.join(", ")
        ),
    )
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn criterion_5() -> Verdict {
    let start = Instant::now();
    let reports = flatness_reports();
    let pick: [(&str, fn(&Measures) -> f64); 4] = [
        ("pac_bayes_mag_init", |m| m.pac_bayes_mag_init),
        ("pac_bayes_mag_orig", |m| m.pac_bayes_mag_orig),
        ("sharpness_mag_init", |m| m.sharpness_mag_init),
        ("sharpness_mag_orig", |m| m.sharpness_mag_orig),
    ];
    let mut pass = true;
    let mut detail = vec![];
    for (name, f) in pick {
        let fp: Vec<f64> = reports.iter().map(|(_, a, _)| f(a.reported())).collect();
        let q2: Vec<f64> = reports.iter().map(|(_, _, b)| f(b.reported())).collect();
        let wins = fp.iter().zip(&q2).filter(|(a, b)| b < a).count();
        let (mf, mq) = (median(fp), median(q2));
        pass &= wins >= 4 && mq < mf;
        detail.push(format!("{name} 2-bit < fp in {wins}/5, median {mq:.3} vs {mf:.3}"));
    }
    let secs = start.elapsed().as_secs_f64();
    pass &= secs < 1800.0;
    (pass, format!("{}; {secs:.0}s < 1800s", detail.join("; ")))
}

fn criterion_6() -> Verdict {
    let start = Instant::now();
    let precisions = vec![Precision::Int(2), Precision::Int(4), Precision::Int(8), Precision::Fp];
    let cfg = desk::grid(precisions, 0);
    let res = run_grid(&cfg, rayon::current_num_threads()).expect("grid");
    let s = &res.summary;
    let enough = s.iter().all(|p| p.cells - p.failed >= 8 && p.failed == 0);
    let monotone = s.windows(2).all(|w| w[0].mean_train_loss >= w[1].mean_train_loss);
    let gap_ok = s[0].mean_gap <= s[3].mean_gap;
    let secs = start.elapsed().as_secs_f64();
    let fmt = |f: fn(&qlens::grid::PrecisionSummary) -> f64| {
        s.iter().map(|p| format!("{}={:.4}", p.precision, f(p))).collect::<Vec<_>>().join(" ")
    };
    (
        enough && monotone && gap_ok && secs < 2700.0,
        format!(
            "{} cells/precision; train loss {} (non-increasing in bits: {monotone}); gap {} (gap(2) <= gap(fp): {gap_ok}); {secs:.0}s < 2700s",
            cfg.cell_count(),
            fmt(|p| p.mean_train_loss),
            fmt(|p| p.mean_gap)
        ),
    )
}

fn criterion_7() -> Verdict {
    let start = Instant::now();
    let cfg = FlatnessConfig::default();
    let reports = flatness_reports();
    let keys: Vec<_> = (0..SEEDS).flat_map(|s| [(Precision::Fp, s), (Precision::Int(2), s)]).collect();
    let runs = desk_runs(&keys);
    let mut budgets = 0;
    let mut violations = 0;
    for (i, (_, fp, q2)) in reports.iter().enumerate() {
        for (rep, r) in [(fp, &runs[2 * i]), (q2, &runs[2 * i + 1])] {
            let ev = NetEvaluator::new(&r.model, &r.train).unwrap();
            for b in [&rep.sigma, &rep.sigma_mag, &rep.alpha, &rep.alpha_mag] {
                budgets += 1;
                let at_value = deviation(&ev, b, b.value, &cfg.search).unwrap();
                let at_upper = deviation(&ev, b, b.upper, &cfg.search).unwrap();
                let ok = at_value <= cfg.search.target_dev
                    && at_value == b.deviation
                    && (b.capped || at_upper > cfg.search.target_dev)
                    && b.trace.len() <= cfg.search.iters;
                if !ok {
                    violations += 1;
                }
            }
        }
    }
    let r = &runs[1];
    let in_pool = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| full_report(&r.model, &r.train, &cfg).unwrap())
    };
    let one = in_pool(1);
    let four = in_pool(4);
    let same = one == reports[0].2 && four == reports[0].2;
    let secs = start.elapsed().as_secs_f64();
    (
        violations == 0 && same,
        format!(
            "{budgets} budgets, {violations} bracketing violations; rerun with 1 and 4 workers identical: {same}; {secs:.0}s"
        ),
    )
}

fn criterion_8() -> Verdict {
    let tail = 20000f64.ln() + 10.0;
    let checks = [
        ("pac_bayes w=w0", pac_bayes_measure(&[0.3, -1.0], &[0.3, -1.0], 1.0, 1000.0, 0.05, Variant::Init).unwrap(), 19.903487552536127),
        ("pac_bayes |w-w0|^2=4", pac_bayes_measure(&[2.0, 0.0], &[0.0, 0.0], 1.0, 1000.0, 0.05, Variant::Init).unwrap(), 20.903487552536127),
        ("sharpness |w|^2=4, ln(2w)=1", sharpness_value(4.0, std::f64::consts::E / 2.0, 1.0, 1000.0, 0.05).unwrap(), 20.903487552536127),
        ("normalize(4, 1000)", normalize(4.0, 1000.0).unwrap(), 0.06324555320336758),
        ("mag single parameter eps->0", mag_measure_eps(&[1.0], &[0.0], 1.0, 1000.0, 0.05, Family::PacBayes, Variant::Init, 0.0).unwrap(), 0.25 * 2f64.ln() + tail),
    ];
    let worst = checks.iter().map(|(_, got, want)| (got - want).abs()).fold(0.0, f64::max);
    let detail: Vec<String> = checks.iter().map(|(n, got, _)| format!("{n} = {got:.10}")).collect();
    (worst <= 1e-9, format!("max abs error {worst:.1e} <= 1e-9 [{}]", detail.join("; ")))
}

fn criterion_9() -> Verdict {
    let runs = desk_runs(&[(Precision::Fp, 0), (Precision::Int(2), 0)]);
    let mut center_err: f64 = 0.0;
    let mut constant = true;
    let mut restored = true;
    for r in &runs {
        let before = r.model.clone();
        let g = landscape(&r.model, &r.train, 0, 1.0, 21).unwrap();
        restored &= r.model == before;
        center_err = center_err.max((g.center_loss - r.report.train_loss).abs() / r.report.train_loss);
        let zero = vec![0.0; r.model.weight_count()];
        let ev = if r.model.is_quantized() {
            NetEvaluator::requantizing(&r.model, &r.train).unwrap()
        } else {
            NetEvaluator::new(&r.model, &r.train).unwrap()
        };
        let flat = evaluate_grid(&ev, &zero, &zero, 1.0, 5, 0).unwrap();
        constant &= flat.losses.iter().flatten().all(|&l| l == flat.center_loss);
    }
    let bowl = evaluate_grid(&QuadraticBowl::at_minimum(2), &[1.0, 0.0], &[0.0, 1.0], 1.0, 21, 0).unwrap();
    let mut quad_err: f64 = 0.0;
    for (i, a) in bowl.alphas.iter().enumerate() {
        for (j, b) in bowl.betas.iter().enumerate() {
            quad_err = quad_err.max((bowl.losses[i][j] - (a * a + b * b)).abs());
        }
    }
    (
        center_err <= 1e-9 && constant && quad_err <= 1e-9 && restored,
        format!(
            "center rel err {center_err:.1e} <= 1e-9; zero-direction grid constant: {constant}; quadratic err {quad_err:.1e} <= 1e-9; weights restored: {restored}"
        ),
    )
}

fn criterion_10() -> Verdict {
    let runs = desk_runs(&[(Precision::Fp, 0), (Precision::Int(4), 0)]);
    let gaps: Vec<HashMap<(CorruptionKind, u8), f64>> = runs
        .iter()
        .map(|r| {
            let mut m = HashMap::new();
            for kind in CorruptionKind::ALL {
                for sev in 1..=5 {
                    let spec = CorruptionSpec::new(kind, sev, 0).unwrap();
                    m.insert((kind, sev), corrupted_gap(&r.model, &r.train, &r.test, &spec).unwrap());
                }
            }
            m
        })
        .collect();
    let mut pass = true;
    let mut detail = vec![];
    for (name, g) in ["fp", "int4"].iter().zip(&gaps) {
        let (mut up, mut pairs) = (0, 0);
        for kind in CorruptionKind::NOISE {
            for sev in 1..5 {
                pairs += 1;
                if g[&(kind, sev + 1)] >= g[&(kind, sev)] {
                    up += 1;
                }
            }
        }
        pass &= up * 5 >= pairs * 4;
        detail.push(format!("{name} noise-family non-decreasing {up}/{pairs}"));
    }
    let cells = CorruptionKind::ALL.len() * 5;
    let better = gaps[0].iter().filter(|(k, fp)| gaps[1][k] <= **fp).count();
    pass &= 2 * better > cells;
    detail.push(format!("int4 gap <= fp gap in {better}/{cells} cells"));
    (pass, format!("{} (need >= 4/5 of pairs and a majority of cells)", detail.join("; ")))
}

/// Every report the pipeline emits for one configuration, as bytes.
fn pipeline_outputs() -> Vec<(&'static str, Vec<u8>)> {
    let spec = desk::spec(Precision::Int(4), 7);
    let out = run(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("m.qlns");
    save_model(&out.model, &ckpt).unwrap();
    let mut bins = vec![];
    write_bin_width_csv(&mut bins, &bin_width_report(&out.model).unwrap()).unwrap();
    let grid_land = landscape(&out.model, &out.train, 0, 1.0, 5).unwrap();
    let mut land = vec![];
    grid_land.write_csv(&mut land).unwrap();
    let flat_cfg = FlatnessConfig { search: SearchConfig { iters: 4, ..SearchConfig::default() }, ..FlatnessConfig::default() };
    let flat = full_report(&out.model, &out.train, &flat_cfg).unwrap();
    let corrupt: Vec<f64> = (1..=5)
        .map(|s| {
            let spec = CorruptionSpec::new(CorruptionKind::GaussianNoise, s, 0).unwrap();
            corrupted_gap(&out.model, &out.train, &out.test, &spec).unwrap()
        })
        .collect();
    let mut grid_cfg = desk::grid(vec![Precision::Int(4)], 3);
    grid_cfg.axes = vec![Axis::WeightDecay(vec![0.0, 1e-4])];
    let grid = run_grid(&grid_cfg, 2).unwrap();
    let mut cells = vec![];
    grid.write_cells_csv(&mut cells).unwrap();
    vec![
        ("checkpoint", std::fs::read(&ckpt).unwrap()),
        ("gap", serde_json::to_vec_pretty(&out.report).unwrap()),
        ("trace", serde_json::to_vec_pretty(&out.trace).unwrap()),
        ("bin widths", bins),
        ("landscape", land),
        ("landscape sidecar", serde_json::to_vec_pretty(&grid_land.sidecar()).unwrap()),
        ("flatness", serde_json::to_vec_pretty(&flat).unwrap()),
        ("corruption", serde_json::to_vec_pretty(&corrupt).unwrap()),
        ("grid", cells),
    ]
}

fn criterion_11() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let mut ckpt_ok = true;
    for (i, r) in desk_runs(&[(Precision::Fp, 0), (Precision::Int(2), 0)]).iter().enumerate() {
        let a = dir.path().join(format!("a{i}.qlns"));
        let b = dir.path().join(format!("b{i}.qlns"));
        save_model(&r.model, &a).unwrap();
        save_model(&load_model(r.model.arch(), &a).unwrap(), &b).unwrap();
        ckpt_ok &= std::fs::read(&a).unwrap() == std::fs::read(&b).unwrap();
    }
    let first = pipeline_outputs();
    let second = pipeline_outputs();
    let differing: Vec<&str> = first.iter().zip(&second).filter(|(a, b)| a.1 != b.1).map(|(a, _)| a.0).collect();
    (
        ckpt_ok && differing.is_empty(),
        format!(
            "checkpoint save-load-save identical: {ckpt_ok}; {} pipeline outputs compared across two runs, differing: {:?}",
            first.len(),
            differing
        ),
    )
}

fn main() {
    let criteria: [fn() -> Verdict; 11] = [
        criterion_1,
        criterion_2,
        criterion_3,
        criterion_4,
        criterion_5,
        criterion_6,
        criterion_7,
        criterion_8,
        criterion_9,
        criterion_10,
        criterion_11,
    ];
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = vec![];
    for (i, check) in criteria.iter().enumerate() {
        let id = i + 1;
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let (ok, detail) = check();
        println!("criterion {id}: {} {detail}", if ok { "PASS" } else { "FAIL" });
        if !ok {
            failed.push(id);
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
