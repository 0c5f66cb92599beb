//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.
//!
//! Instance seeds are fixed: tensor `s` uses seed `s`, its start uses
//! `START_SEED + s`.

use std::process::ExitCode;
use std::time::Instant;

use rand::Rng;
use tenrank_core::als::{grad_f, objective, singular_value_certificate};
use tenrank_core::cp::{cp_map, BcdOptions};
use tenrank_core::diagnostics::{estimate_lojasiewicz, fit_rate_with, RateOptions};
use tenrank_core::io;
use tenrank_core::oracle::{
    make_test_tensor, matrix_svd_check, spectral_norm_grid, spectral_norm_multistart,
};
use tenrank_core::random::{gaussian_vec, seeded_rng, unit_gaussian_tuple};
use tenrank_core::tensor::{
    frobenius_inner, multilinear_form, outer_rank_one, partial_contraction, tuple_norm,
};
use tenrank_core::*;

const START_SEED: u64 = 10_000;

type Outcome = std::result::Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

fn random_tensor(dims: &[usize], seed: u64) -> DenseTensor {
    make_test_tensor(&TestTensorKind::RandomGaussian, dims, seed).unwrap()
}

fn start(dims: &[usize], s: u64) -> FactorTuple {
    unit_gaussian_tuple(&mut seeded_rng(START_SEED + s), dims)
}

fn c1_multilinear() -> Outcome {
    let mut rng = seeded_rng(1);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let d = rng.random_range(2..=5);
        let dims: Vec<usize> = (0..d).map(|_| rng.random_range(1..=4)).collect();
        let t = DenseTensor::new(dims.clone(), gaussian_vec(&mut rng, dims.iter().product()))
            .map_err(|e| e.to_string())?;
        let x = FactorTuple::new(dims.iter().map(|&n| gaussian_vec(&mut rng, n)).collect()).unwrap();
        let y = FactorTuple::new(dims.iter().map(|&n| gaussian_vec(&mut rng, n)).collect()).unwrap();
        let tx = outer_rank_one(&x);
        let ty = outer_rank_one(&y);

        let norm_law = rel(tx.frobenius_norm(), x.norms().iter().product());
        let inner: f64 = x
            .vectors()
            .iter()
            .zip(y.vectors())
            .map(|(a, b)| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>())
            .product();
        let inner_law = (frobenius_inner(&tx, &ty).unwrap() - inner).abs()
            / (x.norms().iter().product::<f64>() * y.norms().iter().product::<f64>());
        let form = multilinear_form(&t, &x).unwrap();
        let scale = t.frobenius_norm() * x.norms().iter().product::<f64>();
        let mut contraction: f64 = 0.0;
        for mu in 0..d {
            let f = partial_contraction(&t, &x, mu).unwrap();
            let c: f64 = f.iter().zip(x.vector(mu)).map(|(a, b)| a * b).sum();
            contraction = contraction.max((c - form).abs() / scale);
        }
        worst = worst.max(norm_law).max(inner_law).max(contraction);
    }
    ensure(worst <= 1e-12, || format!("max relative deviation {worst:.2e} > 1e-12"))?;
    Ok(format!("200 instances, d in 2..=5, max relative deviation {worst:.1e}"))
}

fn c2_gradient() -> Outcome {
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for s in 0..50u64 {
        let dims: &[usize] = if s % 2 == 0 { &[2, 2, 2] } else { &[3, 3, 3] };
        let t = random_tensor(dims, 200 + s);
        let mut rng = seeded_rng(300 + s);
        let x = FactorTuple::new(dims.iter().map(|&n| gaussian_vec(&mut rng, n)).collect()).unwrap();
        let g = grad_f(&t, &x).unwrap();
        let mut fd = Vec::new();
        for mu in 0..dims.len() {
            let mut col = Vec::new();
            for i in 0..dims[mu] {
                let mut p = x.clone();
                let mut v = x.vector(mu).to_vec();
                v[i] += h;
                p.set_vector(mu, v).unwrap();
                let mut m = x.clone();
                let mut v = x.vector(mu).to_vec();
                v[i] -= h;
                m.set_vector(mu, v).unwrap();
                col.push((objective(&t, &p).unwrap() - objective(&t, &m).unwrap()) / (2.0 * h));
            }
            fd.push(col);
        }
        let fd = FactorTuple::new(fd).unwrap();
        let err = fd.distance(&g) / tuple_norm(&g).max(1e-300);
        worst = worst.max(err);
    }
    ensure(worst <= 1e-6, || format!("max relative error {worst:.2e} > 1e-6"))?;
    Ok(format!("50 points on 2x2x2 and 3x3x3, max relative error {worst:.1e}"))
}

fn c3_audit() -> Outcome {
    let mut total = 0;
    let mut blocks = 0;
    for s in 0..50u64 {
        let dims = [3, 3, 3];
        let t = random_tensor(&dims, s);
        let run = run_als(&t, start(&dims, s), StoppingRule::sweeps(100), true).map_err(|e| e.to_string())?;
        let audit = run.audit.expect("audited run");
        blocks += audit.records.len();
        total += audit.violations.total();
        ensure(audit.pass(), || format!("instance {s}: {:?}, summability {}", audit.violations, audit.summability_pass))?;
    }
    ensure(total == 0, || format!("{total} violations"))?;
    Ok(format!("50 runs x 100 sweeps, {blocks} audited blocks, 0 violations"))
}

fn c4_equivalence() -> Outcome {
    let mut f_dev: f64 = 0.0;
    let mut l_dev: f64 = 0.0;
    for s in 0..25u64 {
        let dims = [3, 3, 3];
        let t = random_tensor(&dims, 400 + s);
        let rep = verify_equivalence(&t, &start(&dims, 400 + s), 50).map_err(|e| e.to_string())?;
        f_dev = f_dev.max(rep.max_factor_deviation);
        l_dev = l_dev.max(rep.max_lambda_deviation);
    }
    ensure(f_dev < 1e-8 && l_dev < 1e-8, || {
        format!("factor deviation {f_dev:.2e}, lambda deviation {l_dev:.2e}")
    })?;
    Ok(format!("25 instances x 50 sweeps, factor dev {f_dev:.1e}, lambda dev {l_dev:.1e}"))
}

fn c5_convergence() -> Outcome {
    let rule = StoppingRule {
        max_sweeps: 500,
        lambda_tol: None,
        grad_tol: Some(1e-10),
        step_tol: None,
    };
    let mut converged = 0;
    let mut worst_res: f64 = 0.0;
    let mut violations = 0;
    for s in 0..50u64 {
        let dims = [3, 3, 3];
        let t = random_tensor(&dims, s);
        let run = run_als(&t, start(&dims, s), rule, true).map_err(|e| e.to_string())?;
        violations += run.audit.as_ref().map_or(0, |a| a.violations.total());
        if run.trace.stop_reason == Some(StopReason::GradTol) {
            converged += 1;
            let (_, res) = singular_value_certificate(&t, &run.state.x).unwrap();
            worst_res = worst_res.max(res);
        }
    }
    ensure(converged >= 45, || format!("only {converged}/50 runs stopped on grad_tol"))?;
    ensure(worst_res < 1e-8, || format!("terminal spherical residual {worst_res:.2e}"))?;
    ensure(violations == 0, || format!("{violations} audit violations"))?;
    Ok(format!("{converged}/50 stopped on grad_tol, max spherical residual {worst_res:.1e}"))
}

fn c6_oracles() -> Outcome {
    let mut worst: f64 = 0.0;
    for s in 0..25u64 {
        let t = random_tensor(&[2, 2, 2], 500 + s);
        let m = spectral_norm_multistart(&t, 64, 600 + s).map_err(|e| e.to_string())?;
        let g = spectral_norm_grid(&t, 512).map_err(|e| e.to_string())?;
        worst = worst.max((m.lambda_star - g.lambda_star).abs());
    }
    ensure(worst <= 1e-4, || format!("multistart vs grid differ by {worst:.2e}"))?;
    let mut worst_svd: f64 = 0.0;
    for s in 0..50u64 {
        let t = random_tensor(&[4, 4], 700 + s);
        let m = spectral_norm_multistart(&t, 64, 800 + s).map_err(|e| e.to_string())?;
        let svd = matrix_svd_check(&t).map_err(|e| e.to_string())?;
        worst_svd = worst_svd.max((m.lambda_star - svd.lambda_star).abs());
    }
    ensure(worst_svd <= 1e-8, || format!("multistart vs SVD differ by {worst_svd:.2e}"))?;
    Ok(format!("grid gap {worst:.1e} (25 tensors), SVD gap {worst_svd:.1e} (50 matrices)"))
}

fn c7_exact() -> Outcome {
    let mut rng = seeded_rng(7);
    for s in 0..20u64 {
        let dims = [2 + (s as usize % 3), 3, 2];
        let x = FactorTuple::new(dims.iter().map(|&n| gaussian_vec(&mut rng, n)).collect()).unwrap();
        let t = outer_rank_one(&x);
        let run = run_als(&t, start(&dims, 900 + s), StoppingRule::default(), false).map_err(|e| e.to_string())?;
        let f = run.state.f_value;
        ensure(run.state.sweep == 2 && f < 1e-20, || {
            format!("rank-one instance {s}: {} sweeps, f = {f:e}", run.state.sweep)
        })?;
    }
    let t = make_test_tensor(&TestTensorKind::Diagonal(vec![3.0, 1.0]), &[2, 2, 2], 0).unwrap();
    let mut worst: f64 = 0.0;
    for s in 0..10u64 {
        let mut rng = seeded_rng(950 + s);
        // Dominant first coordinate in every factor: the e1 basin.
        let y0 = FactorTuple::new(
            (0..3)
                .map(|_| vec![1.0, rng.random_range(-0.9..0.9)])
                .collect(),
        )
        .unwrap();
        let (state, _) = run_hopm(&t, y0, StoppingRule::default()).map_err(|e| e.to_string())?;
        worst = worst.max((state.lambda - 3.0).abs());
    }
    ensure(worst <= 1e-8, || format!("diagonal case: |lambda - 3| = {worst:.2e}"))?;
    Ok(format!("20 rank-one inputs solved in 2 sweeps; diagonal (3,1) |lambda-3| <= {worst:.1e}"))
}

fn c8_rates() -> Outcome {
    let opts = RateOptions::default();
    for q in [0.5f64, 0.9, 0.99] {
        let e: Vec<f64> = (1..=400).map(|k| q.powi(k)).collect();
        let fit = fit_rate_with(&IterationTrace::from_error_proxy(&e), opts).map_err(|e| e.to_string())?;
        let got = fit.q.unwrap_or(f64::NAN);
        ensure(fit.regime == Regime::Linear && (got - q).abs() < 1e-6, || {
            format!("q = {q}: {:?} q = {got}", fit.regime)
        })?;
    }
    for theta in [1.0 / 3.0, 0.2] {
        let p = theta / (1.0 - 2.0 * theta);
        let e: Vec<f64> = (1..=400).map(|k| (k as f64).powf(-p)).collect();
        let fit = fit_rate_with(&IterationTrace::from_error_proxy(&e), opts).map_err(|e| e.to_string())?;
        let got = fit.theta.unwrap_or(f64::NAN);
        ensure(fit.regime == Regime::Sublinear && (got - theta).abs() < 0.02, || {
            format!("theta = {theta}: {:?} theta = {got}", fit.regime)
        })?;
    }

    let mut eligible = 0;
    let mut assigned = 0;
    let mut short = 0;
    let mut worst: f64 = 0.0;
    let mut consistent = 0;
    let mut compared = 0;
    for s in 0..50u64 {
        let dims = [3, 3, 3];
        let t = random_tensor(&dims, s);
        let rule = StoppingRule::sweeps(200).with_grad_tol(1e-12);
        let run = run_als(&t, start(&dims, s), rule, false).map_err(|e| e.to_string())?;
        match fit_rate_with(&run.trace, opts) {
            Err(Error::InsufficientData(_)) => short += 1,
            Err(e) => return Err(e.to_string()),
            Ok(fit) => {
                eligible += 1;
                if fit.regime != Regime::Undetermined {
                    assigned += 1;
                    worst = worst.max(fit.residual);
                }
                if let Ok(l) = estimate_lojasiewicz(&run.trace) {
                    compared += 1;
                    let near_half = (l.theta - 0.5).abs() <= 0.05;
                    if near_half == (fit.regime == Regime::Linear) {
                        consistent += 1;
                    }
                }
            }
        }
    }
    ensure(assigned * 10 >= eligible * 9, || {
        format!("regime assigned on only {assigned}/{eligible} traces")
    })?;
    ensure(worst < 0.5, || format!("log residual {worst:.3} >= 0.5"))?;
    ensure(consistent == compared, || {
        format!("rate/exponent disagreement on {} of {compared} traces", compared - consistent)
    })?;
    Ok(format!(
        "synthetic q and theta recovered; ALS: regime on {assigned}/{eligible} traces \
         ({short} too short), max residual {worst:.2}, theta consistent on {consistent}/{compared}"
    ))
}

fn c9_bcd() -> Outcome {
    let mut worst_f: f64 = 0.0;
    for s in 0..10u64 {
        let dims = [3, 3, 3];
        let t = random_tensor(&dims, 1000 + s);
        let x0 = start(&dims, 1000 + s);
        let rule = StoppingRule::sweeps(100);
        let als = run_als(&t, x0.clone(), rule, false).map_err(|e| e.to_string())?;
        let obj = Objective::least_squares(t, 0.0).unwrap();
        let bcd = run_bcd(&obj, CpFactors::from_rank_one(&x0), rule, BcdOptions::default())
            .map_err(|e| e.to_string())?;
        let fa = als.trace.f_values();
        let fb = bcd.trace.trace.f_values();
        ensure(fa.len() == fb.len(), || format!("instance {s}: sweep counts differ"))?;
        for (a, b) in fa.iter().zip(&fb) {
            worst_f = worst_f.max((a - b).abs());
        }
    }
    ensure(worst_f <= 1e-12, || format!("rank-1 BCD vs ALS f deviation {worst_f:.2e}"))?;

    let mut max_sweeps = 0;
    for s in 0..10u64 {
        let t = random_tensor(&[3, 3, 3], 1100 + s);
        let obj = Objective::least_squares(t, 0.1).unwrap();
        let x0 = CpFactors::random(&[3, 3, 3], 2, &mut seeded_rng(START_SEED + 1100 + s)).unwrap();
        let rule = StoppingRule::sweeps(2000).with_step_tol(1e-10);
        let run = run_bcd(&obj, x0, rule, BcdOptions::default()).map_err(|e| e.to_string())?;
        let tr = &run.trace;
        let last = tr.trace.sweeps().last().map_or(f64::NAN, |r| r.step_norm);
        ensure(tr.decrease_violations == 0 && tr.monotone_violations == 0, || {
            format!("target {s}: {} decrease, {} monotone violations", tr.decrease_violations, tr.monotone_violations)
        })?;
        ensure(last < 1e-10, || format!("target {s}: terminal step {last:e}"))?;
        ensure(tr.gamma0 == 1.0, || "gamma0 != 1".into())?;
        max_sweeps = max_sweeps.max(tr.trace.num_sweeps());
    }

    let x = unit_gaussian_tuple(&mut seeded_rng(1200), &[3, 3, 3]);
    let target = outer_rank_one(&x).scaled(2.0);
    let obj = Objective::least_squares(target, 0.0).unwrap();
    let x0 = CpFactors::random(&[3, 3, 3], 2, &mut seeded_rng(1201)).unwrap();
    let options = BcdOptions {
        strict: false,
        ..BcdOptions::default()
    };
    let run = run_bcd(&obj, x0, StoppingRule::sweeps(200), options).map_err(|e| e.to_string())?;
    ensure(run.trace.stability_warning, || {
        format!("no stability warning, min sigma {:?}", run.trace.min_sigma)
    })?;
    Ok(format!(
        "rank-1 f deviation {worst_f:.1e}; regularized r=2 runs converged within {max_sweeps} sweeps; \
         overestimated rank warns (min sigma {:.1e})",
        run.trace.min_sigma.unwrap_or(f64::NAN)
    ))
}

fn c10_determinism_io() -> Outcome {
    let dims = [3, 2, 3];
    let t = random_tensor(&dims, 77);
    let traces = |seed: u64| -> std::result::Result<Vec<String>, String> {
        let x0 = start(&dims, seed);
        let als = run_als(&t, x0.clone(), StoppingRule::default(), true).map_err(|e| e.to_string())?;
        let (_, hopm) = run_hopm(&t, x0.normalized(), StoppingRule::default()).map_err(|e| e.to_string())?;
        let obj = Objective::least_squares(t.clone(), 0.1).unwrap();
        let f0 = CpFactors::random(&dims, 2, &mut seeded_rng(seed)).unwrap();
        let bcd = run_bcd(&obj, f0, StoppingRule::sweeps(50), BcdOptions::default()).map_err(|e| e.to_string())?;
        Ok(vec![
            io::format_trace(&als.trace),
            io::format_trace(&hopm),
            io::format_trace(&bcd.trace.trace),
        ])
    };
    ensure(traces(5)? == traces(5)?, || "traces differ between identical runs".into())?;

    let mut rng = seeded_rng(10);
    for s in 0..20u64 {
        let d = rng.random_range(2..=4);
        let dims: Vec<usize> = (0..d).map(|_| rng.random_range(1..=4)).collect();
        let t = random_tensor(&dims, 2000 + s);
        let back = io::parse_tensor(&io::format_tensor(&t)).map_err(|e| e.to_string())?;
        ensure(back == t, || format!("tensor {s} changed in round trip"))?;

        let cp = CpFactors::random(&dims, 1 + s as usize % 3, &mut rng).unwrap();
        let back = io::parse_cp_factors(&io::format_cp_factors(&cp)).map_err(|e| e.to_string())?;
        ensure(back == cp, || format!("CP factors {s} changed in round trip"))?;
        ensure(cp_map(&back) == cp_map(&cp), || "CP map differs".into())?;

        let n: usize = dims.iter().product();
        let g = nalgebra::DMatrix::from_vec(n, n, gaussian_vec(&mut rng, n * n));
        let a = &g * g.transpose();
        let a = (&a + a.transpose()) * 0.5;
        let back = io::parse_operator(&io::format_operator(&a)).map_err(|e| e.to_string())?;
        ensure(back == a, || format!("operator {s} changed in round trip"))?;

        let run = run_als(&t, start(&dims, 2000 + s), StoppingRule::default(), true).map_err(|e| e.to_string())?;
        let text = io::format_trace(&run.trace);
        let back = io::parse_trace(&text).map_err(|e| e.to_string())?;
        ensure(back == run.trace, || format!("trace {s} changed in round trip"))?;
    }
    Ok("identical seeds give byte-identical ALS/HOPM/BCD traces; 20 x 4 artifacts round-trip exactly".into())
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("C1 multilinear identities", c1_multilinear),
        ("C2 gradient vs finite differences", c2_gradient),
        ("C3 ALS invariant audit", c3_audit),
        ("C4 HOPM/ALS equivalence", c4_equivalence),
        ("C5 ALS convergence", c5_convergence),
        ("C6 oracle agreement", c6_oracles),
        ("C7 exact cases", c7_exact),
        ("C8 rate diagnostics", c8_rates),
        ("C9 BCD reduction and regimes", c9_bcd),
        ("C10 determinism and I/O", c10_determinism_io),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let t0 = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = t0.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("[PASS] {name}: {detail} ({secs:.2}s)"),
            Err(detail) => {
                failed += 1;
                println!("[FAIL] {name}: {detail} ({secs:.2}s)");
            }
        }
    }
    println!("{} of 10 criteria passed", 10 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
