//! Post-hoc analysis of iteration traces.
//!
//! The distance `‖x_* − x_k‖` is not observable during a run, so rate fits use
//! the tail sum of step norms `e_k = Σ_{j≥k} ‖x_{j+1} − x_j‖`, which bounds it
//! from above.

pub mod trace;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use trace::{IterationTrace, StopReason};

/// Minimum number of usable sweeps for any regression.
pub const MIN_FIT_SWEEPS: usize = 20;
/// A model wins only if its residual is below `1 − REGIME_MARGIN` times the other.
pub const REGIME_MARGIN: f64 = 0.10;
pub const SUMMABILITY_SLACK: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    Linear,
    Sublinear,
    Undetermined,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub regime: Regime,
    /// Contraction factor of the linear model.
    pub q: Option<f64>,
    /// Exponent implied by the winning model (1/2 for linear).
    pub theta: Option<f64>,
    pub lambda_coef: Option<f64>,
    /// Inclusive sweep range of the fit.
    pub fit_window: (usize, usize),
    /// RMS log-domain residual of the winning model (of the better one when
    /// undetermined).
    pub residual: f64,
    pub linear_residual: f64,
    pub sublinear_residual: f64,
    /// Set when the sublinear slope implied an exponent outside `(0, 1/2]`.
    pub theta_clamped: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateOptions {
    /// Fraction of usable sweeps, counted from the end, used for the fit.
    pub window_fraction: f64,
    /// Tail sums below `noise_floor · e_1` are treated as rounding noise.
    pub noise_floor: f64,
}

impl Default for RateOptions {
    fn default() -> Self {
        Self {
            window_fraction: 0.5,
            noise_floor: 1e-13,
        }
    }
}

/// Tail sums `e_k` of the per-sweep step norms.
pub fn error_proxy(trace: &IterationTrace) -> Vec<f64> {
    let steps = trace.step_norms();
    let mut e = vec![0.0; steps.len()];
    let mut acc = 0.0;
    for k in (0..steps.len()).rev() {
        acc += steps[k];
        e[k] = acc;
    }
    e
}

struct LineFit {
    slope: f64,
    intercept: f64,
    rms: f64,
}

fn least_squares_line(x: &[f64], y: &[f64]) -> LineFit {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = my - slope * mx;
    let rss: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| {
            let r = b - (slope * a + intercept);
            r * r
        })
        .sum();
    LineFit {
        slope,
        intercept,
        rms: (rss / n).sqrt(),
    }
}

pub fn fit_rate(trace: &IterationTrace) -> Result<RateFit> {
    fit_rate_with(trace, RateOptions::default())
}

pub fn fit_rate_with(trace: &IterationTrace, options: RateOptions) -> Result<RateFit> {
    if !(options.window_fraction > 0.0 && options.window_fraction <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "window fraction must lie in (0, 1], got {}",
            options.window_fraction
        )));
    }
    let e = error_proxy(trace);
    let sweeps: Vec<usize> = trace.sweeps().iter().map(|s| s.sweep).collect();
    let floor = e.first().copied().unwrap_or(0.0) * options.noise_floor;
    let usable: Vec<(f64, f64)> = sweeps
        .iter()
        .zip(&e)
        .filter(|(_, &v)| v > 0.0 && v > floor)
        .map(|(&k, &v)| (k as f64, v))
        .collect();
    if usable.len() < MIN_FIT_SWEEPS {
        return Err(Error::InsufficientData(format!(
            "{} sweeps with a positive error proxy, need {MIN_FIT_SWEEPS}",
            usable.len()
        )));
    }
    let take = ((usable.len() as f64 * options.window_fraction).ceil() as usize).max(2);
    let window = &usable[usable.len() - take..];
    let ks: Vec<f64> = window.iter().map(|p| p.0).collect();
    let log_k: Vec<f64> = ks.iter().map(|k| k.ln()).collect();
    let log_e: Vec<f64> = window.iter().map(|p| p.1.ln()).collect();

    let lin = least_squares_line(&ks, &log_e);
    let sub = least_squares_line(&log_k, &log_e);

    let mut fit = RateFit {
        regime: Regime::Undetermined,
        q: None,
        theta: None,
        lambda_coef: None,
        fit_window: (ks[0] as usize, ks[ks.len() - 1] as usize),
        residual: lin.rms.min(sub.rms),
        linear_residual: lin.rms,
        sublinear_residual: sub.rms,
        theta_clamped: false,
    };
    let q = lin.slope.exp();
    if lin.rms < (1.0 - REGIME_MARGIN) * sub.rms && q < 1.0 {
        fit.regime = Regime::Linear;
        fit.q = Some(q);
        fit.theta = Some(0.5);
        fit.residual = lin.rms;
    } else if sub.rms < (1.0 - REGIME_MARGIN) * lin.rms && sub.slope < 0.0 {
        // e_k ~ k^{-p} with p = θ/(1 − 2θ).
        let p = -sub.slope;
        let theta = p / (1.0 + 2.0 * p);
        let (theta, clamped) = clamp_theta(theta);
        fit.regime = Regime::Sublinear;
        fit.theta = Some(theta);
        fit.theta_clamped = clamped;
        fit.residual = sub.rms;
    }
    if let Ok(l) = estimate_lojasiewicz(trace) {
        fit.lambda_coef = Some(l.lambda_coef);
    }
    Ok(fit)
}

fn clamp_theta(theta: f64) -> (f64, bool) {
    if theta > 0.5 {
        (0.5, true)
    } else if !(theta > 0.0) {
        (f64::MIN_POSITIVE, true)
    } else {
        (theta, false)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LojasiewiczFit {
    pub theta: f64,
    pub lambda_coef: f64,
    pub residual: f64,
    pub points: usize,
    pub theta_clamped: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LojasiewiczOptions {
    /// Largest terminal gradient norm accepted as converged.
    pub grad_tol: f64,
}

impl Default for LojasiewiczOptions {
    fn default() -> Self {
        Self { grad_tol: 1e-6 }
    }
}

pub fn estimate_lojasiewicz(trace: &IterationTrace) -> Result<LojasiewiczFit> {
    estimate_lojasiewicz_with(trace, LojasiewiczOptions::default())
}

/// Regresses `log ‖∇f(x_k)‖` on `log(f_k − f_*)`; the slope estimates `1 − θ`
/// and the intercept `−log Λ`.
pub fn estimate_lojasiewicz_with(
    trace: &IterationTrace,
    options: LojasiewiczOptions,
) -> Result<LojasiewiczFit> {
    let term = trace
        .terminal
        .as_ref()
        .ok_or_else(|| Error::InsufficientData("trace has no terminal summary".into()))?;
    let f_star = term.f_star;
    if let Some(g) = term.grad_norm {
        if !(g <= options.grad_tol) {
            return Err(Error::NotConverged {
                grad_norm: g,
                tol: options.grad_tol,
            });
        }
    }
    let floor = 10.0 * f64::EPSILON * f_star.abs();
    let (x, y): (Vec<f64>, Vec<f64>) = trace
        .sweeps()
        .iter()
        .filter_map(|s| {
            let gap = s.f - f_star;
            let g = s.grad_norm?;
            (gap > floor && gap > 0.0 && g > 0.0).then(|| (gap.ln(), g.ln()))
        })
        .unzip();
    if x.len() < MIN_FIT_SWEEPS {
        return Err(Error::InsufficientData(format!(
            "{} sweeps above the objective noise floor, need {MIN_FIT_SWEEPS}",
            x.len()
        )));
    }
    let fit = least_squares_line(&x, &y);
    let (theta, clamped) = clamp_theta(1.0 - fit.slope);
    Ok(LojasiewiczFit {
        theta,
        lambda_coef: (-fit.intercept).exp(),
        residual: fit.rms,
        points: x.len(),
        theta_clamped: clamped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummabilityReport {
    pub sum_sq: f64,
    /// `(2/σ₀)(f₀ − f_*) + slack`; absent when the trace records no `σ₀`.
    pub bound: Option<f64>,
    pub sigma0: Option<f64>,
    pub steps_vanish: bool,
    pub pass: bool,
}

/// Checks `Σ ‖x_{k+1} − x_k‖² ≤ (2/σ₀)(f₀ − f_*)` and that the steps shrink.
/// With `step_tol` given, the last step must also be at most `step_tol`.
pub fn check_summability(trace: &IterationTrace, step_tol: Option<f64>) -> SummabilityReport {
    let steps = trace.step_norms();
    let sum_sq: f64 = steps.iter().map(|s| s * s).sum();
    let sigma0 = trace.header.sigma0.or_else(|| {
        trace
            .blocks()
            .iter()
            .filter_map(|b| b.gamma_bound_used)
            .filter(|g| *g > 0.0)
            .reduce(f64::min)
    });
    let f_star = trace
        .terminal
        .as_ref()
        .map(|t| t.f_star)
        .or_else(|| trace.f_values().last().copied())
        .unwrap_or(trace.header.f0);
    let bound = sigma0
        .filter(|s| *s > 0.0)
        .map(|s| 2.0 / s * (trace.header.f0 - f_star) + SUMMABILITY_SLACK);

    if steps.len() <= 1 {
        return SummabilityReport {
            sum_sq,
            bound,
            sigma0,
            steps_vanish: true,
            pass: true,
        };
    }
    let first = steps[0];
    let last = steps[steps.len() - 1];
    let steps_vanish = (last < first || last == 0.0) && step_tol.is_none_or(|tol| last <= tol);
    let pass = steps_vanish && bound.is_some_and(|b| sum_sq <= b);
    SummabilityReport {
        sum_sq,
        bound,
        sigma0,
        steps_vanish,
        pass,
    }
}

/// Upper bound on the diameter of the last quarter of iterates: the sum of
/// the step norms taken inside it.
pub fn tail_diameter_bound(trace: &IterationTrace) -> f64 {
    let steps = trace.step_norms();
    let n = steps.len();
    // Step k joins x_{k-1} and x_k, so the last n/4 steps join the last quarter.
    steps[n - n / 4..].iter().sum()
}

/// One row of the plotting table `(k, e_k, f_k − f_*, ‖∇f‖)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateRow {
    pub k: usize,
    pub e_k: f64,
    pub f_gap: f64,
    pub grad_norm: Option<f64>,
}

pub fn rate_table(trace: &IterationTrace) -> Vec<RateRow> {
    let e = error_proxy(trace);
    let f_star = trace.terminal.as_ref().map(|t| t.f_star);
    trace
        .sweeps()
        .iter()
        .zip(e)
        .map(|(s, e_k)| RateRow {
            k: s.sweep,
            e_k,
            f_gap: f_star.map_or(f64::NAN, |f| s.f - f),
            grad_norm: s.grad_norm,
        })
        .collect()
}

/// The combined report written by the `diagnose` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticReport {
    pub regime: Regime,
    pub q: Option<f64>,
    pub theta: Option<f64>,
    pub lambda_coef: Option<f64>,
    pub residual: f64,
    pub fit_window: (usize, usize),
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lojasiewicz_theta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop_reason: Option<StopReason>,
    pub summability: SummabilityReport,
}

pub fn diagnose(trace: &IterationTrace, step_tol: Option<f64>) -> Result<DiagnosticReport> {
    let fit = fit_rate(trace)?;
    let loj = estimate_lojasiewicz(trace).ok();
    Ok(DiagnosticReport {
        regime: fit.regime,
        q: fit.q,
        theta: fit.theta,
        lambda_coef: fit.lambda_coef,
        residual: fit.residual,
        fit_window: fit.fit_window,
        lojasiewicz_theta: loj.map(|l| l.theta),
        stop_reason: trace.stop_reason,
        summability: check_summability(trace, step_tol),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn geometric(q: f64, n: usize) -> IterationTrace {
        let e: Vec<f64> = (1..=n).map(|k| q.powi(k as i32)).collect();
        IterationTrace::from_error_proxy(&e)
    }

    #[test]
    fn linear_rates_are_recovered() {
        for (q, n) in [(0.5, 40), (0.9, 200), (0.99, 400)] {
            let fit = fit_rate(&geometric(q, n)).unwrap();
            assert_eq!(fit.regime, Regime::Linear);
            assert!((fit.q.unwrap() - q).abs() < 1e-6, "q {q}: {:?}", fit.q);
        }
    }

    #[test]
    fn harmonic_decay_is_sublinear_with_theta_one_third() {
        let e: Vec<f64> = (1..=400).map(|k| 1.0 / k as f64).collect();
        let fit = fit_rate(&IterationTrace::from_error_proxy(&e)).unwrap();
        assert_eq!(fit.regime, Regime::Sublinear);
        assert!((fit.theta.unwrap() - 1.0 / 3.0).abs() < 0.02);
    }

    #[test]
    fn exponent_map_round_trips() {
        for theta in [0.05, 0.1, 0.25, 0.4, 0.45] {
            let p = theta / (1.0 - 2.0 * theta);
            let e: Vec<f64> = (1..=300).map(|k| (k as f64).powf(-p)).collect();
            let fit = fit_rate(&IterationTrace::from_error_proxy(&e)).unwrap();
            assert_eq!(fit.regime, Regime::Sublinear);
            let t = fit.theta.unwrap();
            assert!((t / (1.0 - 2.0 * t) - p).abs() < 1e-8, "theta {theta}: {t}");
        }
    }

    #[test]
    fn short_traces_are_rejected() {
        assert!(matches!(fit_rate(&geometric(0.5, 5)), Err(Error::InsufficientData(_))));
    }

    fn descent_trace(f: impl Fn(f64) -> f64, g: impl Fn(f64) -> f64, xs: &[f64], scale: f64) -> IterationTrace {
        let rows: Vec<(f64, f64, f64)> = xs
            .windows(2)
            .map(|w| (scale * f(w[1]), (w[0] - w[1]).abs(), scale * g(w[1])))
            .collect();
        let mut t = IterationTrace::synthetic(scale * f(xs[0]), &rows, 0.0);
        if let Some(term) = t.terminal.as_mut() {
            term.grad_norm = Some(0.0);
        }
        t
    }

    #[test]
    fn quadratic_model_gives_one_half() {
        // Gradient descent on x² with step 0.1: x ← 0.8 x.
        let xs: Vec<f64> = (0..60).map(|k| 0.8f64.powi(k)).collect();
        let t = descent_trace(|x| x * x, |x| 2.0 * x, &xs, 1.0);
        let l = estimate_lojasiewicz(&t).unwrap();
        assert!((l.theta - 0.5).abs() < 0.02);
        assert_eq!(fit_rate(&t).unwrap().regime, Regime::Linear);
    }

    #[test]
    fn quartic_model_gives_one_quarter() {
        let xs: Vec<f64> = (1..=400).map(|k| 1.0 / (k as f64).sqrt()).collect();
        let t = descent_trace(|x| x.powi(4), |x| 4.0 * x.powi(3), &xs, 1.0);
        let l = estimate_lojasiewicz(&t).unwrap();
        assert!((l.theta - 0.25).abs() < 0.02, "{}", l.theta);
    }

    #[test]
    fn lojasiewicz_scaling() {
        let xs: Vec<f64> = (1..=200).map(|k| 1.0 / (k as f64).sqrt()).collect();
        let base = estimate_lojasiewicz(&descent_trace(|x| x.powi(4), |x| 4.0 * x.powi(3), &xs, 1.0)).unwrap();
        for c in [0.01, 3.0, 250.0] {
            let s = estimate_lojasiewicz(&descent_trace(|x| x.powi(4), |x| 4.0 * x.powi(3), &xs, c)).unwrap();
            assert!((s.theta - base.theta).abs() < 1e-6);
            assert_abs_diff_eq!(s.lambda_coef, base.lambda_coef * c.powf(-base.theta), epsilon = 1e-8 * base.lambda_coef);
        }
    }

    #[test]
    fn unconverged_trace_is_refused() {
        let rows: Vec<(f64, f64, f64)> = (0..30).map(|k| (1.0 / (k + 1) as f64, 0.1, 1.0)).collect();
        let t = IterationTrace::synthetic(2.0, &rows, 0.0);
        assert!(matches!(estimate_lojasiewicz(&t), Err(Error::NotConverged { .. })));
    }

    #[test]
    fn summability_cases() {
        let mut constant = IterationTrace::synthetic(1.0, &[(0.5, 1.0, 1.0); 10], 0.5);
        constant.header.sigma0 = Some(1.0);
        let r = check_summability(&constant, None);
        assert!(!r.pass);
        assert_eq!(r.sum_sq, 10.0);

        let mut single = IterationTrace::synthetic(1.0, &[(0.5, 0.3, 0.1)], 0.5);
        single.header.sigma0 = Some(1.0);
        let r = check_summability(&single, None);
        assert!(r.pass);
        assert_abs_diff_eq!(r.sum_sq, 0.09, epsilon = 1e-15);

        let rows: Vec<(f64, f64, f64)> = (1..=20).map(|k| (1.0 / k as f64, 0.5f64.powi(k), 0.0)).collect();
        let mut good = IterationTrace::synthetic(2.0, &rows, 0.05);
        good.header.sigma0 = Some(1.0);
        assert!(check_summability(&good, Some(1e-5)).pass);
        assert!(!check_summability(&good, Some(1e-12)).pass);
    }

    #[test]
    fn tail_diameter_sums_last_quarter() {
        let t = IterationTrace::from_error_proxy(&[8.0, 4.0, 2.0, 1.0, 0.5, 0.25, 0.125, 0.0625]);
        assert_eq!(tail_diameter_bound(&t), 0.125);
    }

    #[test]
    fn rate_table_rows() {
        let t = geometric(0.5, 4);
        let rows = rate_table(&t);
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[0].k, 1);
        assert_eq!(rows[0].e_k, 0.5);
    }
}
