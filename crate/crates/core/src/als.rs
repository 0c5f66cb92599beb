//! Rank-one alternating least squares on `f(x) = ½‖T − τ₁(x)‖²`.
//!
//! The factors are never normalized during the iteration. Block `μ` is
//! replaced by the exact minimizer `F^μ(x) / ∏_{ν≠μ} ‖x^ν‖²`.
//!
//! An audited run checks after every block update:
//!
//! | flag  | property                                                                |
//! |-------|-------------------------------------------------------------------------|
//! | `p33` | `‖T‖² = ‖τ₁(x)‖² + ‖T − τ₁(x)‖²`                                        |
//! | `p34` | `‖τ₁(x)‖` does not decrease from one block update to the next          |
//! | `p35` | the norm of the updated block does not decrease                         |
//! | `p36` | `‖x₀^μ‖ ≤ ‖x^μ‖ ≤ ‖T‖ ∏_{ν≠μ} ‖x₀^ν‖⁻¹` for every mode                  |
//! | `p37` | block decrease equals `(σ/2)‖Δx^μ‖²`, `σ = ∏_{ν≠μ} ‖x^ν‖²`               |
//! | `p38` | sweep decrease is at least `(σ₀/2)‖x_{k+1} − x_k‖²`, `σ₀ = min_μ σ₁^μ` |
//!
//! The starting tuple recorded in the trace is the input with its first block
//! replaced by the first ALS update. The first block of the input does not
//! enter that update, so the sequence of iterates is unchanged.

use serde::{Deserialize, Serialize};

use crate::diagnostics::trace::{
    BlockRecord, Checks, IterationTrace, Method, TraceHeader,
};
use crate::error::{Error, Result};
use crate::hopm::{hopm_sweep, HopmState, StoppingRule};
use crate::tensor::{
    norm, outer_rank_one, partial_contraction, tuple_norm, DenseTensor, FactorTuple,
};

/// Absolute slack on the monotonicity and bound checks.
pub const MONOTONE_SLACK: f64 = 1e-10;
/// Relative tolerance of the Pythagoras check.
pub const PYTHAGORAS_RTOL: f64 = 1e-10;
/// Relative tolerance of the block decrease identity.
pub const DECREASE_RTOL: f64 = 1e-9;
/// Gradient norms below this multiple of `max(1, ‖T‖)` are rounding noise and
/// are skipped when forming the step/gradient ratio.
pub const KAPPA_GRAD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct AlsState {
    pub x: FactorTuple,
    pub sweep: usize,
    pub f_value: f64,
}

impl AlsState {
    pub fn start(t: &DenseTensor, x0: FactorTuple) -> Result<Self> {
        let f_value = objective(t, &x0)?;
        Ok(Self {
            x: x0,
            sweep: 0,
            f_value,
        })
    }
}

/// `½‖T − τ₁(x)‖²`, evaluated entrywise.
pub fn objective(t: &DenseTensor, x: &FactorTuple) -> Result<f64> {
    check_dims(t, x)?;
    let r = outer_rank_one(x);
    Ok(0.5
        * t.as_slice()
            .iter()
            .zip(r.as_slice())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>())
}

/// `f(a) − f(b)` evaluated as `½⟨τ₁(b) − τ₁(a), 2T − τ₁(a) − τ₁(b)⟩`, which
/// keeps the absolute error proportional to `‖τ₁(b) − τ₁(a)‖` instead of `f`.
pub fn objective_decrease(t: &DenseTensor, a: &FactorTuple, b: &FactorTuple) -> Result<f64> {
    check_dims(t, a)?;
    check_dims(t, b)?;
    let ta = outer_rank_one(a);
    let tb = outer_rank_one(b);
    Ok(0.5
        * t.as_slice()
            .iter()
            .zip(ta.as_slice().iter().zip(tb.as_slice()))
            .map(|(f, (p, q))| (q - p) * (2.0 * f - p - q))
            .sum::<f64>())
}

fn check_dims(t: &DenseTensor, x: &FactorTuple) -> Result<()> {
    if t.dims() != x.dims().as_slice() {
        return Err(Error::DimensionMismatch(format!(
            "tensor dims {:?} vs factor lengths {:?}",
            t.dims(),
            x.dims()
        )));
    }
    Ok(())
}

/// `∏_{ν≠μ} ‖x^ν‖²`.
fn block_sigma(norms: &[f64], mu: usize) -> f64 {
    norms
        .iter()
        .enumerate()
        .filter(|&(nu, _)| nu != mu)
        .map(|(_, n)| n * n)
        .product()
}

/// Exact minimizer of `x^μ ↦ f(…, x^μ, …)` with the other blocks fixed.
pub fn als_update(t: &DenseTensor, x: &FactorTuple, mu: usize) -> Result<Vec<f64>> {
    let g = partial_contraction(t, x, mu)?;
    let norms = x.norms();
    if let Some(nu) = (0..norms.len()).find(|&nu| nu != mu && norms[nu] == 0.0) {
        return Err(Error::DegenerateBlock {
            mode: mu,
            reason: format!("block {nu} is zero"),
        });
    }
    let sigma = block_sigma(&norms, mu);
    Ok(g.iter().map(|v| v / sigma).collect())
}

/// Block gradients `(∏_{ν≠μ} ‖x^ν‖²) x^μ − F^μ(x)`.
pub fn grad_f(t: &DenseTensor, x: &FactorTuple) -> Result<FactorTuple> {
    check_dims(t, x)?;
    let norms = x.norms();
    let blocks = (0..x.order())
        .map(|mu| {
            let g = partial_contraction(t, x, mu)?;
            let sigma = block_sigma(&norms, mu);
            Ok(x
                .vector(mu)
                .iter()
                .zip(&g)
                .map(|(xi, gi)| sigma * xi - gi)
                .collect())
        })
        .collect::<Result<Vec<_>>>()?;
    FactorTuple::new(blocks)
}

pub fn grad_norm(t: &DenseTensor, x: &FactorTuple) -> Result<f64> {
    Ok(tuple_norm(&grad_f(t, x)?))
}

/// Data captured for one block update of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockUpdate {
    pub mode: usize,
    /// `σ = ∏_{ν≠μ} ‖x^ν‖²` at the time of the update.
    pub sigma: f64,
    pub step_norm: f64,
    /// `f` after the update.
    pub f_after: f64,
    /// `f(before) − f(after)`, see [`objective_decrease`].
    pub decrease: f64,
    /// `‖τ₁(x)‖ = ∏_ν ‖x^ν‖` after the update.
    pub rank_one_norm: f64,
    /// Tuple after the update.
    pub x_after: FactorTuple,
}

/// One ALS sweep over all modes in order.
pub fn als_sweep(t: &DenseTensor, state: &AlsState) -> Result<(AlsState, Vec<BlockUpdate>)> {
    let mut x = state.x.clone();
    let mut updates = Vec::with_capacity(x.order());
    for mu in 0..x.order() {
        let before = x.clone();
        let norms = x.norms();
        let sigma = block_sigma(&norms, mu);
        let new = als_update(t, &x, mu)?;
        let step_norm = norm(
            &new.iter()
                .zip(x.vector(mu))
                .map(|(a, b)| a - b)
                .collect::<Vec<_>>(),
        );
        x.set_vector(mu, new)?;
        let decrease = objective_decrease(t, &before, &x)?;
        let f_after = objective(t, &x)?;
        let rank_one_norm = x.norms().iter().product();
        updates.push(BlockUpdate {
            mode: mu,
            sigma,
            step_norm,
            f_after,
            decrease,
            rank_one_norm,
            x_after: x.clone(),
        });
    }
    let f_value = updates.last().map(|u| u.f_after).unwrap_or(state.f_value);
    Ok((
        AlsState {
            x,
            sweep: state.sweep + 1,
            f_value,
        },
        updates,
    ))
}

/// Quantities checked for one block update of an audited run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub sweep: usize,
    pub mode: usize,
    /// `|‖T‖² − ‖τ₁(x)‖² − ‖T − τ₁(x)‖²| / ‖T‖²`.
    pub pythagoras_residual: f64,
    pub rank_one_norm: f64,
    pub factor_norms: Vec<f64>,
    pub factor_norm_upper_bounds: Vec<f64>,
    pub sigma: f64,
    /// `|Δf − (σ/2)‖Δx^μ‖²|`.
    pub decrease_residual: f64,
    pub checks: Checks,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViolationCounts {
    pub p33: usize,
    pub p34: usize,
    pub p35: usize,
    pub p36: usize,
    pub p37: usize,
    pub p38: usize,
}

impl ViolationCounts {
    pub fn total(&self) -> usize {
        self.p33 + self.p34 + self.p35 + self.p36 + self.p37 + self.p38
    }

    fn add(&mut self, c: &Checks) {
        self.p33 += usize::from(!c.p33);
        self.p34 += usize::from(!c.p34);
        self.p35 += usize::from(!c.p35);
        self.p36 += usize::from(!c.p36);
        self.p37 += usize::from(!c.p37);
        self.p38 += usize::from(!c.p38);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub records: Vec<AuditRecord>,
    pub violations: ViolationCounts,
    /// `min_μ σ₁^μ`.
    pub sigma0: f64,
    /// Running minimum of `‖x_{k+1} − x_k‖ / ‖∇f(x_k)‖` over sweeps whose
    /// gradient is above rounding level.
    pub kappa_hat: Option<f64>,
    pub sum_sq_steps: f64,
    /// `(2/σ₀)(f(x₀) − f(x_K))`.
    pub summability_bound: f64,
    pub summability_pass: bool,
}

impl AuditReport {
    /// No invariant violations and square-summable steps.
    pub fn pass(&self) -> bool {
        self.violations.total() == 0 && self.summability_pass
    }
}

/// Outcome of [`run_als`].
#[derive(Debug, Clone)]
pub struct AlsRun {
    pub state: AlsState,
    pub trace: IterationTrace,
    pub audit: Option<AuditReport>,
    /// `f` at the caller's start, before the first-block adjustment.
    pub f_start: f64,
}

pub fn run_als(
    t: &DenseTensor,
    x0: FactorTuple,
    rule: StoppingRule,
    audit: bool,
) -> Result<AlsRun> {
    rule.validate()?;
    check_dims(t, &x0)?;
    let first = partial_contraction(t, &x0, 0)?;
    if first.iter().all(|&v| v == 0.0) {
        return Err(Error::BadStart(
            "first partial contraction of the start vanishes".into(),
        ));
    }
    let f_start = objective(t, &x0)?;

    // x₀¹ := x₁¹
    let mut x0 = x0;
    let x11 = als_update(t, &x0, 0)?;
    x0.set_vector(0, x11)?;

    let t_norm = t.frobenius_norm();
    let t_norm_sq = t_norm * t_norm;
    let x0_norms = x0.norms();
    let upper_bounds: Vec<f64> = (0..x0.order())
        .map(|mu| {
            let others: f64 = x0_norms
                .iter()
                .enumerate()
                .filter(|&(nu, _)| nu != mu)
                .map(|(_, n)| n)
                .product();
            t_norm / others
        })
        .collect();

    let mut state = AlsState::start(t, x0)?;
    let mut grad = grad_norm(t, &state.x)?;
    let mut lambda: f64 = x0_norms.iter().product();

    let mut header = TraceHeader::new(Method::Als, t.dims().to_vec(), state.f_value);
    header.lambda0 = Some(lambda);
    header.grad_norm0 = Some(grad);
    let mut trace = IterationTrace::new(header);

    let f0 = state.f_value;
    let mut sigma0 = f64::INFINITY;
    let mut records = Vec::new();
    let mut violations = ViolationCounts::default();
    let mut kappa_hat: Option<f64> = None;
    let mut sum_sq_steps = 0.0;
    let kappa_floor = KAPPA_GRAD_FLOOR * t_norm.max(1.0);

    loop {
        let prev = state.clone();
        let prev_lambda = lambda;
        let (next, updates) = als_sweep(t, &state)?;
        if next.sweep == 1 {
            sigma0 = updates.iter().map(|u| u.sigma).fold(f64::INFINITY, f64::min);
            trace.header.sigma0 = Some(sigma0);
        }
        let sweep_step = next.x.distance(&prev.x);
        sum_sq_steps += sweep_step * sweep_step;

        let d = updates.len();
        let mut block_lambda = prev_lambda;
        let mut prev_norms = prev.x.norms();
        for (i, u) in updates.iter().enumerate() {
            let mut rec = BlockRecord::new(next.sweep, u.mode, u.f_after, u.step_norm);
            rec.lambda = Some(u.rank_one_norm);
            rec.sigma_block = Some(u.sigma);
            let g = grad_norm(t, &u.x_after)?;
            rec.grad_norm = Some(g);

            if audit {
                let norms = u.x_after.norms();
                let pyth = (t_norm_sq - u.rank_one_norm.powi(2) - 2.0 * u.f_after).abs()
                    / t_norm_sq;
                let model = 0.5 * u.sigma * u.step_norm * u.step_norm;
                let dec_res = (u.decrease - model).abs();
                let p38 = if i + 1 == d {
                    prev.f_value - next.f_value
                        >= 0.5 * sigma0 * sweep_step * sweep_step - MONOTONE_SLACK
                } else {
                    true
                };
                let checks = Checks {
                    p33: pyth <= PYTHAGORAS_RTOL,
                    p34: u.rank_one_norm >= block_lambda - MONOTONE_SLACK,
                    p35: norms[u.mode] >= prev_norms[u.mode] - MONOTONE_SLACK,
                    p36: norms.iter().zip(&x0_norms).zip(&upper_bounds).all(
                        |((n, lo), hi)| *n >= lo - MONOTONE_SLACK && *n <= hi + MONOTONE_SLACK,
                    ),
                    p37: dec_res
                        <= DECREASE_RTOL * u.decrease.abs().max(model) + decrease_floor(t_norm_sq),
                    p38,
                };
                violations.add(&checks);
                rec.checks = Some(checks);
                records.push(AuditRecord {
                    sweep: next.sweep,
                    mode: u.mode,
                    pythagoras_residual: pyth,
                    rank_one_norm: u.rank_one_norm,
                    factor_norms: norms.clone(),
                    factor_norm_upper_bounds: upper_bounds.clone(),
                    sigma: u.sigma,
                    decrease_residual: dec_res,
                    checks,
                });
                prev_norms[u.mode] = norms[u.mode];
            }
            block_lambda = u.rank_one_norm;
            trace.push_block(rec)?;
        }
        lambda = block_lambda;
        let next_grad = trace
            .blocks()
            .last()
            .and_then(|b| b.grad_norm)
            .unwrap_or(f64::NAN);

        if grad > kappa_floor {
            let ratio = sweep_step / grad;
            kappa_hat = Some(kappa_hat.map_or(ratio, |k: f64| k.min(ratio)));
        }

        let stop = rule.check(next.sweep, Some(grad), Some(sweep_step), Some(lambda - prev_lambda));
        state = next;
        grad = next_grad;
        if let Some(reason) = stop {
            trace.finish(Some(reason));
            break;
        }
    }

    let audit = audit.then(|| {
        let bound = 2.0 / sigma0 * (f0 - state.f_value);
        AuditReport {
            records,
            violations,
            sigma0,
            kappa_hat,
            sum_sq_steps,
            summability_bound: bound,
            summability_pass: sum_sq_steps <= bound + 1e-8,
        }
    });
    Ok(AlsRun {
        state,
        trace,
        audit,
        f_start,
    })
}

/// Resolution of a difference of objective values near `‖T‖²`.
fn decrease_floor(t_norm_sq: f64) -> f64 {
    1e3 * f64::EPSILON * t_norm_sq.max(1.0)
}

/// Per-sweep deviations between HOPM and ALS iterates started from the same point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceRow {
    pub sweep: usize,
    /// `max_μ ‖y_k^μ − x_k^μ/‖x_k^μ‖‖`.
    pub factor_deviation: f64,
    /// `|λ_k − ‖τ₁(x_k)‖|`.
    pub lambda_deviation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub rows: Vec<EquivalenceRow>,
    pub max_factor_deviation: f64,
    pub max_lambda_deviation: f64,
    pub tolerance: f64,
    pub pass: bool,
}

pub const EQUIVALENCE_TOL: f64 = 1e-8;

/// Runs HOPM and ALS for `sweeps` sweeps from the same start and compares the
/// normalized ALS factors and `‖τ₁(x_k)‖` against the HOPM iterates.
pub fn verify_equivalence(
    t: &DenseTensor,
    x0: &FactorTuple,
    sweeps: usize,
) -> Result<EquivalenceReport> {
    check_dims(t, x0)?;
    if partial_contraction(t, x0, 0)?.iter().all(|&v| v == 0.0) {
        return Err(Error::BadStart(
            "first partial contraction of the start vanishes".into(),
        ));
    }
    let mut hopm = HopmState::start(t, x0.clone())?;
    let mut als = AlsState::start(t, x0.clone())?;
    let mut rows = Vec::with_capacity(sweeps);
    for _ in 0..sweeps {
        hopm = hopm_sweep(t, &hopm)?;
        als = als_sweep(t, &als)?.0;
        let normalized = als.x.normalized();
        let factor_deviation = (0..x0.order())
            .map(|mu| {
                let diff: Vec<f64> = hopm
                    .y
                    .vector(mu)
                    .iter()
                    .zip(normalized.vector(mu))
                    .map(|(a, b)| a - b)
                    .collect();
                norm(&diff)
            })
            .fold(0.0, f64::max);
        let tau_norm: f64 = als.x.norms().iter().product();
        rows.push(EquivalenceRow {
            sweep: hopm.sweep,
            factor_deviation,
            lambda_deviation: (hopm.lambda - tau_norm).abs(),
        });
    }
    let max_factor_deviation = rows.iter().map(|r| r.factor_deviation).fold(0.0, f64::max);
    let max_lambda_deviation = rows.iter().map(|r| r.lambda_deviation).fold(0.0, f64::max);
    Ok(EquivalenceReport {
        pass: max_factor_deviation < EQUIVALENCE_TOL && max_lambda_deviation < EQUIVALENCE_TOL,
        rows,
        max_factor_deviation,
        max_lambda_deviation,
        tolerance: EQUIVALENCE_TOL,
    })
}

/// `λ = ‖τ₁(x)‖` and the spherical residual of the normalized factors.
pub fn singular_value_certificate(t: &DenseTensor, x: &FactorTuple) -> Result<(f64, f64)> {
    let lambda = x.norms().iter().product();
    let res = crate::tensor::spherical_residual(t, &x.normalized())?;
    Ok((lambda, res))
}
