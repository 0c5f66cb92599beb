//! Higher-order power method.
//!
//! Each sweep replaces the mode vectors in order `μ = 1, …, d` by the
//! normalized partial contraction `F^μ(y) / ‖F^μ(y)‖`, always using the most
//! recent values of the other modes. The values `λ_k = F(y_k)` do not decrease.

use serde::{Deserialize, Serialize};

use crate::diagnostics::trace::{
    BlockRecord, IterationTrace, Method, StopReason, TraceHeader,
};
use crate::error::{Error, Result};
use crate::random::{unit_gaussian_tuple, SeededRng};
use crate::tensor::{
    multilinear_form, norm, partial_contraction, spherical_residual, DenseTensor, FactorTuple,
};

/// Slack on `λ_{k+1} ≥ λ_k` covering floating-point rounding.
pub const LAMBDA_SLACK: f64 = 1e-10;
/// Draws allowed by the auto-start policy before giving up.
pub const AUTO_START_ATTEMPTS: usize = 17;

#[derive(Debug, Clone, PartialEq)]
pub struct HopmState {
    pub y: FactorTuple,
    pub lambda: f64,
    pub sweep: usize,
}

impl HopmState {
    pub fn start(t: &DenseTensor, y0: FactorTuple) -> Result<Self> {
        let lambda = multilinear_form(t, &y0)?;
        Ok(Self {
            y: y0,
            lambda,
            sweep: 0,
        })
    }
}

/// When to stop a sweep loop. `max_sweeps` is always active; the tolerances
/// are optional.
///
/// Gradient (or spherical residual) and step tests look at the sweep just
/// completed: a run stops after sweep `k + 1` when `‖∇f(x_k)‖ < grad_tol` or
/// `‖x_{k+1} − x_k‖ < step_tol`. On an exactly solvable input the first sweep
/// solves and the second certifies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StoppingRule {
    pub max_sweeps: usize,
    pub lambda_tol: Option<f64>,
    pub grad_tol: Option<f64>,
    pub step_tol: Option<f64>,
}

impl Default for StoppingRule {
    fn default() -> Self {
        Self {
            max_sweeps: 500,
            lambda_tol: None,
            grad_tol: Some(1e-10),
            step_tol: Some(1e-12),
        }
    }
}

impl StoppingRule {
    pub fn sweeps(max_sweeps: usize) -> Self {
        Self {
            max_sweeps,
            lambda_tol: None,
            grad_tol: None,
            step_tol: None,
        }
    }

    pub fn with_grad_tol(mut self, tol: f64) -> Self {
        self.grad_tol = Some(tol);
        self
    }

    pub fn with_step_tol(mut self, tol: f64) -> Self {
        self.step_tol = Some(tol);
        self
    }

    pub fn with_lambda_tol(mut self, tol: f64) -> Self {
        self.lambda_tol = Some(tol);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_sweeps == 0 {
            return Err(Error::InvalidParameter("max_sweeps must be positive".into()));
        }
        for (name, v) in [
            ("lambda_tol", self.lambda_tol),
            ("grad_tol", self.grad_tol),
            ("step_tol", self.step_tol),
        ] {
            if let Some(v) = v {
                if !(v >= 0.0) {
                    return Err(Error::InvalidParameter(format!("{name} must be >= 0")));
                }
            }
        }
        Ok(())
    }

    /// Decides whether to stop after `sweep` sweeps. `prev_grad` is the
    /// gradient norm at the start of the sweep just completed.
    pub(crate) fn check(
        &self,
        sweep: usize,
        prev_grad: Option<f64>,
        step: Option<f64>,
        lambda_gain: Option<f64>,
    ) -> Option<StopReason> {
        if let (Some(tol), Some(g)) = (self.grad_tol, prev_grad) {
            if g < tol {
                return Some(StopReason::GradTol);
            }
        }
        if let (Some(tol), Some(s)) = (self.step_tol, step) {
            if s < tol {
                return Some(StopReason::StepTol);
            }
        }
        if let (Some(tol), Some(dl)) = (self.lambda_tol, lambda_gain) {
            if dl < tol {
                return Some(StopReason::LambdaTol);
            }
        }
        if sweep >= self.max_sweeps {
            return Some(StopReason::MaxSweeps);
        }
        None
    }
}

fn hopm_sweep_recorded(
    t: &DenseTensor,
    state: &HopmState,
    norm_sq: f64,
) -> Result<(HopmState, Vec<BlockRecord>)> {
    let sweep = state.sweep + 1;
    let mut y = state.y.clone();
    let mut records = Vec::with_capacity(y.order());
    for mu in 0..y.order() {
        let g = partial_contraction(t, &y, mu)?;
        let gn = norm(&g);
        if gn == 0.0 {
            return Err(Error::ZeroContraction { mode: mu });
        }
        let new: Vec<f64> = g.iter().map(|v| v / gn).collect();
        let step = norm(
            &new.iter()
                .zip(y.vector(mu))
                .map(|(a, b)| a - b)
                .collect::<Vec<_>>(),
        );
        y.set_vector(mu, new)?;
        // F(y^μ) = ⟨F^μ, y^μ⟩ = ‖F^μ‖ after the update
        let lambda = gn;
        let mut rec = BlockRecord::new(sweep, mu, 0.5 * (norm_sq - lambda * lambda), step);
        rec.lambda = Some(lambda);
        records.push(rec);
    }
    let lambda = multilinear_form(t, &y)?;
    if let Some(last) = records.last_mut() {
        last.lambda = Some(lambda);
        last.f = 0.5 * (norm_sq - lambda * lambda);
    }
    Ok((HopmState { y, lambda, sweep }, records))
}

/// One HOPM sweep over all modes.
pub fn hopm_sweep(t: &DenseTensor, state: &HopmState) -> Result<HopmState> {
    let norm_sq = t.frobenius_norm().powi(2);
    hopm_sweep_recorded(t, state, norm_sq).map(|(s, _)| s)
}

fn check_start(t: &DenseTensor, y0: &FactorTuple) -> Result<()> {
    if t.dims() != y0.dims().as_slice() {
        return Err(Error::DimensionMismatch(format!(
            "tensor dims {:?} vs start {:?}",
            t.dims(),
            y0.dims()
        )));
    }
    let g = partial_contraction(t, y0, 0)?;
    if g.iter().all(|&v| v == 0.0) {
        return Err(Error::BadStart(
            "first partial contraction of the start vanishes".into(),
        ));
    }
    if t.order() < 3 {
        log::debug!("running on an order-{} tensor", t.order());
    }
    Ok(())
}

/// Draws a unit-norm Gaussian start with a nonzero first partial contraction.
pub fn auto_start(t: &DenseTensor, rng: &mut SeededRng) -> Result<FactorTuple> {
    for _ in 0..AUTO_START_ATTEMPTS {
        let y0 = unit_gaussian_tuple(rng, t.dims());
        let g = partial_contraction(t, &y0, 0)?;
        if g.iter().any(|&v| v != 0.0) {
            return Ok(y0);
        }
    }
    Err(Error::BadStart(format!(
        "first partial contraction vanished for {AUTO_START_ATTEMPTS} random starts"
    )))
}

/// Invariant flags collected by an audited HOPM run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HopmAudit {
    pub monotone: bool,
    pub unit_factors: bool,
    pub positive: bool,
    pub violations: Vec<String>,
}

impl HopmAudit {
    pub fn pass(&self) -> bool {
        self.monotone && self.unit_factors && self.positive
    }
}

pub fn run_hopm(
    t: &DenseTensor,
    y0: FactorTuple,
    rule: StoppingRule,
) -> Result<(HopmState, IterationTrace)> {
    run_hopm_inner(t, y0, rule).map(|(s, tr, _)| (s, tr))
}

/// Like [`run_hopm`], additionally checking monotone `λ`, unit factors and
/// positive `λ` after every sweep. With `strict`, any violation turns the
/// result into [`Error::AuditViolation`].
pub fn run_hopm_audited(
    t: &DenseTensor,
    y0: FactorTuple,
    rule: StoppingRule,
    strict: bool,
) -> Result<(HopmState, IterationTrace, HopmAudit)> {
    let (state, trace, audit) = run_hopm_inner(t, y0, rule)?;
    if strict && !audit.pass() {
        return Err(Error::AuditViolation(audit.violations.join("; ")));
    }
    Ok((state, trace, audit))
}

fn run_hopm_inner(
    t: &DenseTensor,
    y0: FactorTuple,
    rule: StoppingRule,
) -> Result<(HopmState, IterationTrace, HopmAudit)> {
    rule.validate()?;
    check_start(t, &y0)?;
    let norm_sq = t.frobenius_norm().powi(2);
    let mut state = HopmState::start(t, y0)?;
    let mut residual = spherical_residual(t, &state.y)?;

    let mut header = TraceHeader::new(
        Method::Hopm,
        t.dims().to_vec(),
        0.5 * (norm_sq - state.lambda * state.lambda),
    );
    header.lambda0 = Some(state.lambda);
    header.grad_norm0 = Some(residual);
    let mut trace = IterationTrace::new(header);
    let mut audit = HopmAudit {
        monotone: true,
        unit_factors: true,
        positive: true,
        violations: Vec::new(),
    };

    loop {
        let (next, mut records) = hopm_sweep_recorded(t, &state, norm_sq)?;
        let next_residual = spherical_residual(t, &next.y)?;
        if let Some(last) = records.last_mut() {
            last.grad_norm = Some(next_residual);
        }
        for rec in records {
            trace.push_block(rec)?;
        }

        if state.sweep >= 1 && next.lambda < state.lambda - LAMBDA_SLACK {
            audit.monotone = false;
            audit.violations.push(format!(
                "sweep {}: lambda decreased from {} to {}",
                next.sweep, state.lambda, next.lambda
            ));
        }
        if next.y.norms().iter().any(|n| (n - 1.0).abs() > 1e-12) {
            audit.unit_factors = false;
            audit
                .violations
                .push(format!("sweep {}: factor norm differs from 1", next.sweep));
        }
        if !(next.lambda > 0.0) {
            audit.positive = false;
            audit
                .violations
                .push(format!("sweep {}: lambda {} not positive", next.sweep, next.lambda));
        }

        let step = next.y.distance(&state.y);
        let gain = next.lambda - state.lambda;
        let stop = rule.check(next.sweep, Some(residual), Some(step), Some(gain));
        state = next;
        residual = next_residual;
        if let Some(reason) = stop {
            trace.finish(Some(reason));
            break;
        }
    }
    Ok((state, trace, audit))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::random::seeded_rng;
    use crate::tensor::outer_rank_one;
    use approx::assert_abs_diff_eq;

    fn diag31() -> DenseTensor {
        DenseTensor::from_fn(vec![2, 2, 2], |i| {
            if i[0] == i[1] && i[1] == i[2] {
                [3.0, 1.0][i[0]]
            } else {
                0.0
            }
        })
        .unwrap()
    }

    #[test]
    fn rank_one_input_aligns_after_one_sweep() {
        let s = 1.0 / 2f64.sqrt();
        let x = FactorTuple::new(vec![vec![s, s], vec![1.0, 0.0], vec![0.6, -0.8]]).unwrap();
        let t = outer_rank_one(&x);
        let y0 = FactorTuple::new(vec![vec![1.0, 0.0], vec![0.3, 0.4], vec![1.0, 2.0]]).unwrap();
        let state = hopm_sweep(&t, &HopmState::start(&t, y0).unwrap()).unwrap();
        assert_abs_diff_eq!(state.lambda, 1.0, epsilon = 1e-14);
        for mu in 0..3 {
            let ip: f64 = state
                .y
                .vector(mu)
                .iter()
                .zip(x.vector(mu))
                .map(|(a, b)| a * b)
                .sum();
            assert_abs_diff_eq!(ip.abs(), 1.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn rank_one_terminates_at_second_sweep() {
        let x = FactorTuple::new(vec![vec![1.0, 2.0], vec![0.5, -1.0], vec![3.0, 1.0]]).unwrap();
        let t = outer_rank_one(&x);
        let y0 = FactorTuple::new(vec![vec![1.0, 0.0], vec![1.0, 1.0], vec![1.0, -1.0]]).unwrap();
        let rule = StoppingRule::sweeps(100).with_lambda_tol(1e-12);
        let (state, trace) = run_hopm(&t, y0, rule).unwrap();
        assert_eq!(state.sweep, 2);
        assert_eq!(trace.stop_reason, Some(StopReason::LambdaTol));
        let expected: f64 = x.norms().iter().product();
        assert_abs_diff_eq!(state.lambda, expected, epsilon = 1e-12);
    }

    #[test]
    fn diagonal_tensor_from_e1_basin() {
        let t = diag31();
        let y0 = FactorTuple::new(vec![vec![0.9, 0.1], vec![0.8, 0.3], vec![1.0, 0.2]]).unwrap();
        let (state, _) = run_hopm(&t, y0.normalized(), StoppingRule::sweeps(200).with_grad_tol(1e-13))
            .unwrap();
        assert_abs_diff_eq!(state.lambda, 3.0, epsilon = 1e-12);
        for mu in 0..3 {
            assert_abs_diff_eq!(state.y.vector(mu)[0].abs(), 1.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn zero_tensor_is_bad_start() {
        let t = DenseTensor::zeros(vec![2, 2, 2]).unwrap();
        let y0 = FactorTuple::new(vec![vec![1.0, 0.0]; 3]).unwrap();
        assert!(matches!(
            run_hopm(&t, y0, StoppingRule::default()),
            Err(Error::BadStart(_))
        ));
        let mut rng = seeded_rng(1);
        assert!(matches!(auto_start(&t, &mut rng), Err(Error::BadStart(_))));
    }

    #[test]
    fn zero_contraction_on_invalid_state() {
        // sweeping from a state with F¹(y) = 0 bypasses the start check
        let t = DenseTensor::new(vec![2, 2], vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        let y = FactorTuple::new(vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let state = HopmState::start(&t, y).unwrap();
        assert!(matches!(
            hopm_sweep(&t, &state),
            Err(Error::ZeroContraction { mode: 0 })
        ));
    }

    #[test]
    fn matrix_case_converges_to_top_singular_value() {
        let t = DenseTensor::new(vec![2, 2], vec![2.0, 0.0, 0.0, 1.0]).unwrap();
        let y0 = FactorTuple::new(vec![vec![0.6, 0.8], vec![0.8, 0.6]]).unwrap();
        let (state, _) = run_hopm(&t, y0, StoppingRule::sweeps(500).with_grad_tol(1e-14)).unwrap();
        assert_abs_diff_eq!(state.lambda, 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(state.y.vector(0)[0].abs(), 1.0, epsilon = 1e-10);
    }

    #[test]
    fn stopping_rule_validation() {
        assert!(StoppingRule::sweeps(0).validate().is_err());
        assert!(StoppingRule::sweeps(3).with_grad_tol(-1.0).validate().is_err());
        assert!(StoppingRule::default().validate().is_ok());
    }
}
