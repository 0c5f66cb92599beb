//! Cyclic block coordinate descent over the rank-`r` CP format.
//!
//! Minimizes `f(x) = J(τ_r(x)) + (σ*/2) Σ_μ ‖X^μ‖²_F` where `τ_r` sums the
//! outer products of corresponding columns of the factor matrices `X^μ`
//! (`n_μ × r`) and `J` is either `½‖T − X‖²` or the energy
//! `½⟨A vec(X), vec(X)⟩ − ⟨B, X⟩` of an SPD operator `A`.
//!
//! One block is one whole factor matrix. Each block update solves the
//! restricted quadratic problem exactly through a Cholesky factorization.
//! The squared smallest singular value `σ_k^μ` of the restricted linear map is
//! monitored; with `σ* = 0` a running minimum below the stability threshold is
//! reported as a warning, not an error.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::diagnostics::trace::{BlockRecord, IterationTrace, Method, StopReason, TraceHeader};
use crate::error::{Error, Result};
use crate::hopm::StoppingRule;
use crate::random::{gaussian_vec, SeededRng};
use crate::tensor::{increment_index, validate_dims, DenseTensor, FactorTuple};

/// Slack of the per-block decrease inequality.
pub const DECREASE_SLACK: f64 = 1e-9;
/// Slack of the monotone-objective check.
pub const MONOTONE_SLACK: f64 = 1e-10;
pub const DEFAULT_STABILITY_THRESHOLD: f64 = 1e-8;
/// Cholesky pivots below this multiple of the largest pivot count as singular.
const PIVOT_RTOL: f64 = 1e2 * f64::EPSILON;

#[derive(Debug, Clone, PartialEq)]
pub struct CpFactors {
    dims: Vec<usize>,
    rank: usize,
    matrices: Vec<DMatrix<f64>>,
}

impl CpFactors {
    pub fn new(matrices: Vec<DMatrix<f64>>) -> Result<Self> {
        if matrices.is_empty() {
            return Err(Error::DimensionMismatch("CP format needs at least one mode".into()));
        }
        let rank = matrices[0].ncols();
        if rank == 0 {
            return Err(Error::DimensionMismatch("CP rank must be at least 1".into()));
        }
        if let Some(mu) = matrices.iter().position(|m| m.ncols() != rank) {
            return Err(Error::DimensionMismatch(format!(
                "mode {mu} has {} columns, expected {rank}",
                matrices[mu].ncols()
            )));
        }
        let dims: Vec<usize> = matrices.iter().map(|m| m.nrows()).collect();
        validate_dims(&dims)?;
        if matrices.iter().any(|m| m.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite(0));
        }
        Ok(Self {
            dims,
            rank,
            matrices,
        })
    }

    pub fn from_rank_one(x: &FactorTuple) -> Self {
        let matrices = x
            .vectors()
            .iter()
            .map(|v| DMatrix::from_column_slice(v.len(), 1, v))
            .collect();
        Self::new(matrices).expect("valid factor tuple")
    }

    /// Standard normal entries with every column scaled to unit norm. Entries
    /// are drawn mode by mode, column by column, so rank one draws the same
    /// numbers as [`crate::random::unit_gaussian_tuple`].
    pub fn random(dims: &[usize], rank: usize, rng: &mut SeededRng) -> Result<Self> {
        validate_dims(dims)?;
        if rank == 0 {
            return Err(Error::InvalidParameter("rank must be at least 1".into()));
        }
        let matrices = dims
            .iter()
            .map(|&n| {
                let mut m = DMatrix::zeros(n, rank);
                for i in 0..rank {
                    let mut col = gaussian_vec(rng, n);
                    let s = col.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if s > 0.0 {
                        col.iter_mut().for_each(|v| *v /= s);
                    }
                    m.set_column(i, &DVector::from_vec(col));
                }
                m
            })
            .collect();
        Self::new(matrices)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn order(&self) -> usize {
        self.dims.len()
    }

    pub fn matrix(&self, mu: usize) -> &DMatrix<f64> {
        &self.matrices[mu]
    }

    pub fn matrices(&self) -> &[DMatrix<f64>] {
        &self.matrices
    }

    pub fn set_matrix(&mut self, mu: usize, m: DMatrix<f64>) -> Result<()> {
        if mu >= self.matrices.len() {
            return Err(Error::ModeOutOfRange {
                mode: mu,
                order: self.matrices.len(),
            });
        }
        if m.shape() != self.matrices[mu].shape() {
            return Err(Error::DimensionMismatch(format!(
                "mode {mu} expects shape {:?}, got {:?}",
                self.matrices[mu].shape(),
                m.shape()
            )));
        }
        self.matrices[mu] = m;
        Ok(())
    }

    /// `Σ_μ ‖X^μ‖²_F`.
    pub fn norm_sq(&self) -> f64 {
        self.matrices.iter().map(|m| m.norm_squared()).sum()
    }

    pub fn distance(&self, other: &CpFactors) -> f64 {
        self.matrices
            .iter()
            .zip(&other.matrices)
            .map(|(a, b)| (a - b).norm_squared())
            .sum::<f64>()
            .sqrt()
    }

    pub fn to_rank_one(&self) -> Option<FactorTuple> {
        if self.rank != 1 {
            return None;
        }
        FactorTuple::new(
            self.matrices
                .iter()
                .map(|m| m.column(0).iter().copied().collect())
                .collect(),
        )
        .ok()
    }
}

/// `Σ_i x_i¹ ∘ ⋯ ∘ x_i^d` over the columns of the factor matrices.
pub fn cp_map(factors: &CpFactors) -> DenseTensor {
    let dims = factors.dims().to_vec();
    let d = dims.len();
    let len: usize = dims.iter().product();
    let mut data = Vec::with_capacity(len);
    let mut index = vec![0usize; d];
    for _ in 0..len {
        let mut v = 0.0;
        for i in 0..factors.rank() {
            let mut p = 1.0;
            for (mu, m) in factors.matrices().iter().enumerate() {
                p *= m[(index[mu], i)];
            }
            v += p;
        }
        data.push(v);
        increment_index(&mut index, &dims);
    }
    DenseTensor::new(dims, data).expect("finite factors give finite entries")
}

/// Matrix of the linear map `X^μ ↦ vec(τ_r(…, X^μ, …))`, of shape
/// `N × n_μ r`. Row order is the tensor storage order; column `j + n_μ i`
/// corresponds to entry `(j, i)` of `X^μ` (column-major vec).
pub fn restricted_map_matrix(factors: &CpFactors, mu: usize) -> Result<DMatrix<f64>> {
    let d = factors.order();
    if mu >= d {
        return Err(Error::ModeOutOfRange { mode: mu, order: d });
    }
    let dims = factors.dims().to_vec();
    let n_mu = dims[mu];
    let r = factors.rank();
    let len: usize = dims.iter().product();
    let mut m = DMatrix::zeros(len, n_mu * r);
    let mut index = vec![0usize; d];
    for row in 0..len {
        for i in 0..r {
            let mut coef = 1.0;
            for (nu, a) in factors.matrices().iter().enumerate() {
                if nu != mu {
                    coef *= a[(index[nu], i)];
                }
            }
            m[(row, index[mu] + n_mu * i)] = coef;
        }
        increment_index(&mut index, &dims);
    }
    Ok(m)
}

/// Squared smallest singular value of the restricted map in mode `mu`.
pub fn sigma_k_mu(factors: &CpFactors, mu: usize) -> Result<f64> {
    let m = restricted_map_matrix(factors, mu)?;
    if m.ncols() > m.nrows() {
        return Ok(0.0);
    }
    let s = m.singular_values();
    let smin = s.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(smin * smin)
}

#[derive(Debug, Clone, PartialEq)]
pub enum ObjectiveKind {
    LeastSquares { target: DenseTensor },
    QuadraticEnergy { a: DMatrix<f64>, b: DenseTensor },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Objective {
    kind: ObjectiveKind,
    sigma_star: f64,
    gamma0: f64,
}

impl Objective {
    pub fn least_squares(target: DenseTensor, sigma_star: f64) -> Result<Self> {
        check_sigma_star(sigma_star)?;
        Ok(Self {
            kind: ObjectiveKind::LeastSquares { target },
            sigma_star,
            gamma0: 1.0,
        })
    }

    /// Checks symmetry of `a` to `1e-10` (relative to its largest entry) and
    /// positive definiteness.
    pub fn quadratic_energy(a: DMatrix<f64>, b: DenseTensor, sigma_star: f64) -> Result<Self> {
        check_sigma_star(sigma_star)?;
        let n = b.len();
        if a.nrows() != n || a.ncols() != n {
            return Err(Error::DimensionMismatch(format!(
                "operator is {}x{}, right-hand side has {} entries",
                a.nrows(),
                a.ncols(),
                n
            )));
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(0));
        }
        let scale = a.amax().max(1.0);
        let asym = (&a - a.transpose()).amax();
        if asym > 1e-10 * scale {
            return Err(Error::InvalidParameter(format!(
                "operator is not symmetric (max asymmetry {asym:e})"
            )));
        }
        let sym = (&a + a.transpose()) * 0.5;
        let gamma0 = SymmetricEigen::new(sym.clone())
            .eigenvalues
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        if !(gamma0 > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "operator is not positive definite (smallest eigenvalue {gamma0:e})"
            )));
        }
        Ok(Self {
            kind: ObjectiveKind::QuadraticEnergy { a: sym, b },
            sigma_star,
            gamma0,
        })
    }

    pub fn kind(&self) -> &ObjectiveKind {
        &self.kind
    }

    pub fn sigma_star(&self) -> f64 {
        self.sigma_star
    }

    pub fn dims(&self) -> &[usize] {
        match &self.kind {
            ObjectiveKind::LeastSquares { target } => target.dims(),
            ObjectiveKind::QuadraticEnergy { b, .. } => b.dims(),
        }
    }

    /// `J(X)` for an assembled tensor.
    pub fn j_value(&self, x: &DenseTensor) -> f64 {
        match &self.kind {
            ObjectiveKind::LeastSquares { target } => {
                0.5 * target
                    .as_slice()
                    .iter()
                    .zip(x.as_slice())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
            }
            ObjectiveKind::QuadraticEnergy { a, b } => {
                let v = DVector::from_column_slice(x.as_slice());
                let bv = DVector::from_column_slice(b.as_slice());
                0.5 * v.dot(&(a * &v)) - bv.dot(&v)
            }
        }
    }

    /// `∇J(X)` as a vector in storage order.
    pub fn j_gradient(&self, x: &DenseTensor) -> DVector<f64> {
        let v = DVector::from_column_slice(x.as_slice());
        match &self.kind {
            ObjectiveKind::LeastSquares { target } => v - DVector::from_column_slice(target.as_slice()),
            ObjectiveKind::QuadraticEnergy { a, b } => a * v - DVector::from_column_slice(b.as_slice()),
        }
    }

    /// Infimum of `J` over all tensors.
    pub fn j_lower_bound(&self) -> f64 {
        match &self.kind {
            ObjectiveKind::LeastSquares { .. } => 0.0,
            ObjectiveKind::QuadraticEnergy { a, b } => {
                let bv = DVector::from_column_slice(b.as_slice());
                let sol = Cholesky::new(a.clone())
                    .expect("positive definite checked at construction")
                    .solve(&bv);
                -0.5 * bv.dot(&sol)
            }
        }
    }

    pub fn value(&self, factors: &CpFactors) -> Result<f64> {
        self.check_factors(factors)?;
        Ok(self.j_value(&cp_map(factors)) + 0.5 * self.sigma_star * factors.norm_sq())
    }

    /// Block gradients `Mᵀ∇J + σ* X^μ`, each shaped like `X^μ`.
    pub fn gradient(&self, factors: &CpFactors) -> Result<Vec<DMatrix<f64>>> {
        self.check_factors(factors)?;
        let gj = self.j_gradient(&cp_map(factors));
        (0..factors.order())
            .map(|mu| {
                let m = restricted_map_matrix(factors, mu)?;
                let g = m.transpose() * &gj;
                let (n, r) = factors.matrix(mu).shape();
                Ok(DMatrix::from_column_slice(n, r, g.as_slice())
                    + factors.matrix(mu) * self.sigma_star)
            })
            .collect()
    }

    pub fn gradient_norm(&self, factors: &CpFactors) -> Result<f64> {
        Ok(self
            .gradient(factors)?
            .iter()
            .map(|g| g.norm_squared())
            .sum::<f64>()
            .sqrt())
    }

    fn check_factors(&self, factors: &CpFactors) -> Result<()> {
        if factors.dims() != self.dims() {
            return Err(Error::DimensionMismatch(format!(
                "factor dims {:?} vs objective dims {:?}",
                factors.dims(),
                self.dims()
            )));
        }
        Ok(())
    }
}

fn check_sigma_star(sigma_star: f64) -> Result<()> {
    if !(sigma_star >= 0.0) || !sigma_star.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "sigma_star must be finite and >= 0, got {sigma_star}"
        )));
    }
    Ok(())
}

/// Lower spectral bound `γ₀` of the Hessian of `J`: 1 for least squares, the
/// smallest eigenvalue of `A` for the energy. Both Hessians are constant, so
/// the starting point plays no role.
pub fn gamma_lower_bound(obj: &Objective) -> f64 {
    obj.gamma0
}

fn block_system(obj: &Objective, factors: &CpFactors, mu: usize) -> Result<(DMatrix<f64>, DVector<f64>)> {
    obj.check_factors(factors)?;
    let m = restricted_map_matrix(factors, mu)?;
    let mt = m.transpose();
    let (mut h, rhs) = match obj.kind() {
        ObjectiveKind::LeastSquares { target } => {
            (&mt * &m, &mt * DVector::from_column_slice(target.as_slice()))
        }
        ObjectiveKind::QuadraticEnergy { a, b } => {
            (&mt * (a * &m), &mt * DVector::from_column_slice(b.as_slice()))
        }
    };
    for i in 0..h.nrows() {
        h[(i, i)] += obj.sigma_star();
    }
    Ok((h, rhs))
}

fn reshape_block(factors: &CpFactors, mu: usize, v: &DVector<f64>) -> DMatrix<f64> {
    let (n, r) = factors.matrix(mu).shape();
    DMatrix::from_column_slice(n, r, v.as_slice())
}

/// Exact minimizer of `f` in block `mu` with all other blocks fixed.
pub fn bcd_block_update(obj: &Objective, factors: &CpFactors, mu: usize) -> Result<DMatrix<f64>> {
    let (h, rhs) = block_system(obj, factors, mu)?;
    let chol = Cholesky::new(h).ok_or_else(|| Error::DegenerateBlock {
        mode: mu,
        reason: "block system is not positive definite".into(),
    })?;
    let pivots = chol.l_dirty().diagonal();
    let pmax = pivots.iter().copied().fold(0.0, f64::max);
    let pmin = pivots.iter().copied().fold(f64::INFINITY, f64::min);
    // Pivots are square roots of the eigenvalue scale, so compare squares.
    if !(pmin * pmin > PIVOT_RTOL * pmax * pmax) {
        return Err(Error::DegenerateBlock {
            mode: mu,
            reason: format!(
                "block system singular to working precision (pivot ratio {:e})",
                pmin / pmax
            ),
        });
    }
    Ok(reshape_block(factors, mu, &chol.solve(&rhs)))
}

/// Minimum-norm minimizer of block `mu`, usable when the block system is
/// singular. Singular values below `n·ε` times the largest are dropped.
pub fn bcd_block_update_pinv(obj: &Objective, factors: &CpFactors, mu: usize) -> Result<DMatrix<f64>> {
    let (h, rhs) = block_system(obj, factors, mu)?;
    let n = h.nrows();
    let svd = h.svd(true, true);
    let smax = svd.singular_values.iter().copied().fold(0.0, f64::max);
    let v = svd
        .solve(&rhs, n as f64 * f64::EPSILON * smax)
        .map_err(|e| Error::DegenerateBlock {
            mode: mu,
            reason: e.to_string(),
        })?;
    Ok(reshape_block(factors, mu, &v))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BcdOptions {
    /// Running minimum of `σ_k^μ` below which a stability warning is raised
    /// (only when `σ* = 0`).
    pub stability_threshold: f64,
    /// Compute `σ_k^μ` on every `sigma_every`-th block update; 0 disables it.
    pub sigma_every: usize,
    /// Abort on a singular block system. Otherwise the block falls back to
    /// the minimum-norm solution and the run continues.
    pub strict: bool,
}

impl Default for BcdOptions {
    fn default() -> Self {
        Self {
            stability_threshold: DEFAULT_STABILITY_THRESHOLD,
            sigma_every: 1,
            strict: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BcdTrace {
    pub trace: IterationTrace,
    /// Running minimum of the computed `σ_k^μ`.
    pub min_sigma: Option<f64>,
    pub stability_warning: bool,
    pub gamma0: f64,
    /// Block updates violating `Δf ≥ ((γ₀σ + σ*)/2)‖ΔX‖² − slack`.
    pub decrease_violations: usize,
    /// Block updates where `f` increased by more than the slack.
    pub monotone_violations: usize,
}

#[derive(Debug, Clone)]
pub struct BcdRun {
    pub factors: CpFactors,
    pub trace: BcdTrace,
}

pub fn run_bcd(
    obj: &Objective,
    x0: CpFactors,
    rule: StoppingRule,
    options: BcdOptions,
) -> Result<BcdRun> {
    rule.validate()?;
    obj.check_factors(&x0)?;
    if cp_map(&x0).is_zero() && obj.sigma_star() == 0.0 {
        return Err(Error::BadStart("starting factors assemble to the zero tensor".into()));
    }
    let gamma0 = gamma_lower_bound(obj);
    let sigma_star = obj.sigma_star();

    let mut x = x0;
    let mut f = obj.value(&x)?;
    let mut grad = obj.gradient_norm(&x)?;
    let mut header = TraceHeader::new(Method::Bcd, x.dims().to_vec(), f);
    header.rank = Some(x.rank());
    header.sigma_star = Some(sigma_star);
    header.grad_norm0 = Some(grad);
    let mut trace = IterationTrace::new(header);

    let mut min_sigma: Option<f64> = None;
    let mut min_bound = f64::INFINITY;
    let mut decrease_violations = 0;
    let mut monotone_violations = 0;
    let mut block_counter = 0usize;
    let mut degenerate_logged = false;
    let mut sweep = 0usize;
    let d = x.order();

    let reason = 'outer: loop {
        sweep += 1;
        let prev = x.clone();
        for mu in 0..d {
            let sigma = if options.sigma_every > 0 && block_counter % options.sigma_every == 0 {
                let s = sigma_k_mu(&x, mu)?;
                min_sigma = Some(min_sigma.map_or(s, |m: f64| m.min(s)));
                Some(s)
            } else {
                None
            };
            block_counter += 1;

            let mut fallback = false;
            let new = match bcd_block_update(obj, &x, mu) {
                Ok(m) => m,
                Err(e @ Error::DegenerateBlock { .. }) => {
                    if options.strict {
                        return Err(e);
                    }
                    if !degenerate_logged {
                        log::warn!("{e}; using minimum-norm block solutions");
                        degenerate_logged = true;
                    }
                    fallback = true;
                    match bcd_block_update_pinv(obj, &x, mu) {
                        Ok(m) => m,
                        Err(_) => break 'outer StopReason::DegenerateBlock,
                    }
                }
                Err(e) => return Err(e),
            };
            let old = x.matrix(mu).clone();
            x.set_matrix(mu, new)?;
            let mut f_new = obj.value(&x)?;
            if fallback && f_new > f {
                // A truncated pseudo-inverse lost a relevant direction; the
                // current block is at least as good.
                x.set_matrix(mu, old.clone())?;
                f_new = f;
            }
            let step = (x.matrix(mu) - &old).norm();
            let bound = gamma0 * sigma.unwrap_or(0.0) + sigma_star;
            min_bound = min_bound.min(bound);
            if f - f_new < 0.5 * bound * step * step - DECREASE_SLACK {
                decrease_violations += 1;
            }
            if f_new > f + MONOTONE_SLACK {
                monotone_violations += 1;
            }
            f = f_new;

            let mut rec = BlockRecord::new(sweep, mu, f, step);
            rec.sigma_block = sigma;
            rec.gamma_bound_used = Some(bound);
            if mu + 1 == d {
                rec.grad_norm = Some(obj.gradient_norm(&x)?);
            }
            trace.push_block(rec)?;
        }
        let next_grad = trace.blocks().last().and_then(|b| b.grad_norm).unwrap_or(f64::NAN);
        let step = x.distance(&prev);
        let stop = rule.check(sweep, Some(grad), Some(step), None);
        grad = next_grad;
        if let Some(reason) = stop {
            break reason;
        }
    };

    if min_bound.is_finite() && min_bound > 0.0 {
        trace.header.sigma0 = Some(min_bound);
    }
    trace.finish(Some(reason));
    let stability_warning =
        sigma_star == 0.0 && min_sigma.is_some_and(|s| s < options.stability_threshold);
    if let Some(term) = trace.terminal.as_mut() {
        term.min_sigma = min_sigma;
        term.stability_warning = Some(stability_warning);
    }
    Ok(BcdRun {
        factors: x,
        trace: BcdTrace {
            trace,
            min_sigma,
            stability_warning,
            gamma0,
            decrease_violations,
            monotone_violations,
        },
    })
}
