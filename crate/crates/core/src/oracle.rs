//! Ground-truth generators for small instances: multistart HOPM, exhaustive
//! angular grid search, dense matrix SVD, and exact constructions.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hopm::{auto_start, run_hopm, StoppingRule};
use crate::random::{gaussian_vec, seeded_rng, SeededRng};
use crate::tensor::{
    norm, outer_rank_one, partial_contraction, spherical_residual, DenseTensor, FactorTuple,
};

pub const DEFAULT_STARTS: usize = 64;
/// Residual tolerance of each multistart HOPM run.
pub const MULTISTART_GRAD_TOL: f64 = 1e-12;
pub const MULTISTART_MAX_SWEEPS: usize = 20_000;
/// Certificate threshold for results treated as accepted.
pub const CERTIFICATE_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OracleMethod {
    Multistart,
    GridSearch,
    MatrixSvd,
    Exact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub lambda_star: f64,
    /// Unit factors attaining `lambda_star`.
    pub argmax: FactorTuple,
    pub method: OracleMethod,
    /// Spherical residual at `argmax`.
    pub certificate: f64,
}

impl OracleResult {
    pub fn accepted(&self) -> bool {
        self.certificate < CERTIFICATE_TOL
    }
}

/// Best `λ` over `starts` HOPM runs from seeded Gaussian starts.
pub fn spectral_norm_multistart(t: &DenseTensor, starts: usize, seed: u64) -> Result<OracleResult> {
    if t.is_zero() {
        return Err(Error::BadTensor("zero tensor has no dominant singular value".into()));
    }
    if starts == 0 {
        return Err(Error::InvalidParameter("starts must be at least 1".into()));
    }
    let rule = StoppingRule::sweeps(MULTISTART_MAX_SWEEPS).with_grad_tol(MULTISTART_GRAD_TOL);
    let mut rng = seeded_rng(seed);
    let mut best: Option<(f64, FactorTuple)> = None;
    for _ in 0..starts {
        let y0 = auto_start(t, &mut rng)?;
        let (state, _) = run_hopm(t, y0, rule)?;
        if best.as_ref().is_none_or(|(l, _)| state.lambda > *l) {
            best = Some((state.lambda, state.y));
        }
    }
    let (lambda_star, argmax) = best.expect("at least one start");
    finish(t, lambda_star, argmax, OracleMethod::Multistart)
}

fn finish(
    t: &DenseTensor,
    lambda_star: f64,
    argmax: FactorTuple,
    method: OracleMethod,
) -> Result<OracleResult> {
    let certificate = spherical_residual(t, &argmax)?;
    Ok(OracleResult {
        lambda_star,
        argmax,
        method,
        certificate,
    })
}

/// Angle ranges for a unit vector of length `n`, modulo sign.
fn angle_ranges(n: usize) -> Vec<(f64, f64)> {
    use std::f64::consts::PI;
    match n {
        1 => vec![],
        2 => vec![(0.0, PI)],
        3 => vec![(0.0, PI), (0.0, PI)],
        _ => unreachable!("checked by caller"),
    }
}

fn sphere_point(n: usize, angles: &[f64]) -> Vec<f64> {
    match n {
        1 => vec![1.0],
        2 => vec![angles[0].cos(), angles[0].sin()],
        3 => {
            let (theta, phi) = (angles[0], angles[1]);
            vec![theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos()]
        }
        _ => unreachable!("checked by caller"),
    }
}

struct GridProblem<'a> {
    t: &'a DenseTensor,
    /// (mode, number of angles) for every gridded mode.
    layout: Vec<(usize, usize)>,
}

impl GridProblem<'_> {
    fn tuple(&self, angles: &[f64]) -> FactorTuple {
        let dims = self.t.dims();
        let d = dims.len();
        let mut vectors = Vec::with_capacity(d);
        let mut offset = 0;
        for &(mu, k) in &self.layout {
            vectors.push(sphere_point(dims[mu], &angles[offset..offset + k]));
            offset += k;
        }
        vectors.push(vec![0.0; dims[d - 1]]);
        FactorTuple::new(vectors).expect("finite sphere points")
    }

    /// Maximum over the last mode, attained at the normalized contraction.
    fn value(&self, angles: &[f64]) -> f64 {
        let x = self.tuple(angles);
        let g = partial_contraction(self.t, &x, self.t.order() - 1).expect("consistent dims");
        norm(&g)
    }

    fn search(&self, ranges: &[(f64, f64)], resolution: usize, closed: &[bool]) -> (f64, Vec<f64>) {
        let k = ranges.len();
        let step: Vec<f64> = ranges
            .iter()
            .zip(closed)
            .map(|(&(a, b), &c)| {
                if c {
                    (b - a) / (resolution - 1) as f64
                } else {
                    (b - a) / resolution as f64
                }
            })
            .collect();
        let mut idx = vec![0usize; k];
        let mut angles = vec![0.0; k];
        let mut best = (f64::NEG_INFINITY, vec![0.0; k]);
        loop {
            for i in 0..k {
                angles[i] = ranges[i].0 + step[i] * idx[i] as f64;
            }
            let v = self.value(&angles);
            if v > best.0 {
                best = (v, angles.clone());
            }
            let mut i = k;
            loop {
                if i == 0 {
                    return best;
                }
                i -= 1;
                idx[i] += 1;
                if idx[i] < resolution {
                    break;
                }
                idx[i] = 0;
            }
        }
    }
}

/// Exhaustive search of `F(x)/∏‖x^μ‖` over an angular grid on each sphere
/// (all modes but the last, which is maximized in closed form), refined once
/// around the best cell.
pub fn spectral_norm_grid(t: &DenseTensor, resolution: usize) -> Result<OracleResult> {
    if t.dims().iter().any(|&n| n > 3) {
        return Err(Error::DimsTooLarge(t.dims().to_vec()));
    }
    if resolution < 64 {
        return Err(Error::InvalidParameter(format!(
            "grid resolution must be at least 64, got {resolution}"
        )));
    }
    if t.is_zero() {
        return Err(Error::BadTensor("zero tensor".into()));
    }
    let d = t.order();
    let layout: Vec<(usize, usize)> = (0..d - 1)
        .map(|mu| (mu, angle_ranges(t.dims()[mu]).len()))
        .collect();
    let coarse: Vec<(f64, f64)> = (0..d - 1).flat_map(|mu| angle_ranges(t.dims()[mu])).collect();
    let problem = GridProblem { t, layout };

    let (lambda, angles) = if coarse.is_empty() {
        (problem.value(&[]), Vec::new())
    } else {
        let open = vec![false; coarse.len()];
        let (_, centre) = problem.search(&coarse, resolution, &open);
        let fine: Vec<(f64, f64)> = coarse
            .iter()
            .zip(&centre)
            .map(|(&(a, b), &c)| {
                let h = (b - a) / resolution as f64;
                (c - h, c + h)
            })
            .collect();
        let closed = vec![true; fine.len()];
        problem.search(&fine, resolution, &closed)
    };

    let mut x = problem.tuple(&angles);
    let g = partial_contraction(t, &x, d - 1)?;
    let gn = norm(&g);
    x.set_vector(d - 1, g.iter().map(|v| v / gn).collect())?;
    finish(t, lambda, x, OracleMethod::GridSearch)
}

/// Largest singular value and vectors of a 2-way tensor by dense SVD.
pub fn matrix_svd_check(t: &DenseTensor) -> Result<OracleResult> {
    if t.order() != 2 {
        return Err(Error::NotMatrix(t.order()));
    }
    let (m, n) = (t.dims()[0], t.dims()[1]);
    let a = DMatrix::from_row_slice(m, n, t.as_slice());
    let svd = a.svd(true, true);
    let (i, &sigma) = svd
        .singular_values
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .expect("nonempty matrix");
    let u = svd.u.as_ref().expect("requested u").column(i).iter().copied().collect();
    let v = svd.v_t.as_ref().expect("requested v").row(i).iter().copied().collect();
    let argmax = FactorTuple::new(vec![u, v])?;
    finish(t, sigma, argmax, OracleMethod::MatrixSvd)
}

/// `λ* = ∏‖x^μ‖` for the rank-one tensor `τ₁(x)`.
pub fn rank_one_exact(x: &FactorTuple) -> Result<OracleResult> {
    let t = outer_rank_one(x);
    let lambda_star = x.norms().iter().product();
    finish(&t, lambda_star, x.normalized(), OracleMethod::Exact)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TestTensorKind {
    RandomGaussian,
    /// Superdiagonal entries `T[i,…,i] = values[i]`; all modes must have equal size.
    Diagonal(Vec<f64>),
    RankOne(FactorTuple),
    /// `τ₁(x) + eps·G` with standard normal `G`.
    RankOnePlusNoise { factors: FactorTuple, eps: f64 },
    /// `Σ λ_i τ₁(u_i¹, …, u_i^d)` with orthonormal `u_1^μ, u_2^μ, …` in every mode.
    Odeco(Vec<f64>),
}

pub fn make_test_tensor(kind: &TestTensorKind, dims: &[usize], seed: u64) -> Result<DenseTensor> {
    make_test_tensor_with(kind, dims, &mut seeded_rng(seed))
}

pub fn make_test_tensor_with(
    kind: &TestTensorKind,
    dims: &[usize],
    rng: &mut SeededRng,
) -> Result<DenseTensor> {
    crate::tensor::validate_dims(dims)?;
    let len: usize = dims.iter().product();
    match kind {
        TestTensorKind::RandomGaussian => DenseTensor::new(dims.to_vec(), gaussian_vec(rng, len)),
        TestTensorKind::Diagonal(values) => {
            let n = dims[0];
            if dims.iter().any(|&m| m != n) {
                return Err(Error::InvalidParameter(
                    "diagonal tensors need equal mode sizes".into(),
                ));
            }
            if values.len() > n {
                return Err(Error::InvalidParameter(format!(
                    "{} diagonal values for mode size {n}",
                    values.len()
                )));
            }
            DenseTensor::from_fn(dims.to_vec(), |i| {
                if i.iter().all(|&j| j == i[0]) {
                    values.get(i[0]).copied().unwrap_or(0.0)
                } else {
                    0.0
                }
            })
        }
        TestTensorKind::RankOne(x) => {
            check_factor_dims(x, dims)?;
            Ok(outer_rank_one(x))
        }
        TestTensorKind::RankOnePlusNoise { factors, eps } => {
            check_factor_dims(factors, dims)?;
            if !eps.is_finite() || *eps < 0.0 {
                return Err(Error::InvalidParameter("eps must be finite and >= 0".into()));
            }
            let base = outer_rank_one(factors);
            if *eps == 0.0 {
                return Ok(base);
            }
            let noise = DenseTensor::new(dims.to_vec(), gaussian_vec(rng, len))?;
            base.add_scaled(*eps, &noise)
        }
        TestTensorKind::Odeco(weights) => {
            let r = weights.len();
            if r == 0 || dims.iter().any(|&n| n < r) {
                return Err(Error::InvalidParameter(format!(
                    "{r} orthogonal terms do not fit dims {dims:?}"
                )));
            }
            let bases: Vec<DMatrix<f64>> = dims
                .iter()
                .map(|&n| {
                    let g = DMatrix::from_column_slice(n, r, &gaussian_vec(rng, n * r));
                    g.qr().q()
                })
                .collect();
            let mut acc = DenseTensor::zeros(dims.to_vec())?;
            for (i, &w) in weights.iter().enumerate() {
                let x = FactorTuple::new(
                    bases.iter().map(|q| q.column(i).iter().copied().collect()).collect(),
                )?;
                acc = acc.add_scaled(w, &outer_rank_one(&x))?;
            }
            Ok(acc)
        }
    }
}

fn check_factor_dims(x: &FactorTuple, dims: &[usize]) -> Result<()> {
    if x.dims() != dims {
        return Err(Error::DimensionMismatch(format!(
            "factor lengths {:?} vs dims {:?}",
            x.dims(),
            dims
        )));
    }
    Ok(())
}
