//! Dense tensors, factor tuples and the multilinear primitives built on them.
//!
//! Entries are stored in lexicographic order with the last index running
//! fastest. Mode indices are zero-based throughout the crate.
//!
//! Contractions are carried out one mode at a time, so the rank-one tensor
//! `x¹ ∘ ⋯ ∘ x^d` is never materialized when evaluating the multilinear form
//! `F(x) = ⟨T, x¹ ∘ ⋯ ∘ x^d⟩` or its partial contractions `F^μ(x)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A dense `n₁ × ⋯ × n_d` array of finite `f64` values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseTensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl DenseTensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        validate_dims(&dims)?;
        let len: usize = dims.iter().product();
        if data.len() != len {
            return Err(Error::DimensionMismatch(format!(
                "dims {:?} require {} entries, got {}",
                dims,
                len,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(pos));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Result<Self> {
        validate_dims(&dims)?;
        let len = dims.iter().product();
        Ok(Self {
            dims,
            data: vec![0.0; len],
        })
    }

    /// Builds a tensor by evaluating `f` at every multi-index in storage order.
    pub fn from_fn(dims: Vec<usize>, mut f: impl FnMut(&[usize]) -> f64) -> Result<Self> {
        validate_dims(&dims)?;
        let len: usize = dims.iter().product();
        let mut data = Vec::with_capacity(len);
        let mut index = vec![0usize; dims.len()];
        for _ in 0..len {
            data.push(f(&index));
            increment_index(&mut index, &dims);
        }
        Self::new(dims, data)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn order(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn linear_index(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.dims.len());
        index
            .iter()
            .zip(&self.dims)
            .fold(0, |acc, (&i, &n)| acc * n + i)
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.linear_index(index)]
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    /// Entrywise `self + alpha * other`.
    pub fn add_scaled(&self, alpha: f64, other: &DenseTensor) -> Result<DenseTensor> {
        check_same_dims(self, other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + alpha * b)
            .collect();
        DenseTensor::new(self.dims.clone(), data)
    }

    pub fn scaled(&self, alpha: f64) -> DenseTensor {
        DenseTensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|v| alpha * v).collect(),
        }
    }
}

/// A tuple `(x¹, …, x^d)` of mode vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorTuple {
    vectors: Vec<Vec<f64>>,
}

impl FactorTuple {
    pub fn new(vectors: Vec<Vec<f64>>) -> Result<Self> {
        if vectors.is_empty() {
            return Err(Error::DimensionMismatch(
                "factor tuple needs at least one mode".into(),
            ));
        }
        let mut offset = 0;
        for v in &vectors {
            if v.is_empty() {
                return Err(Error::DimensionMismatch("empty mode vector".into()));
            }
            if let Some(pos) = v.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite(offset + pos));
            }
            offset += v.len();
        }
        Ok(Self { vectors })
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        validate_dims(dims)?;
        Ok(Self {
            vectors: dims.iter().map(|&n| vec![0.0; n]).collect(),
        })
    }

    pub fn order(&self) -> usize {
        self.vectors.len()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.vectors.iter().map(Vec::len).collect()
    }

    pub fn vector(&self, mu: usize) -> &[f64] {
        &self.vectors[mu]
    }

    pub fn vectors(&self) -> &[Vec<f64>] {
        &self.vectors
    }

    /// Replaces mode `mu`. The new vector must have the same length and be finite.
    pub fn set_vector(&mut self, mu: usize, v: Vec<f64>) -> Result<()> {
        if mu >= self.vectors.len() {
            return Err(Error::ModeOutOfRange {
                mode: mu,
                order: self.vectors.len(),
            });
        }
        if v.len() != self.vectors[mu].len() {
            return Err(Error::DimensionMismatch(format!(
                "mode {} expects length {}, got {}",
                mu,
                self.vectors[mu].len(),
                v.len()
            )));
        }
        if let Some(pos) = v.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(pos));
        }
        self.vectors[mu] = v;
        Ok(())
    }

    pub fn norms(&self) -> Vec<f64> {
        self.vectors.iter().map(|v| norm(v)).collect()
    }

    /// Each mode divided by its Euclidean norm. Zero modes are left as they are.
    pub fn normalized(&self) -> FactorTuple {
        FactorTuple {
            vectors: self
                .vectors
                .iter()
                .map(|v| {
                    let n = norm(v);
                    if n > 0.0 {
                        v.iter().map(|x| x / n).collect()
                    } else {
                        v.clone()
                    }
                })
                .collect(),
        }
    }

    /// `‖self − other‖` over all blocks.
    pub fn distance(&self, other: &FactorTuple) -> f64 {
        self.vectors
            .iter()
            .zip(&other.vectors)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn into_vectors(self) -> Vec<Vec<f64>> {
        self.vectors
    }
}

pub(crate) fn validate_dims(dims: &[usize]) -> Result<()> {
    if dims.is_empty() {
        return Err(Error::DimensionMismatch(
            "tensor order must be at least 1".into(),
        ));
    }
    if dims.contains(&0) {
        return Err(Error::DimensionMismatch(format!(
            "all mode sizes must be positive, got {dims:?}"
        )));
    }
    Ok(())
}

pub(crate) fn increment_index(index: &mut [usize], dims: &[usize]) {
    for mu in (0..dims.len()).rev() {
        index[mu] += 1;
        if index[mu] < dims[mu] {
            return;
        }
        index[mu] = 0;
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_same_dims(t: &DenseTensor, s: &DenseTensor) -> Result<()> {
    if t.dims != s.dims {
        return Err(Error::DimensionMismatch(format!(
            "{:?} vs {:?}",
            t.dims, s.dims
        )));
    }
    Ok(())
}

fn check_tuple(t: &DenseTensor, x: &FactorTuple) -> Result<()> {
    if t.dims() != x.dims().as_slice() {
        return Err(Error::DimensionMismatch(format!(
            "tensor dims {:?} vs factor lengths {:?}",
            t.dims(),
            x.dims()
        )));
    }
    Ok(())
}

/// The rank-one tensor `x¹ ∘ x² ∘ ⋯ ∘ x^d`.
pub fn outer_rank_one(x: &FactorTuple) -> DenseTensor {
    let mut data = vec![1.0];
    for v in x.vectors() {
        let mut next = Vec::with_capacity(data.len() * v.len());
        for &a in &data {
            next.extend(v.iter().map(|&b| a * b));
        }
        data = next;
    }
    DenseTensor {
        dims: x.dims(),
        data,
    }
}

pub fn frobenius_inner(t: &DenseTensor, s: &DenseTensor) -> Result<f64> {
    check_same_dims(t, s)?;
    Ok(dot(&t.data, &s.data))
}

pub fn frobenius_norm(t: &DenseTensor) -> f64 {
    t.frobenius_norm()
}

/// Contracts `mode` of a row-major block with `v`, returning the block with
/// that mode removed.
fn contract_mode(data: &[f64], dims: &[usize], mode: usize, v: &[f64]) -> Vec<f64> {
    let n = dims[mode];
    let outer: usize = dims[..mode].iter().product();
    let inner: usize = dims[mode + 1..].iter().product();
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        let dst = &mut out[o * inner..(o + 1) * inner];
        for (j, &w) in v.iter().enumerate() {
            let src = &data[(o * n + j) * inner..(o * n + j + 1) * inner];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += w * s;
            }
        }
    }
    out
}

/// `F(x) = ⟨T, τ₁(x)⟩`, contracting from the last mode to the first.
pub fn multilinear_form(t: &DenseTensor, x: &FactorTuple) -> Result<f64> {
    check_tuple(t, x)?;
    let mut dims = t.dims.clone();
    let mut data = t.data.clone();
    for mu in (0..dims.len()).rev() {
        data = contract_mode(&data, &dims, mu, x.vector(mu));
        dims.pop();
    }
    Ok(data[0])
}

/// `F^μ(x)`: contraction with every mode vector except `x^μ`, which is ignored.
pub fn partial_contraction(t: &DenseTensor, x: &FactorTuple, mu: usize) -> Result<Vec<f64>> {
    check_tuple(t, x)?;
    let d = t.order();
    if mu >= d {
        return Err(Error::ModeOutOfRange { mode: mu, order: d });
    }
    let mut dims = t.dims.clone();
    let mut data = t.data.clone();
    // trailing modes, last first
    for nu in (mu + 1..d).rev() {
        data = contract_mode(&data, &dims, nu, x.vector(nu));
        dims.pop();
    }
    // leading modes, always at position 0 of what remains
    for nu in 0..mu {
        data = contract_mode(&data, &dims, 0, x.vector(nu));
        dims.remove(0);
    }
    Ok(data)
}

/// `(Σ_μ ‖x^μ‖²)^{1/2}`.
pub fn tuple_norm(x: &FactorTuple) -> f64 {
    x.vectors()
        .iter()
        .map(|v| v.iter().map(|a| a * a).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Maximum over modes of `‖F^μ(y) − λ y^μ‖` with `λ = F(y)`. Vanishes exactly
/// at critical points of `F` on the product of unit spheres when `y` has unit
/// factors.
pub fn spherical_residual(t: &DenseTensor, y: &FactorTuple) -> Result<f64> {
    let lambda = multilinear_form(t, y)?;
    let mut worst = 0.0f64;
    for mu in 0..y.order() {
        let g = partial_contraction(t, y, mu)?;
        let r = g
            .iter()
            .zip(y.vector(mu))
            .map(|(a, b)| (a - lambda * b).powi(2))
            .sum::<f64>()
            .sqrt();
        worst = worst.max(r);
    }
    Ok(worst)
}
