//! Iteration traces: per-block records grouped into sweeps.
//!
//! Every algorithm in the crate emits the same record shape. Fields that a
//! method does not produce are left empty. For HOPM the `grad_norm` slot holds
//! the spherical residual `max_μ ‖F^μ(y) − λ y^μ‖`, and `f` holds
//! `½(‖T‖² − λ²)`, the least-squares error of the best scaling of `τ₁(y)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Hopm,
    Als,
    Bcd,
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxSweeps,
    LambdaTol,
    GradTol,
    StepTol,
    DegenerateBlock,
}

/// Run metadata, written as the first line of a trace file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub method: Method,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub dims: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_star: Option<f64>,
    /// Objective at the starting point the sweeps are measured from.
    pub f0: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_norm0: Option<f64>,
    /// Lower bound on the block curvature used by the summability check.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma0: Option<f64>,
}

impl TraceHeader {
    pub fn new(method: Method, dims: Vec<usize>, f0: f64) -> Self {
        Self {
            method,
            seed: None,
            dims,
            rank: None,
            sigma_star: None,
            f0,
            lambda0: None,
            grad_norm0: None,
            sigma0: None,
        }
    }
}

/// Pass/fail flags of the rank-one ALS invariant audit for one block update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Checks {
    pub p33: bool,
    pub p34: bool,
    pub p35: bool,
    pub p36: bool,
    pub p37: bool,
    /// Evaluated on the closing block of each sweep; `true` elsewhere.
    pub p38: bool,
}

impl Checks {
    pub fn all(&self) -> bool {
        self.p33 && self.p34 && self.p35 && self.p36 && self.p37 && self.p38
    }
}

/// One block update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockRecord {
    pub sweep: usize,
    pub mode: usize,
    pub f: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    /// `‖x^μ_{k+1} − x^μ_k‖` for the updated block.
    pub step_norm: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_norm: Option<f64>,
    #[serde(
        default,
        alias = "sigma_k_mu",
        skip_serializing_if = "Option::is_none"
    )]
    pub sigma_block: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma_bound_used: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checks: Option<Checks>,
}

impl BlockRecord {
    pub fn new(sweep: usize, mode: usize, f: f64, step_norm: f64) -> Self {
        Self {
            sweep,
            mode,
            f,
            lambda: None,
            step_norm,
            grad_norm: None,
            sigma_block: None,
            gamma_bound_used: None,
            checks: None,
        }
    }
}

/// Sweep-level view derived from the block records of one sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRecord {
    pub sweep: usize,
    /// Objective at the end of the sweep, `f(x_k)`.
    pub f: f64,
    pub lambda: Option<f64>,
    /// `‖x_k − x_{k−1}‖` over all blocks.
    pub step_norm: f64,
    /// Gradient norm at the end of the sweep.
    pub grad_norm: Option<f64>,
    pub sigmas: Vec<f64>,
}

impl SweepRecord {
    fn from_blocks(blocks: &[BlockRecord]) -> Self {
        let last = blocks.last().expect("sweep has at least one block");
        Self {
            sweep: last.sweep,
            f: last.f,
            lambda: last.lambda,
            step_norm: blocks
                .iter()
                .map(|b| b.step_norm * b.step_norm)
                .sum::<f64>()
                .sqrt(),
            grad_norm: last.grad_norm,
            sigmas: blocks.iter().filter_map(|b| b.sigma_block).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TerminalSummary {
    pub f_star: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_star: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_norm: Option<f64>,
    /// Running minimum of the sampled block curvatures (CP runs).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_sigma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stability_warning: Option<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationTrace {
    pub header: TraceHeader,
    blocks: Vec<BlockRecord>,
    sweeps: Vec<SweepRecord>,
    open_from: usize,
    pub stop_reason: Option<StopReason>,
    pub terminal: Option<TerminalSummary>,
}

impl IterationTrace {
    pub fn new(header: TraceHeader) -> Self {
        Self {
            header,
            blocks: Vec::new(),
            sweeps: Vec::new(),
            open_from: 0,
            stop_reason: None,
            terminal: None,
        }
    }

    /// Appends a block record. Sweep numbers must not decrease, and modes
    /// within a sweep must strictly increase.
    pub fn push_block(&mut self, record: BlockRecord) -> Result<()> {
        if let Some(prev) = self.blocks.last() {
            let ok = record.sweep > prev.sweep
                || (record.sweep == prev.sweep && record.mode > prev.mode);
            if !ok {
                return Err(Error::Schema {
                    line: self.blocks.len() + 1,
                    message: format!(
                        "record (sweep {}, mode {}) does not follow (sweep {}, mode {})",
                        record.sweep, record.mode, prev.sweep, prev.mode
                    ),
                });
            }
            if record.sweep > prev.sweep && self.open_from < self.blocks.len() {
                self.close_sweep();
            }
        }
        self.blocks.push(record);
        Ok(())
    }

    /// Closes the currently open sweep, if any.
    pub fn close_sweep(&mut self) {
        if self.open_from < self.blocks.len() {
            let rec = SweepRecord::from_blocks(&self.blocks[self.open_from..]);
            self.sweeps.push(rec);
            self.open_from = self.blocks.len();
        }
    }

    /// Closes the open sweep and fills the terminal summary from the last
    /// sweep when none was set explicitly.
    pub fn finish(&mut self, reason: Option<StopReason>) {
        self.close_sweep();
        if reason.is_some() {
            self.stop_reason = reason;
        }
        if self.terminal.is_none() {
            if let Some(last) = self.sweeps.last() {
                self.terminal = Some(TerminalSummary {
                    f_star: last.f,
                    lambda_star: last.lambda,
                    grad_norm: last.grad_norm,
                    min_sigma: None,
                    stability_warning: None,
                });
            }
        }
    }

    pub fn blocks(&self) -> &[BlockRecord] {
        &self.blocks
    }

    pub fn sweeps(&self) -> &[SweepRecord] {
        &self.sweeps
    }

    pub fn num_sweeps(&self) -> usize {
        self.sweeps.len()
    }

    pub fn lambdas(&self) -> Vec<f64> {
        self.sweeps.iter().filter_map(|s| s.lambda).collect()
    }

    pub fn f_values(&self) -> Vec<f64> {
        self.sweeps.iter().map(|s| s.f).collect()
    }

    pub fn step_norms(&self) -> Vec<f64> {
        self.sweeps.iter().map(|s| s.step_norm).collect()
    }

    /// A synthetic single-block-per-sweep trace built from per-sweep
    /// `(f, step_norm, grad_norm)` triples. Sweeps are numbered from 1.
    pub fn synthetic(f0: f64, rows: &[(f64, f64, f64)], f_star: f64) -> Self {
        let mut trace = IterationTrace::new(TraceHeader::new(Method::Synthetic, vec![1], f0));
        for (k, &(f, step, grad)) in rows.iter().enumerate() {
            let mut rec = BlockRecord::new(k + 1, 0, f, step);
            rec.grad_norm = Some(grad);
            trace
                .push_block(rec)
                .expect("synthetic sweeps are increasing");
        }
        trace.terminal = Some(TerminalSummary {
            f_star,
            lambda_star: None,
            grad_norm: rows.last().map(|r| r.2),
            min_sigma: None,
            stability_warning: None,
        });
        trace.finish(None);
        trace
    }

    /// A synthetic trace whose tail sums of step norms reproduce `errors`
    /// exactly: `Σ_{j≥k} step_j = errors[k]`.
    pub fn from_error_proxy(errors: &[f64]) -> Self {
        let n = errors.len();
        let rows: Vec<(f64, f64, f64)> = (0..n)
            .map(|k| {
                let step = if k + 1 < n {
                    errors[k] - errors[k + 1]
                } else {
                    errors[k]
                };
                (0.0, step, 0.0)
            })
            .collect();
        Self::synthetic(0.0, &rows, 0.0)
    }
}
