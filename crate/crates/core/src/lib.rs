//! Best rank-one tensor approximation by the higher-order power method and
//! alternating least squares, cyclic block coordinate descent for (regularized)
//! CP-format objectives, and empirical convergence diagnostics.
//!
//! Modules:
//! - [`tensor`]: dense tensors, factor tuples, multilinear form and contractions.
//! - [`hopm`]: the higher-order power method and the shared [`StoppingRule`].
//! - [`als`]: rank-one ALS with the monotonicity/boundedness audit and the
//!   HOPM equivalence check.
//! - [`cp`]: block coordinate descent over CP factor matrices.
//! - [`diagnostics`]: iteration traces, rate fits and Łojasiewicz exponent estimates.
//! - [`oracle`]: independent ground truth for small instances.
//! - [`io`]: text formats for tensors, CP factors, operators and traces.

pub mod als;
pub mod cp;
pub mod diagnostics;
pub mod error;
pub mod hopm;
pub mod io;
pub mod oracle;
pub mod random;
pub mod tensor;

pub use als::{run_als, verify_equivalence, AlsRun, AlsState, AuditReport, EquivalenceReport};
pub use cp::{run_bcd, BcdOptions, BcdRun, CpFactors, Objective, ObjectiveKind};
pub use diagnostics::trace::{BlockRecord, IterationTrace, StopReason, TraceHeader};
pub use diagnostics::{check_summability, estimate_lojasiewicz, fit_rate, RateFit, Regime};
pub use error::{Error, Result};
pub use hopm::{run_hopm, HopmState, StoppingRule};
pub use oracle::{OracleMethod, OracleResult, TestTensorKind};
pub use tensor::{DenseTensor, FactorTuple};
