//! `tenrank`: generate test tensors, run HOPM/ALS/CP block coordinate
//! descent, and analyze the resulting traces.
//!
//! stdout carries one JSON document per invocation; diagnostics go to stderr.
//! Exit codes: 0 success, 1 I/O or parse failure, 2 bad arguments, 3 bad start
//! or degenerate block (strict), 4 audit violation (strict), 5 insufficient
//! data for diagnostics.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use tenrank_core::als::{run_als, singular_value_certificate};
use tenrank_core::cp::{BcdOptions, DEFAULT_STABILITY_THRESHOLD};
use tenrank_core::diagnostics::{diagnose, rate_table};
use tenrank_core::hopm::{auto_start, run_hopm, run_hopm_audited};
use tenrank_core::io;
use tenrank_core::oracle::make_test_tensor_with;
use tenrank_core::random::{seeded_rng, unit_gaussian_tuple};
use tenrank_core::tensor::spherical_residual;
use tenrank_core::{
    run_bcd, verify_equivalence, CpFactors, Error, FactorTuple, IterationTrace, Objective,
    StoppingRule, TestTensorKind,
};

#[derive(Parser)]
#[command(name = "tenrank", version, about = "Rank-one and CP tensor approximation with convergence diagnostics")]
struct Cli {
    /// Increase log verbosity on stderr (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a test tensor in the text format.
    Gen(GenArgs),
    /// Best rank-one approximation by HOPM or ALS.
    Approx(ApproxArgs),
    /// Rank-r CP approximation by block coordinate descent.
    Cp(CpArgs),
    /// Rate fit, exponent estimate and summability check for a trace.
    Diagnose(DiagnoseArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Random,
    Diagonal,
    Rank1,
    Rank1plusnoise,
    Odeco,
}

#[derive(clap::Args)]
struct GenArgs {
    #[arg(long, value_enum)]
    kind: Kind,
    /// Mode sizes, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    dims: Vec<usize>,
    /// Diagonal values or orthogonal term weights.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    values: Vec<f64>,
    /// Rank-one factors as `a1,a2;b1,b2;...`. Drawn at random when omitted.
    #[arg(long, allow_hyphen_values = true)]
    factors: Option<String>,
    /// Noise level for rank1plusnoise.
    #[arg(long, default_value_t = 0.0)]
    eps: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    Hopm,
    Als,
}

#[derive(clap::Args)]
struct RuleArgs {
    #[arg(long, default_value_t = 500)]
    max_sweeps: usize,
    #[arg(long, default_value_t = 1e-10)]
    grad_tol: f64,
    #[arg(long, default_value_t = 1e-12)]
    step_tol: f64,
    #[arg(long)]
    lambda_tol: Option<f64>,
}

impl RuleArgs {
    fn rule(&self) -> StoppingRule {
        StoppingRule {
            max_sweeps: self.max_sweeps,
            lambda_tol: self.lambda_tol,
            grad_tol: Some(self.grad_tol),
            step_tol: Some(self.step_tol),
        }
    }
}

#[derive(clap::Args)]
struct ApproxArgs {
    /// Tensor file.
    input: PathBuf,
    #[arg(long, value_enum, default_value = "als")]
    method: MethodArg,
    /// Check the monotonicity and boundedness invariants on every block.
    #[arg(long)]
    audit: bool,
    /// Exit with code 4 when the audit finds a violation.
    #[arg(long)]
    strict: bool,
    #[command(flatten)]
    rule: RuleArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON-lines trace output.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Compare HOPM and ALS iterates from the same start instead of solving.
    #[arg(long)]
    verify_equivalence: bool,
    /// Sweeps for --verify-equivalence.
    #[arg(long, default_value_t = 50)]
    sweeps: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum ObjectiveArg {
    Ls,
    Energy,
}

#[derive(clap::Args)]
struct CpArgs {
    #[arg(long, value_enum, default_value = "ls")]
    objective: ObjectiveArg,
    /// Target tensor (least squares).
    #[arg(long, required_if_eq("objective", "ls"))]
    target: Option<PathBuf>,
    /// Operator file (energy).
    #[arg(long, required_if_eq("objective", "energy"))]
    operator: Option<PathBuf>,
    /// Right-hand side tensor (energy).
    #[arg(long, required_if_eq("objective", "energy"))]
    rhs: Option<PathBuf>,
    #[arg(long)]
    rank: usize,
    #[arg(long, default_value_t = 0.0)]
    sigma_star: f64,
    #[arg(long, default_value_t = DEFAULT_STABILITY_THRESHOLD)]
    stability_threshold: f64,
    /// Compute the block curvature every n-th block update (0 disables).
    #[arg(long, default_value_t = 1)]
    sigma_every: usize,
    /// Fail with code 3 on a singular block system.
    #[arg(long)]
    strict: bool,
    #[command(flatten)]
    rule: RuleArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Write the final factor matrices here.
    #[arg(long)]
    factors_out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct DiagnoseArgs {
    /// JSON-lines trace file.
    trace: PathBuf,
    /// Write (k, e_k, f_k - f_*, grad_norm) rows here.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Require the last step to be at most this.
    #[arg(long)]
    step_tol: Option<f64>,
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::BadStart(_) | Error::DegenerateBlock { .. } => 3,
            Error::AuditViolation(_) => 4,
            Error::InsufficientData(_) => 5,
            Error::InvalidParameter(_)
            | Error::DimensionMismatch(_)
            | Error::DimsTooLarge(_)
            | Error::ModeOutOfRange { .. } => 2,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn with_path(path: &Path) -> impl FnOnce(Error) -> Failure + '_ {
    move |e| {
        let mut f = Failure::from(e);
        f.message = format!("{}: {}", path.display(), f.message);
        f
    }
}

fn emit(value: &Value) {
    println!("{value}");
}

fn parse_factors(spec: &str) -> Result<FactorTuple, Failure> {
    let vectors = spec
        .split(';')
        .map(|part| {
            part.split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| Failure {
            code: 2,
            message: format!("invalid --factors: {e}"),
        })?;
    Ok(FactorTuple::new(vectors)?)
}

fn cmd_gen(args: GenArgs) -> Result<(), Failure> {
    let mut rng = seeded_rng(args.seed);
    let mut factors = || -> Result<FactorTuple, Failure> {
        match &args.factors {
            Some(s) => parse_factors(s),
            None => Ok(unit_gaussian_tuple(&mut rng, &args.dims)),
        }
    };
    let kind = match args.kind {
        Kind::Random => TestTensorKind::RandomGaussian,
        Kind::Diagonal => TestTensorKind::Diagonal(args.values.clone()),
        Kind::Rank1 => TestTensorKind::RankOne(factors()?),
        Kind::Rank1plusnoise => TestTensorKind::RankOnePlusNoise {
            factors: factors()?,
            eps: args.eps,
        },
        Kind::Odeco => TestTensorKind::Odeco(args.values.clone()),
    };
    let t = make_test_tensor_with(&kind, &args.dims, &mut rng)?;
    io::write_tensor(&t, &args.output).map_err(with_path(&args.output))?;
    emit(&json!({
        "dims": t.dims(),
        "frobenius_norm": t.frobenius_norm(),
        "seed": args.seed,
        "output": args.output,
    }));
    Ok(())
}

fn write_trace(path: &Option<PathBuf>, trace: &IterationTrace) -> Result<(), Failure> {
    if let Some(p) = path {
        io::write_trace(trace, p).map_err(with_path(p))?;
    }
    Ok(())
}

fn cmd_approx(args: ApproxArgs) -> Result<(), Failure> {
    let t = io::read_tensor(&args.input).map_err(with_path(&args.input))?;
    let rule = args.rule.rule();
    rule.validate()?;
    let mut rng = seeded_rng(args.seed);
    let x0 = auto_start(&t, &mut rng)?;

    if args.verify_equivalence {
        let rep = verify_equivalence(&t, &x0, args.sweeps)?;
        emit(&json!({
            "sweeps": args.sweeps,
            "seed": args.seed,
            "max_factor_deviation": rep.max_factor_deviation,
            "max_lambda_deviation": rep.max_lambda_deviation,
            "tolerance": rep.tolerance,
            "pass": rep.pass,
        }));
        if !rep.pass {
            return Err(Failure {
                code: 4,
                message: "HOPM and ALS iterates diverge beyond tolerance".into(),
            });
        }
        return Ok(());
    }

    let t_norm_sq = t.frobenius_norm().powi(2);
    let (summary, audit_pass, violations) = match args.method {
        MethodArg::Als => {
            let mut run = run_als(&t, x0, rule, args.audit)?;
            run.trace.header.seed = Some(args.seed);
            write_trace(&args.trace, &run.trace)?;
            let (lambda, residual) = singular_value_certificate(&t, &run.state.x)?;
            let audit_pass = run.audit.as_ref().map(|a| a.pass());
            let violations = run
                .audit
                .as_ref()
                .map(|a| format!("{:?}", a.violations))
                .unwrap_or_default();
            let summary = json!({
                "method": "als",
                "seed": args.seed,
                "lambda_star": lambda,
                "f_star": run.state.f_value,
                "sweeps": run.state.sweep,
                "stop_reason": run.trace.stop_reason,
                "grad_norm": run.trace.terminal.as_ref().and_then(|s| s.grad_norm),
                "spherical_residual": residual,
                "kappa_hat": run.audit.as_ref().and_then(|a| a.kappa_hat),
                "audit_pass": audit_pass,
            });
            (summary, audit_pass, violations)
        }
        MethodArg::Hopm => {
            let (state, mut trace, audit_pass, violations) = if args.audit {
                let (state, trace, audit) = run_hopm_audited(&t, x0.clone(), rule, false)?;
                let als = run_als(&t, x0, rule, true)?;
                let als_audit = als.audit.expect("audit requested");
                let mut v = audit.violations.clone();
                if als_audit.violations.total() > 0 {
                    v.push(format!("ALS audit: {:?}", als_audit.violations));
                }
                (state, trace, Some(audit.pass() && als_audit.pass()), v.join("; "))
            } else {
                let (state, trace) = run_hopm(&t, x0, rule)?;
                (state, trace, None, String::new())
            };
            trace.header.seed = Some(args.seed);
            write_trace(&args.trace, &trace)?;
            let summary = json!({
                "method": "hopm",
                "seed": args.seed,
                "lambda_star": state.lambda,
                "f_star": 0.5 * (t_norm_sq - state.lambda * state.lambda),
                "sweeps": state.sweep,
                "stop_reason": trace.stop_reason,
                "spherical_residual": spherical_residual(&t, &state.y)?,
                "audit_pass": audit_pass,
            });
            (summary, audit_pass, violations)
        }
    };
    emit(&summary);
    if args.strict && audit_pass == Some(false) {
        return Err(Failure {
            code: 4,
            message: format!("audit violation: {violations}"),
        });
    }
    Ok(())
}

fn cmd_cp(args: CpArgs) -> Result<(), Failure> {
    let obj = match args.objective {
        ObjectiveArg::Ls => {
            let p = args.target.as_ref().expect("required by clap");
            Objective::least_squares(io::read_tensor(p).map_err(with_path(p))?, args.sigma_star)?
        }
        ObjectiveArg::Energy => {
            let rp = args.rhs.as_ref().expect("required by clap");
            let b = io::read_tensor(rp).map_err(with_path(rp))?;
            let op = args.operator.as_ref().expect("required by clap");
            let a = io::read_operator(op, Some(b.dims())).map_err(with_path(op))?;
            Objective::quadratic_energy(a, b, args.sigma_star)?
        }
    };
    let rule = args.rule.rule();
    let options = BcdOptions {
        stability_threshold: args.stability_threshold,
        sigma_every: args.sigma_every,
        strict: args.strict,
    };
    let mut rng = seeded_rng(args.seed);
    let x0 = CpFactors::random(obj.dims(), args.rank, &mut rng)?;
    let mut run = run_bcd(&obj, x0, rule, options)?;
    let trace = &mut run.trace.trace;
    trace.header.seed = Some(args.seed);
    write_trace(&args.trace, trace)?;
    if let Some(p) = &args.factors_out {
        io::write_cp_factors(&run.factors, p).map_err(with_path(p))?;
    }
    if run.trace.stability_warning {
        log::warn!(
            "StabilityWarning: minimal block curvature {:e} fell below {:e}",
            run.trace.min_sigma.unwrap_or(f64::NAN),
            args.stability_threshold
        );
    }
    let last = run.trace.trace.sweeps().last();
    emit(&json!({
        "objective": match args.objective { ObjectiveArg::Ls => "ls", ObjectiveArg::Energy => "energy" },
        "seed": args.seed,
        "rank": args.rank,
        "sigma_star": args.sigma_star,
        "f_star": last.map(|s| s.f),
        "sweeps": run.trace.trace.num_sweeps(),
        "stop_reason": run.trace.trace.stop_reason,
        "grad_norm": last.and_then(|s| s.grad_norm),
        "step_norm": last.map(|s| s.step_norm),
        "gamma0": run.trace.gamma0,
        "min_sigma": run.trace.min_sigma,
        "stability_warning": run.trace.stability_warning,
        "decrease_violations": run.trace.decrease_violations,
    }));
    Ok(())
}

fn cmd_diagnose(args: DiagnoseArgs) -> Result<(), Failure> {
    let trace = io::read_trace(&args.trace).map_err(with_path(&args.trace))?;
    if let Some(p) = &args.csv {
        let f = File::create(p).map_err(|e| with_path(p)(e.into()))?;
        io::write_rate_csv(&rate_table(&trace), BufWriter::new(f)).map_err(with_path(p))?;
    }
    let report = diagnose(&trace, args.step_tol)?;
    emit(&serde_json::to_value(&report).expect("report serializes"));
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Approx(a) => cmd_approx(a),
        Command::Cp(a) => cmd_cp(a),
        Command::Diagnose(a) => cmd_diagnose(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
