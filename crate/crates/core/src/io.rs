//! Text formats for tensors, CP factors, operators and traces.
//!
//! Numbers are written with 17 significant digits, so every finite double
//! survives a write/read round trip unchanged.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::cp::CpFactors;
use crate::diagnostics::trace::{
    BlockRecord, IterationTrace, Method, StopReason, TerminalSummary, TraceHeader,
};
use crate::diagnostics::RateRow;
use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

/// Relative tolerance of the symmetry check on operator files.
pub const OPERATOR_SYMMETRY_TOL: f64 = 1e-10;

fn fmt_num(out: &mut String, v: f64) {
    write!(out, "{v:.16e}").expect("writing to a String cannot fail");
}

fn parse_err(line: usize, column: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        column,
        message: message.into(),
    }
}

/// Whitespace-separated tokens with 1-based line and column numbers.
struct Tokens<'a> {
    lines: Vec<(usize, &'a str)>,
    line: usize,
    pos: usize,
}

impl<'a> Tokens<'a> {
    fn new(text: &'a str) -> Self {
        Self {
            lines: text.lines().enumerate().map(|(i, l)| (i + 1, l)).collect(),
            line: 0,
            pos: 0,
        }
    }

    /// Next non-empty line, returned whole.
    fn next_line(&mut self) -> Option<(usize, &'a str)> {
        if self.pos > 0 {
            self.line += 1;
            self.pos = 0;
        }
        while self.line < self.lines.len() {
            let (n, l) = self.lines[self.line];
            self.line += 1;
            if !l.trim().is_empty() {
                return Some((n, l));
            }
        }
        None
    }

    fn next_token(&mut self) -> Option<(usize, usize, &'a str)> {
        while self.line < self.lines.len() {
            let (n, l) = self.lines[self.line];
            let rest = &l[self.pos..];
            let skipped = rest.len() - rest.trim_start().len();
            let start = self.pos + skipped;
            if start >= l.len() {
                self.line += 1;
                self.pos = 0;
                continue;
            }
            let len = l[start..]
                .find(char::is_whitespace)
                .unwrap_or(l.len() - start);
            self.pos = start + len;
            return Some((n, l[..start].chars().count() + 1, &l[start..start + len]));
        }
        None
    }

    fn last_line(&self) -> usize {
        self.lines.len().max(1)
    }
}

fn parse_f64(line: usize, col: usize, tok: &str) -> Result<f64> {
    let v: f64 = tok
        .parse()
        .map_err(|_| parse_err(line, col, format!("invalid number '{tok}'")))?;
    if !v.is_finite() {
        return Err(parse_err(line, col, format!("non-finite value '{tok}'")));
    }
    Ok(v)
}

fn parse_usize(line: usize, col: usize, tok: &str) -> Result<usize> {
    tok.parse()
        .map_err(|_| parse_err(line, col, format!("invalid integer '{tok}'")))
}

/// Parses `key: a b c` into its integer fields.
fn parse_header(line: usize, text: &str, key: &str) -> Result<Vec<usize>> {
    let body = text
        .trim_start()
        .strip_prefix(key)
        .and_then(|r| r.strip_prefix(':'))
        .ok_or_else(|| parse_err(line, 1, format!("expected '{key}:' header")))?;
    let offset = text.len() - body.len();
    let mut out = Vec::new();
    let mut pos = 0;
    for tok in body.split_whitespace() {
        let at = body[pos..].find(tok).expect("token comes from the same string") + pos;
        pos = at + tok.len();
        out.push(parse_usize(line, offset + at + 1, tok)?);
    }
    Ok(out)
}

fn read_numbers(tokens: &mut Tokens<'_>, count: usize, what: &str) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        match tokens.next_token() {
            Some((l, c, tok)) => out.push(parse_f64(l, c, tok)?),
            None => {
                return Err(parse_err(
                    tokens.last_line(),
                    1,
                    format!("expected {count} {what} entries, found {}", out.len()),
                ))
            }
        }
    }
    Ok(out)
}

fn expect_end(tokens: &mut Tokens<'_>, count: usize) -> Result<()> {
    if let Some((l, c, tok)) = tokens.next_token() {
        return Err(parse_err(
            l,
            c,
            format!("unexpected token '{tok}' after the expected {count} entries"),
        ));
    }
    Ok(())
}

pub fn format_tensor(t: &DenseTensor) -> String {
    let mut out = String::from("dims:");
    for n in t.dims() {
        write!(out, " {n}").unwrap();
    }
    out.push('\n');
    let row = *t.dims().last().expect("tensors have at least one mode");
    for chunk in t.as_slice().chunks(row) {
        for (i, v) in chunk.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            fmt_num(&mut out, *v);
        }
        out.push('\n');
    }
    out
}

pub fn parse_tensor(text: &str) -> Result<DenseTensor> {
    let mut tokens = Tokens::new(text);
    let (line, head) = tokens
        .next_line()
        .ok_or_else(|| parse_err(1, 1, "empty tensor file"))?;
    let dims = parse_header(line, head, "dims")?;
    if dims.is_empty() || dims.contains(&0) {
        return Err(parse_err(line, 1, format!("invalid dims {dims:?}")));
    }
    let count = dims
        .iter()
        .try_fold(1usize, |a, &n| a.checked_mul(n))
        .ok_or_else(|| parse_err(line, 1, "tensor size overflows"))?;
    let data = read_numbers(&mut tokens, count, "tensor")?;
    expect_end(&mut tokens, count)?;
    DenseTensor::new(dims, data)
}

pub fn write_tensor(t: &DenseTensor, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, format_tensor(t))?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<DenseTensor> {
    parse_tensor(&fs::read_to_string(path)?)
}

fn format_matrix_rows(out: &mut String, m: &DMatrix<f64>) {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if j > 0 {
                out.push(' ');
            }
            fmt_num(out, m[(i, j)]);
        }
        out.push('\n');
    }
}

pub fn format_cp_factors(f: &CpFactors) -> String {
    let mut out = format!("cp: {} {}\ndims:", f.order(), f.rank());
    for n in f.dims() {
        write!(out, " {n}").unwrap();
    }
    out.push('\n');
    for m in f.matrices() {
        out.push('\n');
        format_matrix_rows(&mut out, m);
    }
    out
}

pub fn parse_cp_factors(text: &str) -> Result<CpFactors> {
    let mut tokens = Tokens::new(text);
    let (line, head) = tokens
        .next_line()
        .ok_or_else(|| parse_err(1, 1, "empty CP factor file"))?;
    let dr = parse_header(line, head, "cp")?;
    let [d, r] = dr[..] else {
        return Err(parse_err(line, 1, "expected 'cp: d r'"));
    };
    let (line, head) = tokens
        .next_line()
        .ok_or_else(|| parse_err(line + 1, 1, "missing dims line"))?;
    let dims = parse_header(line, head, "dims")?;
    if dims.len() != d || r == 0 || dims.contains(&0) {
        return Err(parse_err(
            line,
            1,
            format!("dims {dims:?} inconsistent with order {d} and rank {r}"),
        ));
    }
    let total: usize = dims.iter().map(|n| n * r).sum();
    let mut matrices = Vec::with_capacity(d);
    for &n in &dims {
        let rows = read_numbers(&mut tokens, n * r, "factor")?;
        matrices.push(DMatrix::from_row_slice(n, r, &rows));
    }
    expect_end(&mut tokens, total)?;
    CpFactors::new(matrices)
}

pub fn write_cp_factors(f: &CpFactors, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, format_cp_factors(f))?;
    Ok(())
}

pub fn read_cp_factors(path: impl AsRef<Path>) -> Result<CpFactors> {
    parse_cp_factors(&fs::read_to_string(path)?)
}

pub fn format_operator(a: &DMatrix<f64>) -> String {
    let mut out = format!("operator: {}\n", a.nrows());
    format_matrix_rows(&mut out, a);
    out
}

/// Reads a square matrix and checks symmetry to `1e-10 · max(1, max|a_ij|)`.
pub fn parse_operator(text: &str) -> Result<DMatrix<f64>> {
    let mut tokens = Tokens::new(text);
    let (line, head) = tokens
        .next_line()
        .ok_or_else(|| parse_err(1, 1, "empty operator file"))?;
    let n = match parse_header(line, head, "operator")?[..] {
        [n] if n > 0 => n,
        _ => return Err(parse_err(line, 1, "expected 'operator: N' with N > 0")),
    };
    let data = read_numbers(&mut tokens, n * n, "operator")?;
    expect_end(&mut tokens, n * n)?;
    let a = DMatrix::from_row_slice(n, n, &data);
    let tol = OPERATOR_SYMMETRY_TOL * a.amax().max(1.0);
    for i in 0..n {
        for j in 0..i {
            if (a[(i, j)] - a[(j, i)]).abs() > tol {
                return Err(Error::InvalidParameter(format!(
                    "operator not symmetric at ({i}, {j}): {} vs {}",
                    a[(i, j)],
                    a[(j, i)]
                )));
            }
        }
    }
    Ok(a)
}

pub fn write_operator(a: &DMatrix<f64>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, format_operator(a))?;
    Ok(())
}

/// Reads an operator and checks its size against the companion tensor dims.
pub fn read_operator(path: impl AsRef<Path>, dims: Option<&[usize]>) -> Result<DMatrix<f64>> {
    let a = parse_operator(&fs::read_to_string(path)?)?;
    if let Some(dims) = dims {
        let n: usize = dims.iter().product();
        if a.nrows() != n {
            return Err(Error::DimensionMismatch(format!(
                "operator size {} does not match dims {dims:?} (N = {n})",
                a.nrows()
            )));
        }
    }
    Ok(a)
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    header: TraceHeader,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SummaryBody {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stop_reason: Option<StopReason>,
    #[serde(flatten)]
    terminal: TerminalSummary,
}

#[derive(Serialize, Deserialize)]
struct SummaryLine {
    summary: SummaryBody,
}

const BLOCK_KEYS: &[&str] = &[
    "sweep",
    "mode",
    "f",
    "lambda",
    "step_norm",
    "grad_norm",
    "sigma_block",
    "sigma_k_mu",
    "gamma_bound_used",
    "checks",
];
const HEADER_KEYS: &[&str] = &[
    "method",
    "seed",
    "dims",
    "rank",
    "sigma_star",
    "f0",
    "lambda0",
    "grad_norm0",
    "sigma0",
];
const SUMMARY_KEYS: &[&str] = &[
    "stop_reason",
    "f_star",
    "lambda_star",
    "grad_norm",
    "min_sigma",
    "stability_warning",
];

fn block_line(record: &BlockRecord, method: Method) -> String {
    let mut v = serde_json::to_value(record).expect("records serialize");
    if method == Method::Bcd {
        if let Some(obj) = v.as_object_mut() {
            if let Some(s) = obj.remove("sigma_block") {
                obj.insert("sigma_k_mu".into(), s);
            }
        }
    }
    v.to_string()
}

/// Serializes a trace as JSON lines: a header line, one line per block
/// update and a closing summary line.
pub fn format_trace(trace: &IterationTrace) -> String {
    let mut out = serde_json::to_string(&HeaderLine {
        header: trace.header.clone(),
    })
    .expect("header serializes");
    out.push('\n');
    for b in trace.blocks() {
        out.push_str(&block_line(b, trace.header.method));
        out.push('\n');
    }
    if let Some(terminal) = &trace.terminal {
        let line = SummaryLine {
            summary: SummaryBody {
                stop_reason: trace.stop_reason,
                terminal: terminal.clone(),
            },
        };
        out.push_str(&serde_json::to_string(&line).expect("summary serializes"));
        out.push('\n');
    }
    out
}

fn warn_unknown(obj: &Map<String, Value>, known: &[&str], line: usize) {
    for k in obj.keys() {
        if !known.contains(&k.as_str()) {
            log::warn!("trace line {line}: ignoring unknown key '{k}'");
        }
    }
}

fn schema(line: usize, message: impl Into<String>) -> Error {
    Error::Schema {
        line,
        message: message.into(),
    }
}

pub fn parse_trace(text: &str) -> Result<IterationTrace> {
    let mut trace: Option<IterationTrace> = None;
    let mut summary: Option<SummaryBody> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        if summary.is_some() {
            return Err(schema(line, "record after the summary line"));
        }
        let value: Value =
            serde_json::from_str(raw).map_err(|e| schema(line, format!("invalid JSON: {e}")))?;
        let Value::Object(mut obj) = value else {
            return Err(schema(line, "expected a JSON object"));
        };
        if let Some(h) = obj.remove("header") {
            if trace.is_some() {
                return Err(schema(line, "header must be the first line"));
            }
            if let Value::Object(inner) = &h {
                warn_unknown(inner, HEADER_KEYS, line);
            }
            let header: TraceHeader =
                serde_json::from_value(h).map_err(|e| schema(line, format!("bad header: {e}")))?;
            trace = Some(IterationTrace::new(header));
            continue;
        }
        if let Some(s) = obj.remove("summary") {
            if let Value::Object(inner) = &s {
                warn_unknown(inner, SUMMARY_KEYS, line);
            }
            summary = Some(
                serde_json::from_value(s).map_err(|e| schema(line, format!("bad summary: {e}")))?,
            );
            continue;
        }
        warn_unknown(&obj, BLOCK_KEYS, line);
        let record: BlockRecord = serde_json::from_value(Value::Object(obj))
            .map_err(|e| schema(line, format!("bad record: {e}")))?;
        let values = [Some(record.f), Some(record.step_norm), record.lambda, record.grad_norm];
        if values.iter().flatten().any(|v| !v.is_finite()) {
            return Err(schema(line, "non-finite value"));
        }
        let t = trace.get_or_insert_with(|| {
            IterationTrace::new(TraceHeader::new(Method::Synthetic, Vec::new(), 0.0))
        });
        t.push_block(record).map_err(|e| match e {
            Error::Schema { message, .. } => schema(line, message),
            other => other,
        })?;
    }
    let mut trace = trace.unwrap_or_else(|| {
        IterationTrace::new(TraceHeader::new(Method::Synthetic, Vec::new(), 0.0))
    });
    match summary {
        Some(s) => {
            trace.close_sweep();
            trace.stop_reason = s.stop_reason;
            trace.terminal = Some(s.terminal);
        }
        None => trace.close_sweep(),
    }
    Ok(trace)
}

pub fn write_trace(trace: &IterationTrace, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, format_trace(trace))?;
    Ok(())
}

pub fn read_trace(path: impl AsRef<Path>) -> Result<IterationTrace> {
    parse_trace(&fs::read_to_string(path)?)
}

/// Appends one block record to a JSON-lines trace file.
pub fn append_trace_record(
    path: impl AsRef<Path>,
    record: &BlockRecord,
    method: Method,
) -> Result<()> {
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{}", block_line(record, method))?;
    Ok(())
}

pub fn write_json<T: Serialize>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Io(format!("cannot serialize report: {e}")))?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

/// Writes `(k, e_k, f_gap, grad_norm)` rows as CSV.
pub fn write_rate_csv<W: std::io::Write>(rows: &[RateRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::Io(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{make_test_tensor, TestTensorKind};
    use crate::random::seeded_rng;

    #[test]
    fn identity_matrix_from_text() {
        let t = parse_tensor("dims: 2 2\n1 0 0 1\n").unwrap();
        assert_eq!(t.dims(), &[2, 2]);
        assert_eq!(t.as_slice(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn tensor_round_trip_is_exact() {
        let t = make_test_tensor(&TestTensorKind::RandomGaussian, &[3, 3, 3], 11).unwrap();
        let back = parse_tensor(&format_tensor(&t)).unwrap();
        assert_eq!(back, t);
        let tiny = DenseTensor::new(vec![3], vec![f64::MIN_POSITIVE, -1e300, 1.0 / 3.0]).unwrap();
        assert_eq!(parse_tensor(&format_tensor(&tiny)).unwrap(), tiny);
    }

    #[test]
    fn truncated_tensor_names_expected_count() {
        match parse_tensor("dims: 2 2\n1 0 0\n") {
            Err(Error::Parse { message, .. }) => assert!(message.contains("expected 4"), "{message}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_token_has_location() {
        match parse_tensor("dims: 2 2\n1 0\n0 x1\n") {
            Err(Error::Parse { line, column, .. }) => assert_eq!((line, column), (3, 3)),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_tensor("dims: 2 z\n"), Err(Error::Parse { line: 1, column: 9, .. })));
        assert!(matches!(parse_tensor("dims: 1\n1 2\n"), Err(Error::Parse { line: 2, column: 3, .. })));
        assert!(matches!(parse_tensor(""), Err(Error::Parse { .. })));
        assert!(matches!(parse_tensor("dims: 1\nnan\n"), Err(Error::Parse { .. })));
    }

    #[test]
    fn cp_factors_round_trip() {
        let f = CpFactors::random(&[3, 2, 4], 2, &mut seeded_rng(3)).unwrap();
        let text = format_cp_factors(&f);
        assert!(text.starts_with("cp: 3 2\ndims: 3 2 4\n\n"));
        assert_eq!(parse_cp_factors(&text).unwrap(), f);
    }

    #[test]
    fn operator_round_trip_and_symmetry() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        assert_eq!(parse_operator(&format_operator(&a)).unwrap(), a);
        assert!(parse_operator("operator: 2\n1 0.5\n0.4 1\n").is_err());
    }

    fn sample_trace(method: Method) -> IterationTrace {
        let mut h = TraceHeader::new(method, vec![2, 2], 1.5);
        h.seed = Some(7);
        h.sigma0 = Some(0.25);
        let mut t = IterationTrace::new(h);
        for k in 1..=100 {
            for mu in 0..2 {
                let mut r = BlockRecord::new(k, mu, 1.0 / k as f64, 0.1f64.powi(k as i32 % 300));
                r.sigma_block = Some(0.3 + mu as f64);
                r.grad_norm = Some(1.0 / (k * k) as f64);
                t.push_block(r).unwrap();
            }
        }
        t.finish(Some(StopReason::MaxSweeps));
        t
    }

    #[test]
    fn trace_round_trip_is_field_identical() {
        for method in [Method::Als, Method::Bcd] {
            let t = sample_trace(method);
            let text = format_trace(&t);
            assert_eq!(text.contains("sigma_k_mu"), method == Method::Bcd);
            assert_eq!(text.contains("sigma_block"), method == Method::Als);
            let back = parse_trace(&text).unwrap();
            assert_eq!(back, t);
            assert_eq!(format_trace(&back), text);
        }
    }

    #[test]
    fn empty_trace_file() {
        let t = parse_trace("").unwrap();
        assert_eq!(t.num_sweeps(), 0);
    }

    #[test]
    fn non_monotone_sweeps_are_rejected() {
        let text = "{\"sweep\":2,\"mode\":0,\"f\":1.0,\"step_norm\":0.1}\n{\"sweep\":1,\"mode\":0,\"f\":1.0,\"step_norm\":0.1}\n";
        assert!(matches!(parse_trace(text), Err(Error::Schema { line: 2, .. })));
        assert!(matches!(parse_trace("{\"sweep\":1}\n"), Err(Error::Schema { line: 1, .. })));
        assert!(matches!(parse_trace("not json\n"), Err(Error::Schema { line: 1, .. })));
    }

    #[test]
    fn unknown_keys_are_ignored() {
        let text = "{\"sweep\":1,\"mode\":0,\"f\":1.0,\"step_norm\":0.1,\"wall_clock\":3.5}\n";
        let t = parse_trace(text).unwrap();
        assert_eq!(t.num_sweeps(), 1);
    }

    #[test]
    fn append_builds_a_readable_trace() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        for k in 1..=3 {
            append_trace_record(&path, &BlockRecord::new(k, 0, 1.0, 0.5), Method::Als).unwrap();
        }
        assert_eq!(read_trace(&path).unwrap().num_sweeps(), 3);
    }

    #[test]
    fn csv_has_header_and_rows() {
        let rows = vec![RateRow {
            k: 1,
            e_k: 0.5,
            f_gap: 0.25,
            grad_norm: Some(1.0),
        }];
        let mut buf = Vec::new();
        write_rate_csv(&rows, &mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(s, "k,e_k,f_gap,grad_norm\n1,0.5,0.25,1.0\n");
    }
}
