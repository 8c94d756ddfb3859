//! Problem data model: time grid, piecewise-constant coefficient paths,
//! terminal target, JSON document layer, and validation.
//!
//! A problem instance describes the controlled system
//!
//! ```text
//! dx = [A x + B u] dt + [C x + D u] dW,    x(0) = x0,
//! ```
//!
//! the control weight `R`, an optional state weight `Q` (used by the
//! linear-quadratic variant only), and the terminal target `xi = a + b W(T)`.
//! Coefficients are piecewise-constant in time with breakpoints expected to
//! sit on the uniform grid.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::linalg::{sym_eigenvalues, symmetry_residual};
use crate::scalar::{real, real_lossy, real_usize, Real};
use crate::{tol, Result};

/// Uniform time grid on `[0, T]` with `steps` intervals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid<T: Real> {
    t_final: T,
    steps: usize,
}

impl<T: Real> TimeGrid<T> {
    /// Creates a grid; `t_final` must be positive and `steps >= 1`.
    pub fn new(t_final: T, steps: usize) -> Result<Self> {
        if !(t_final > T::zero()) || !t_final.is_finite() {
            return Err(Error::Invalid(format!(
                "grid horizon must be positive and finite, got {:?}",
                t_final.to_f64()
            )));
        }
        if steps == 0 {
            return Err(Error::Invalid("grid needs at least one step".into()));
        }
        Ok(Self { t_final, steps })
    }

    /// Horizon `T`.
    pub fn t_final(&self) -> T {
        self.t_final
    }

    /// Number of intervals `N`.
    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Step size `T / N`.
    pub fn dt(&self) -> T {
        self.t_final / real_usize::<T>(self.steps)
    }

    /// Node time `t_k = T k / N` for `k = 0..=N`.
    pub fn node_time(&self, k: usize) -> T {
        debug_assert!(k <= self.steps);
        self.t_final * real_usize::<T>(k) / real_usize::<T>(self.steps)
    }

    /// Half-grid time `T j / (2N)` for `j = 0..=2N`; even indices are the
    /// grid nodes, odd indices the step midpoints.
    pub fn half_time(&self, j: usize) -> T {
        debug_assert!(j <= 2 * self.steps);
        self.t_final * real_usize::<T>(j) / real_usize::<T>(2 * self.steps)
    }
}

/// Piecewise-constant matrix-valued function of time.
///
/// `values[i]` applies on `[breaks[i], breaks[i+1])`, the last segment
/// extending through `T`. `breaks[0]` is always `0`.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixPath<T: Real> {
    breaks: Vec<T>,
    values: Vec<DMatrix<T>>,
}

impl<T: Real> MatrixPath<T> {
    /// Path that is constant over the whole horizon.
    pub fn constant(value: DMatrix<T>) -> Self {
        Self {
            breaks: vec![T::zero()],
            values: vec![value],
        }
    }

    /// Path from explicit segments. `breaks` must start at `0` and increase
    /// strictly, with one value per break.
    pub fn from_segments(breaks: Vec<T>, values: Vec<DMatrix<T>>) -> Result<Self> {
        if breaks.is_empty() || values.len() != breaks.len() {
            return Err(Error::Invalid(format!(
                "matrix path needs matching breakpoint/value counts, got {}/{}",
                breaks.len(),
                values.len()
            )));
        }
        if breaks[0] != T::zero() {
            return Err(Error::Invalid(
                "matrix path must start with a breakpoint at t = 0".into(),
            ));
        }
        for w in breaks.windows(2) {
            if !(w[1] > w[0]) {
                return Err(Error::Invalid(
                    "matrix path breakpoints must increase strictly".into(),
                ));
            }
        }
        let (r, c) = values[0].shape();
        for v in &values[1..] {
            if v.shape() != (r, c) {
                return Err(Error::Invalid(
                    "matrix path segments must share one shape".into(),
                ));
            }
        }
        Ok(Self { breaks, values })
    }

    /// Segment index active at time `t` (clamped to the defined range).
    pub fn segment_at(&self, t: T) -> usize {
        match self
            .breaks
            .binary_search_by(|b| b.partial_cmp(&t).expect("finite times"))
        {
            Ok(i) => i,
            Err(0) => 0,
            Err(i) => i - 1,
        }
    }

    /// Value at time `t`.
    pub fn at_time(&self, t: T) -> &DMatrix<T> {
        &self.values[self.segment_at(t)]
    }

    /// Number of segments.
    pub fn segment_count(&self) -> usize {
        self.values.len()
    }

    /// Breakpoints (segment start times).
    pub fn breaks(&self) -> &[T] {
        &self.breaks
    }

    /// Segment values.
    pub fn values(&self) -> &[DMatrix<T>] {
        &self.values
    }

    /// Shape of every segment value.
    pub fn shape(&self) -> (usize, usize) {
        self.values[0].shape()
    }
}

/// Terminal target `xi = a + b W(T)`, affine in the driving noise.
#[derive(Debug, Clone, PartialEq)]
pub struct TerminalTarget<T: Real> {
    /// Deterministic part.
    pub a: DVector<T>,
    /// Loading on `W(T)`.
    pub b: DVector<T>,
}

impl<T: Real> TerminalTarget<T> {
    /// Realised target for a path with terminal Brownian value `w_t`.
    pub fn realise(&self, w_t: T) -> DVector<T> {
        &self.a + &self.b * w_t
    }
}

/// Full problem instance.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemSpec<T: Real> {
    /// State dimension.
    pub n: usize,
    /// Control dimension (`m >= n` for exact controllability to be possible).
    pub m: usize,
    /// Simulation grid.
    pub grid: TimeGrid<T>,
    /// Initial state.
    pub x0: DVector<T>,
    /// Drift state matrix `A(t)`, `n x n`.
    pub a: MatrixPath<T>,
    /// Drift control matrix `B(t)`, `n x m`.
    pub b: MatrixPath<T>,
    /// Diffusion state matrix `C(t)`, `n x n`.
    pub c: MatrixPath<T>,
    /// Diffusion control matrix `D(t)`, `n x m`.
    pub d: MatrixPath<T>,
    /// Control weight `R(t)`, `m x m`, symmetric positive definite.
    pub r: MatrixPath<T>,
    /// Optional state weight `Q(t)`, `n x n`, symmetric positive
    /// semidefinite; only the linear-quadratic variant reads it.
    pub q: Option<MatrixPath<T>>,
    /// Terminal target.
    pub target: TerminalTarget<T>,
}

impl<T: Real> ProblemSpec<T> {
    /// Same problem on a grid with a different number of steps.
    pub fn with_steps(&self, steps: usize) -> Result<Self> {
        let mut out = self.clone();
        out.grid = TimeGrid::new(self.grid.t_final(), steps)?;
        Ok(out)
    }

    /// Checks every validity condition and returns the full list of
    /// violations. `pass()` on the report is true iff the list is empty.
    pub fn validate(&self) -> ValidationReport {
        let mut findings = Vec::new();
        let mut check_shape = |name: &str, path: &MatrixPath<T>, rows: usize, cols: usize| {
            if path.shape() != (rows, cols) {
                findings.push(Finding::new(
                    FindingCode::DimMismatch,
                    format!(
                        "`{name}` must be {rows}x{cols}, got {}x{}",
                        path.shape().0,
                        path.shape().1
                    ),
                    None,
                ));
            }
        };
        check_shape("A", &self.a, self.n, self.n);
        check_shape("B", &self.b, self.n, self.m);
        check_shape("C", &self.c, self.n, self.n);
        check_shape("D", &self.d, self.n, self.m);
        check_shape("R", &self.r, self.m, self.m);
        if let Some(q) = &self.q {
            check_shape("Q", q, self.n, self.n);
        }

        if self.m < self.n {
            findings.push(Finding::new(
                FindingCode::MLessThanN,
                format!(
                    "control dimension m = {} is below state dimension n = {}; \
                     no factorisation D M = [I 0] can exist",
                    self.m, self.n
                ),
                None,
            ));
        }
        if self.x0.len() != self.n {
            findings.push(Finding::new(
                FindingCode::DimMismatch,
                format!("`x0` must have length {}, got {}", self.n, self.x0.len()),
                None,
            ));
        }
        if self.target.a.len() != self.n || self.target.b.len() != self.n {
            findings.push(Finding::new(
                FindingCode::DimMismatch,
                format!(
                    "`target.a`/`target.b` must have length {}, got {}/{}",
                    self.n,
                    self.target.a.len(),
                    self.target.b.len()
                ),
                None,
            ));
        }

        for (name, path) in [
            ("A", &self.a),
            ("B", &self.b),
            ("C", &self.c),
            ("D", &self.d),
            ("R", &self.r),
        ]
        .into_iter()
        .chain(self.q.as_ref().map(|q| ("Q", q)))
        {
            for (seg, value) in path.values().iter().enumerate() {
                if value.iter().any(|x| !x.is_finite()) {
                    findings.push(Finding::new(
                        FindingCode::NotFinite,
                        format!("`{name}` has a non-finite entry"),
                        Some(seg),
                    ));
                }
            }
            let t_final = self.grid.t_final();
            for &b in path.breaks() {
                if b >= t_final {
                    findings.push(Finding::new(
                        FindingCode::BadBreakpoints,
                        format!("`{name}` has a breakpoint at or beyond the horizon"),
                        None,
                    ));
                }
            }
        }
        if self.x0.iter().any(|x| !x.is_finite())
            || self.target.a.iter().any(|x| !x.is_finite())
            || self.target.b.iter().any(|x| !x.is_finite())
        {
            findings.push(Finding::new(
                FindingCode::NotFinite,
                "`x0` or `target` has a non-finite entry".into(),
                None,
            ));
        }

        // R must be symmetric positive definite on every segment (piecewise
        // constant, so per segment covers every grid node).
        if self.r.shape() == (self.m, self.m) {
            for (seg, rv) in self.r.values().iter().enumerate() {
                if rv.iter().any(|x| !x.is_finite()) {
                    continue; // already reported as NOT_FINITE
                }
                let sym_defect = symmetry_residual(rv);
                let scale = crate::linalg::max_abs(rv).max(T::one());
                if sym_defect > real::<T>(tol::EPS_POS) * scale {
                    findings.push(Finding::new(
                        FindingCode::RNotSymmetric,
                        format!(
                            "`R` is not symmetric: max |R - R'| = {:.3e}",
                            sym_defect.to_f64().unwrap_or(f64::NAN)
                        ),
                        Some(seg),
                    ));
                    continue;
                }
                let ev = sym_eigenvalues(rv);
                let max_ev = ev[ev.len() - 1];
                let min_ev = ev[0];
                if !(max_ev > T::zero()) || min_ev <= real::<T>(tol::EPS_POS) * max_ev {
                    findings.push(Finding::new(
                        FindingCode::RNotPositive,
                        format!(
                            "`R` is not positive definite: eigenvalues in [{:.6e}, {:.6e}]",
                            min_ev.to_f64().unwrap_or(f64::NAN),
                            max_ev.to_f64().unwrap_or(f64::NAN)
                        ),
                        Some(seg),
                    ));
                }
            }
        }

        // Q, when present, must be symmetric positive semidefinite.
        if let Some(q) = &self.q {
            if q.shape() == (self.n, self.n) {
                for (seg, qv) in q.values().iter().enumerate() {
                    if qv.iter().any(|x| !x.is_finite()) {
                        continue;
                    }
                    let scale = crate::linalg::max_abs(qv).max(T::one());
                    if symmetry_residual(qv) > real::<T>(tol::EPS_POS) * scale {
                        findings.push(Finding::new(
                            FindingCode::QNotPsd,
                            "`Q` is not symmetric".into(),
                            Some(seg),
                        ));
                        continue;
                    }
                    let ev = sym_eigenvalues(qv);
                    if ev[0] < -real::<T>(tol::EPS_POS) * scale {
                        findings.push(Finding::new(
                            FindingCode::QNotPsd,
                            format!(
                                "`Q` has a negative eigenvalue {:.6e}",
                                ev[0].to_f64().unwrap_or(f64::NAN)
                            ),
                            Some(seg),
                        ));
                    }
                }
            }
        }

        ValidationReport { findings }
    }

    /// Validates and converts a failure into an [`Error::Invalid`].
    pub fn ensure_valid(&self) -> Result<()> {
        let report = self.validate();
        if report.pass() {
            Ok(())
        } else {
            Err(Error::Invalid(report.to_string()))
        }
    }
}

/// Stable identifier for a validation violation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FindingCode {
    /// `m < n`.
    MLessThanN,
    /// A matrix or vector has inconsistent dimensions.
    DimMismatch,
    /// A non-finite entry appeared.
    NotFinite,
    /// Breakpoints are not increasing from zero or leave the horizon.
    BadBreakpoints,
    /// `R` is not symmetric.
    RNotSymmetric,
    /// `R` is not positive definite.
    RNotPositive,
    /// `Q` is not symmetric positive semidefinite.
    QNotPsd,
}

impl std::fmt::Display for FindingCode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let code = match self {
            FindingCode::MLessThanN => "M_LT_N",
            FindingCode::DimMismatch => "DIM_MISMATCH",
            FindingCode::NotFinite => "NOT_FINITE",
            FindingCode::BadBreakpoints => "BAD_BREAKPOINTS",
            FindingCode::RNotSymmetric => "R_NOT_SYMMETRIC",
            FindingCode::RNotPositive => "R_NOT_POSITIVE",
            FindingCode::QNotPsd => "Q_NOT_PSD",
        };
        f.write_str(code)
    }
}

/// One violated condition.
#[derive(Debug, Clone)]
pub struct Finding {
    /// Machine-readable code.
    pub code: FindingCode,
    /// Human-readable description naming the offending field.
    pub message: String,
    /// Coefficient segment index, when the violation is local to one.
    pub segment: Option<usize>,
}

impl Finding {
    fn new(code: FindingCode, message: String, segment: Option<usize>) -> Self {
        Self {
            code,
            message,
            segment,
        }
    }
}

/// Result of [`ProblemSpec::validate`].
#[derive(Debug, Clone, Default)]
pub struct ValidationReport {
    /// Every violated condition; empty iff the problem is valid.
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    /// True iff no condition is violated.
    pub fn pass(&self) -> bool {
        self.findings.is_empty()
    }
}

impl std::fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.pass() {
            return f.write_str("valid");
        }
        for (i, finding) in self.findings.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            match finding.segment {
                Some(seg) => write!(f, "{} (segment {}): {}", finding.code, seg, finding.message)?,
                None => write!(f, "{}: {}", finding.code, finding.message)?,
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// JSON document layer
// ---------------------------------------------------------------------------

/// Matrix field as written in a problem document: either one literal matrix
/// or a schedule of per-segment matrices with breakpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixInput {
    /// A single matrix, constant in time.
    Literal(Vec<Vec<f64>>),
    /// Piecewise-constant schedule; `values[i]` applies from
    /// `breakpoints[i]` (the first breakpoint must be `0`).
    Schedule {
        breakpoints: Vec<f64>,
        values: Vec<Vec<Vec<f64>>>,
    },
}

/// Terminal target as written in a problem document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetDocument {
    /// Deterministic part of the target.
    pub a: Vec<f64>,
    /// Loading on `W(T)`.
    pub b: Vec<f64>,
}

/// Problem instance exactly as written on disk. Parsing and serialising a
/// document is lossless; [`ProblemSpec`] is derived from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemDocument {
    /// State dimension.
    pub n: usize,
    /// Control dimension.
    pub m: usize,
    /// Horizon.
    #[serde(rename = "T")]
    pub t_final: f64,
    /// Default number of grid steps.
    pub steps: usize,
    /// Initial state.
    pub x0: Vec<f64>,
    /// Coefficient matrices.
    #[serde(rename = "A")]
    pub a: MatrixInput,
    #[serde(rename = "B")]
    pub b: MatrixInput,
    #[serde(rename = "C")]
    pub c: MatrixInput,
    #[serde(rename = "D")]
    pub d: MatrixInput,
    #[serde(rename = "R")]
    pub r: MatrixInput,
    /// Optional state weight for the linear-quadratic variant.
    #[serde(rename = "Q", default, skip_serializing_if = "Option::is_none")]
    pub q: Option<MatrixInput>,
    /// Terminal target.
    pub target: TargetDocument,
}

impl ProblemDocument {
    /// Parses a document from JSON text.
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    /// Serialises the document back to JSON (pretty-printed). Numbers keep
    /// their exact `f64` values, so parse/serialise round-trips are lossless.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("document serialisation cannot fail")
    }

    /// Materialises the document into a typed problem.
    pub fn to_spec<T: Real>(&self) -> Result<ProblemSpec<T>> {
        let grid = TimeGrid::new(
            T::from_f64(self.t_final)
                .ok_or_else(|| Error::Parse("horizon T is not representable".into()))?,
            self.steps,
        )?;
        let x0 = vector_from(&self.x0, self.n, "x0")?;
        let a = matrix_path_from::<T>(&self.a, self.n, self.n, "A")?;
        let b = matrix_path_from::<T>(&self.b, self.n, self.m, "B")?;
        let c = matrix_path_from::<T>(&self.c, self.n, self.n, "C")?;
        let d = matrix_path_from::<T>(&self.d, self.n, self.m, "D")?;
        let r = matrix_path_from::<T>(&self.r, self.m, self.m, "R")?;
        let q = self
            .q
            .as_ref()
            .map(|q| matrix_path_from::<T>(q, self.n, self.n, "Q"))
            .transpose()?;
        let target = TerminalTarget {
            a: vector_from(&self.target.a, self.n, "target.a")?,
            b: vector_from(&self.target.b, self.n, "target.b")?,
        };
        Ok(ProblemSpec {
            n: self.n,
            m: self.m,
            grid,
            x0,
            a,
            b,
            c,
            d,
            r,
            q,
            target,
        })
    }
}

fn vector_from<T: Real>(data: &[f64], len: usize, field: &str) -> Result<DVector<T>> {
    if data.len() != len {
        return Err(Error::DimensionMismatch {
            field: field.into(),
            expected: format!("length {len}"),
            got: format!("length {}", data.len()),
        });
    }
    Ok(DVector::from_iterator(
        len,
        data.iter().map(|&x| real_lossy(x)),
    ))
}

fn matrix_from<T: Real>(
    rows_data: &[Vec<f64>],
    rows: usize,
    cols: usize,
    field: &str,
) -> Result<DMatrix<T>> {
    if rows_data.len() != rows || rows_data.iter().any(|r| r.len() != cols) {
        let got_cols = rows_data.first().map(|r| r.len()).unwrap_or(0);
        return Err(Error::DimensionMismatch {
            field: field.into(),
            expected: format!("{rows}x{cols}"),
            got: format!("{}x{}", rows_data.len(), got_cols),
        });
    }
    Ok(DMatrix::from_fn(rows, cols, |i, j| {
        real_lossy(rows_data[i][j])
    }))
}

fn matrix_path_from<T: Real>(
    input: &MatrixInput,
    rows: usize,
    cols: usize,
    field: &str,
) -> Result<MatrixPath<T>> {
    match input {
        MatrixInput::Literal(rows_data) => Ok(MatrixPath::constant(matrix_from(
            rows_data, rows, cols, field,
        )?)),
        MatrixInput::Schedule {
            breakpoints,
            values,
        } => {
            if breakpoints.len() != values.len() {
                return Err(Error::DimensionMismatch {
                    field: field.into(),
                    expected: format!("{} values for {} breakpoints", breakpoints.len(), breakpoints.len()),
                    got: format!("{} values", values.len()),
                });
            }
            let breaks: Vec<T> = breakpoints
                .iter()
                .map(|&t| real_lossy(t))
                .collect();
            let mats = values
                .iter()
                .map(|v| matrix_from(v, rows, cols, field))
                .collect::<Result<Vec<_>>>()?;
            MatrixPath::from_segments(breaks, mats)
                .map_err(|e| Error::Invalid(format!("`{field}`: {e}")))
        }
    }
}

/// Loads a problem document from a file and materialises it.
pub fn load_problem<T: Real>(path: &std::path::Path) -> Result<ProblemSpec<T>> {
    let text = std::fs::read_to_string(path)?;
    ProblemDocument::from_json(&text)?.to_spec()
}

#[cfg(test)]
mod tests {
    use super::*;

    const FLAGSHIP_JSON: &str = r#"{
        "n": 1, "m": 2, "T": 1.0, "steps": 1000,
        "x0": [0.0],
        "A": [[0.0]],
        "B": [[0.0, 1.0]],
        "C": [[0.0]],
        "D": [[1.0, 0.0]],
        "R": [[1.0, 0.0], [0.0, 1.0]],
        "target": {"a": [0.0], "b": [1.0]}
    }"#;

    #[test]
    fn parses_and_validates_reference_instance() {
        let doc = ProblemDocument::from_json(FLAGSHIP_JSON).unwrap();
        let spec: ProblemSpec<f64> = doc.to_spec().unwrap();
        assert_eq!(spec.n, 1);
        assert_eq!(spec.m, 2);
        assert_eq!(spec.grid.steps(), 1000);
        assert_eq!(spec.grid.dt(), 1e-3);
        assert!(spec.validate().pass());
    }

    #[test]
    fn document_round_trip_is_lossless() {
        let doc = ProblemDocument::from_json(FLAGSHIP_JSON).unwrap();
        let text = doc.to_json();
        let doc2 = ProblemDocument::from_json(&text).unwrap();
        assert_eq!(doc, doc2);
        assert_eq!(text, doc2.to_json());
    }

    #[test]
    fn schedule_round_trip_is_lossless() {
        let json = r#"{
            "n": 1, "m": 2, "T": 1.0, "steps": 8,
            "x0": [0.25],
            "A": {"breakpoints": [0.0, 0.5], "values": [[[0.1]], [[-0.3]]]},
            "B": [[0.0, 1.0]],
            "C": [[0.0]],
            "D": [[1.0, 0.0]],
            "R": [[1.0, 0.0], [0.0, 1.0]],
            "target": {"a": [1.0], "b": [0.0]}
        }"#;
        let doc = ProblemDocument::from_json(json).unwrap();
        let doc2 = ProblemDocument::from_json(&doc.to_json()).unwrap();
        assert_eq!(doc, doc2);
        let spec: ProblemSpec<f64> = doc.to_spec().unwrap();
        assert_eq!(spec.a.segment_count(), 2);
        assert_eq!(spec.a.at_time(0.499)[(0, 0)], 0.1);
        assert_eq!(spec.a.at_time(0.5)[(0, 0)], -0.3);
        assert_eq!(spec.a.at_time(1.0)[(0, 0)], -0.3);
    }

    #[test]
    fn dimension_mismatch_names_field() {
        let json = FLAGSHIP_JSON.replace("\"B\": [[0.0, 1.0]]", "\"B\": [[0.0]]");
        let doc = ProblemDocument::from_json(&json).unwrap();
        let err = doc.to_spec::<f64>().unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("`B`"), "message should name B: {msg}");
        assert!(msg.contains("1x2"), "message should give expected shape: {msg}");
    }

    #[test]
    fn unknown_field_is_a_parse_error() {
        let json = FLAGSHIP_JSON.replace("\"n\": 1", "\"n\": 1, \"extra\": 3");
        let err = ProblemDocument::from_json(&json).unwrap_err();
        assert!(err.to_string().contains("extra"));
    }

    #[test]
    fn indefinite_r_is_flagged_with_eigenvalues() {
        // Eigenvalues of [[1, 2], [2, 1]] are 3 and -1.
        let json = FLAGSHIP_JSON.replace(
            "\"R\": [[1.0, 0.0], [0.0, 1.0]]",
            "\"R\": [[1.0, 2.0], [2.0, 1.0]]",
        );
        let spec: ProblemSpec<f64> = ProblemDocument::from_json(&json)
            .unwrap()
            .to_spec()
            .unwrap();
        let report = spec.validate();
        assert!(!report.pass());
        assert_eq!(report.findings.len(), 1);
        assert_eq!(report.findings[0].code, FindingCode::RNotPositive);
        assert!(report.findings[0].message.contains("-1.0"));
        assert!(report.findings[0].message.contains("3.0"));
    }

    #[test]
    fn asymmetric_r_is_flagged() {
        let json = FLAGSHIP_JSON.replace(
            "\"R\": [[1.0, 0.0], [0.0, 1.0]]",
            "\"R\": [[1.0, 0.5], [0.0, 1.0]]",
        );
        let spec: ProblemSpec<f64> = ProblemDocument::from_json(&json)
            .unwrap()
            .to_spec()
            .unwrap();
        let report = spec.validate();
        assert_eq!(report.findings.len(), 1);
        assert_eq!(report.findings[0].code, FindingCode::RNotSymmetric);
    }

    #[test]
    fn m_below_n_is_flagged() {
        let json = r#"{
            "n": 2, "m": 1, "T": 1.0, "steps": 4,
            "x0": [0.0, 0.0],
            "A": [[0.0, 0.0], [0.0, 0.0]],
            "B": [[1.0], [0.0]],
            "C": [[0.0, 0.0], [0.0, 0.0]],
            "D": [[1.0], [0.0]],
            "R": [[1.0]],
            "target": {"a": [0.0, 0.0], "b": [0.0, 0.0]}
        }"#;
        let spec: ProblemSpec<f64> = ProblemDocument::from_json(json)
            .unwrap()
            .to_spec()
            .unwrap();
        let report = spec.validate();
        assert!(report
            .findings
            .iter()
            .any(|f| f.code == FindingCode::MLessThanN));
    }

    #[test]
    fn non_finite_entry_is_flagged() {
        let doc = ProblemDocument::from_json(FLAGSHIP_JSON).unwrap();
        let mut spec: ProblemSpec<f64> = doc.to_spec().unwrap();
        spec.x0[0] = f64::NAN;
        let report = spec.validate();
        assert!(report
            .findings
            .iter()
            .any(|f| f.code == FindingCode::NotFinite));
    }

    #[test]
    fn grid_times_are_exact_at_dyadic_nodes() {
        let grid = TimeGrid::new(1.0f64, 1000).unwrap();
        assert_eq!(grid.node_time(0), 0.0);
        assert_eq!(grid.node_time(500), 0.5);
        assert_eq!(grid.node_time(1000), 1.0);
        assert_eq!(grid.half_time(1000), 0.5);
    }

    #[test]
    fn segment_lookup_is_left_closed() {
        let path = MatrixPath::from_segments(
            vec![0.0, 0.25, 0.5],
            vec![
                DMatrix::from_element(1, 1, 1.0),
                DMatrix::from_element(1, 1, 2.0),
                DMatrix::from_element(1, 1, 3.0),
            ],
        )
        .unwrap();
        assert_eq!(path.at_time(0.0)[(0, 0)], 1.0);
        assert_eq!(path.at_time(0.2499)[(0, 0)], 1.0);
        assert_eq!(path.at_time(0.25)[(0, 0)], 2.0);
        assert_eq!(path.at_time(0.75)[(0, 0)], 3.0);
        assert_eq!(path.segment_at(0.5), 2);
    }

    #[test]
    fn bad_breakpoints_rejected() {
        let err = MatrixPath::<f64>::from_segments(
            vec![0.0, 0.5, 0.5],
            vec![
                DMatrix::zeros(1, 1),
                DMatrix::zeros(1, 1),
                DMatrix::zeros(1, 1),
            ],
        )
        .unwrap_err();
        assert!(err.to_string().contains("strictly"));
    }
}
