//! Python bindings: `import pycpt`.
//!
//! Matrices are passed as lists of rows. Row and column indices are 0-based.

use cpt_core::ordering::{self, SearchKind};
use cpt_core::sim::{self, Method, Scenario, SimReport};
use cpt_core::{
    ci, rank_test, reduce, ContrastSpec, CptError, CptOptions, CptOutcome, InversionResult, OrderingConfig,
    OrderingMethod, ShiftPlan,
};
use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn py_err(err: CptError) -> PyErr {
    match err {
        CptError::ConstructionTolerance { .. } | CptError::DegenerateSystem(_) | CptError::Calibration(_) => {
            PyRuntimeError::new_err(err.to_string())
        }
        _ => PyValueError::new_err(err.to_string()),
    }
}

fn matrix(rows: &[Vec<f64>], what: &str) -> PyResult<DMatrix<f64>> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || ncols == 0 {
        return Err(PyValueError::new_err(format!("{what} is empty")));
    }
    if let Some(i) = rows.iter().position(|r| r.len() != ncols) {
        return Err(PyValueError::new_err(format!(
            "{what}: row {i} has {} entries, expected {ncols}",
            rows[i].len()
        )));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

/// A column index, a list of column indices, one contrast vector of length
/// p, or a p × r contrast matrix given as rows.
#[derive(FromPyObject)]
enum Target {
    Index(usize),
    Indices(Vec<usize>),
    Vector(Vec<f64>),
    Matrix(Vec<Vec<f64>>),
}

impl Target {
    fn spec(self) -> PyResult<ContrastSpec> {
        Ok(match self {
            Target::Index(i) => ContrastSpec::single(i),
            Target::Indices(ix) => ContrastSpec::Indices(ix),
            Target::Vector(v) => ContrastSpec::Contrast(DMatrix::from_column_slice(v.len(), 1, &v)),
            Target::Matrix(rows) => ContrastSpec::Contrast(matrix(&rows, "contrast")?),
        })
    }
}

fn kind_name(kind: SearchKind) -> &'static str {
    match kind {
        SearchKind::Genetic => "ga",
        SearchKind::StochasticSearch => "search",
        SearchKind::Identity => "none",
        SearchKind::Fixed => "fixed",
    }
}

fn ordering_method(name: &str, budget: usize, seed: u64, permutation: Option<Vec<usize>>) -> PyResult<OrderingMethod> {
    if let Some(perm) = permutation {
        return Ok(OrderingMethod::Fixed(perm));
    }
    let cfg = OrderingConfig::with_budget(budget, seed);
    match name {
        "ga" => Ok(OrderingMethod::Genetic(cfg)),
        "search" => Ok(OrderingMethod::StochasticSearch(cfg)),
        "none" => Ok(OrderingMethod::Identity),
        other => Err(PyValueError::new_err(format!(
            "unknown ordering '{other}' (expected 'ga', 'search' or 'none')"
        ))),
    }
}

struct Inputs {
    y: DVector<f64>,
    x: DMatrix<f64>,
    spec: ContrastSpec,
    options: CptOptions,
}

#[allow(clippy::too_many_arguments)]
fn inputs(
    y: Vec<f64>,
    x: Vec<Vec<f64>>,
    target: Target,
    alpha: f64,
    m: Option<usize>,
    ordering: &str,
    budget: usize,
    seed: u64,
    permutation: Option<Vec<usize>>,
) -> PyResult<Inputs> {
    let mut options = CptOptions::new(alpha);
    options.m = m;
    options.ordering = ordering_method(ordering, budget, seed, permutation)?;
    Ok(Inputs {
        y: DVector::from_vec(y),
        x: matrix(&x, "design")?,
        spec: target.spec()?,
        options,
    })
}

/// Result of one cyclic permutation test.
#[pyclass(module = "pycpt", name = "CptResult", frozen)]
struct PyCptResult {
    #[pyo3(get)]
    pvalue: f64,
    #[pyo3(get)]
    reject: bool,
    #[pyo3(get)]
    rank0: usize,
    #[pyo3(get)]
    m: usize,
    #[pyo3(get)]
    alpha: f64,
    /// `S_j = yᵀη_j` for j = 0..m.
    #[pyo3(get)]
    statistics: Vec<f64>,
    /// Median-centered magnitudes.
    #[pyo3(get)]
    centered: Vec<f64>,
    #[pyo3(get)]
    permutation: Vec<usize>,
    #[pyo3(get)]
    objective: f64,
    #[pyo3(get)]
    ordering: &'static str,
    #[pyo3(get)]
    evaluations: usize,
    #[pyo3(get)]
    warnings: Vec<String>,
    outcome: CptOutcome,
}

impl PyCptResult {
    fn new(outcome: CptOutcome) -> Self {
        let st = &outcome.statistics;
        PyCptResult {
            pvalue: st.pvalue,
            reject: st.reject,
            rank0: st.rank0,
            m: st.s.len() - 1,
            alpha: outcome.alpha,
            statistics: st.s.clone(),
            centered: st.stilde.clone(),
            permutation: outcome.ordering.permutation.clone(),
            objective: outcome.ordering.objective,
            ordering: kind_name(outcome.ordering.method),
            evaluations: outcome.ordering.evaluations,
            warnings: outcome.warnings.iter().map(ToString::to_string).collect(),
            outcome,
        }
    }
}

#[pymethods]
impl PyCptResult {
    /// Invert this test into a confidence interval (single contrast only).
    fn confidence_interval(&self) -> PyResult<PyInterval> {
        ci::invert(&self.outcome).map(PyInterval::from).map_err(py_err)
    }

    /// p-value of the test of `Rᵀβ = theta` on the same data and ordering.
    fn pvalue_at(&self, theta: f64) -> PyResult<f64> {
        ci::test_at(&self.outcome, theta).map(|s| s.pvalue).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "CptResult(pvalue={}, rank0={}, m={}, reject={})",
            self.pvalue,
            self.rank0,
            self.m,
            if self.reject { "True" } else { "False" }
        )
    }
}

/// Confidence set from inverting the test. Infinite bounds mean the set is
/// unbounded on that side.
#[pyclass(module = "pycpt", name = "Interval", frozen)]
struct PyInterval {
    #[pyo3(get)]
    lower: f64,
    #[pyo3(get)]
    upper: f64,
    #[pyo3(get)]
    level: f64,
    #[pyo3(get)]
    unbounded: bool,
    #[pyo3(get)]
    disconnected: bool,
    #[pyo3(get)]
    breakpoint_count: usize,
    #[pyo3(get)]
    endpoint_gap: f64,
    inner: InversionResult,
}

impl From<InversionResult> for PyInterval {
    fn from(inner: InversionResult) -> Self {
        PyInterval {
            lower: inner.interval.0,
            upper: inner.interval.1,
            level: inner.level,
            unbounded: inner.unbounded,
            disconnected: inner.disconnected,
            breakpoint_count: inner.breakpoint_count,
            endpoint_gap: inner.endpoint_gap,
            inner,
        }
    }
}

#[pymethods]
impl PyInterval {
    /// Whether `theta` lies in `[lower, upper]`.
    fn contains(&self, theta: f64) -> bool {
        self.inner.contains(theta)
    }

    /// Whether the test of `theta` is not rejected.
    fn accepts(&self, theta: f64) -> bool {
        self.inner.accepts(theta)
    }

    fn pvalue_at(&self, theta: f64) -> f64 {
        self.inner.pvalue_at(theta)
    }

    fn __repr__(&self) -> String {
        format!(
            "Interval(lower={}, upper={}, level={})",
            self.lower, self.upper, self.level
        )
    }
}

/// A row pre-ordering with its search trace.
#[pyclass(module = "pycpt", name = "Ordering", frozen)]
struct PyOrdering {
    #[pyo3(get)]
    permutation: Vec<usize>,
    #[pyo3(get)]
    objective: f64,
    #[pyo3(get)]
    identity_objective: f64,
    #[pyo3(get)]
    method: &'static str,
    #[pyo3(get)]
    evaluations: usize,
    /// `(evaluations, best objective)` pairs.
    #[pyo3(get)]
    trace: Vec<(usize, f64)>,
}

/// Pooled and per-copy rejection rates of a simulation study.
#[pyclass(module = "pycpt", name = "SimReport", frozen)]
struct PySimReport {
    #[pyo3(get)]
    fingerprint: String,
    #[pyo3(get)]
    csv: String,
    report: SimReport,
}

fn parse_method(name: &str) -> PyResult<Method> {
    Method::ALL
        .iter()
        .copied()
        .find(|m| m.name() == name)
        .ok_or_else(|| PyValueError::new_err(format!("unknown method '{name}'")))
}

#[pymethods]
impl PySimReport {
    /// `(rate, se)` pooled over design copies, or None if not run.
    fn pooled(&self, method: &str, s: u32) -> PyResult<Option<(f64, f64)>> {
        let method = parse_method(method)?;
        Ok(self.report.pooled(method, s).map(|r| (r.rate, r.se)))
    }

    /// Per-copy rates for one method and signal level.
    fn per_copy(&self, method: &str, s: u32) -> PyResult<Vec<f64>> {
        let method = parse_method(method)?;
        Ok(self.report.per_copy(method, s).iter().map(|r| r.rate).collect())
    }

    /// Calibrated `β₁` of each design copy.
    #[getter]
    fn beta1(&self) -> Vec<f64> {
        self.report.copies.iter().map(|c| c.beta1).collect()
    }
}

/// Test `H0: Rᵀβ = 0` with the cyclic permutation test.
#[pyfunction]
#[pyo3(signature = (y, x, target, alpha = 0.05, m = None, ordering = "ga", budget = 1000, seed = 0, permutation = None))]
#[allow(clippy::too_many_arguments)]
fn cpt(
    py: Python<'_>,
    y: Vec<f64>,
    x: Vec<Vec<f64>>,
    target: Target,
    alpha: f64,
    m: Option<usize>,
    ordering: &str,
    budget: usize,
    seed: u64,
    permutation: Option<Vec<usize>>,
) -> PyResult<PyCptResult> {
    let inp = inputs(y, x, target, alpha, m, ordering, budget, seed, permutation)?;
    let outcome = py
        .detach(|| rank_test::cpt(&inp.y, &inp.x, &inp.spec, &inp.options))
        .map_err(py_err)?;
    Ok(PyCptResult::new(outcome))
}

/// Test and invert in one call; returns `(result, interval)`.
#[pyfunction]
#[pyo3(signature = (y, x, target, alpha = 0.05, m = None, ordering = "ga", budget = 1000, seed = 0, permutation = None))]
#[allow(clippy::too_many_arguments)]
fn confidence_interval(
    py: Python<'_>,
    y: Vec<f64>,
    x: Vec<Vec<f64>>,
    target: Target,
    alpha: f64,
    m: Option<usize>,
    ordering: &str,
    budget: usize,
    seed: u64,
    permutation: Option<Vec<usize>>,
) -> PyResult<(PyCptResult, PyInterval)> {
    let inp = inputs(y, x, target, alpha, m, ordering, budget, seed, permutation)?;
    let (outcome, interval) = py
        .detach(|| ci::confidence_interval(&inp.y, &inp.x, &inp.spec, &inp.options))
        .map_err(py_err)?;
    Ok((PyCptResult::new(outcome), interval.into()))
}

/// Search for a pre-ordering of the rows of `x` for testing `target`.
#[pyfunction]
#[pyo3(signature = (x, target, alpha = 0.05, m = None, method = "ga", budget = 1000, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn order(
    py: Python<'_>,
    x: Vec<Vec<f64>>,
    target: Target,
    alpha: f64,
    m: Option<usize>,
    method: &str,
    budget: usize,
    seed: u64,
) -> PyResult<PyOrdering> {
    let x = matrix(&x, "design")?;
    let spec = target.spec()?;
    let mut options = CptOptions::new(alpha);
    options.m = m;
    let m = options.resolve_m().map_err(py_err)?;
    let cfg = OrderingConfig::with_budget(budget, seed);
    let run = |x: &DMatrix<f64>| -> cpt_core::Result<(cpt_core::OrderingSolution, f64)> {
        let reduced = reduce(x, &spec)?;
        let r = reduced.r();
        let plan = ShiftPlan::new(x.nrows(), m)?;
        let solution = match method {
            "search" => ordering::stochastic_search(&reduced.x, &plan, r, None, &cfg)?,
            _ => ordering::ga_optimize(&reduced.x, &plan, r, None, &cfg)?,
        };
        let identity: Vec<usize> = (0..x.nrows()).collect();
        let identity_objective = ordering::evaluate(&reduced.x, &identity, &plan, r, None)?;
        Ok((solution, identity_objective))
    };
    if method != "ga" && method != "search" {
        return Err(PyValueError::new_err(format!(
            "unknown method '{method}' (expected 'ga' or 'search')"
        )));
    }
    let (solution, identity_objective) = py.detach(|| run(&x)).map_err(py_err)?;
    Ok(PyOrdering {
        trace: solution
            .trace
            .iter()
            .map(|t| (t.evaluations, t.best_objective))
            .collect(),
        permutation: solution.permutation,
        objective: solution.objective,
        identity_objective,
        method: kind_name(solution.method),
        evaluations: solution.evaluations,
    })
}

/// Run a size/power study described by a scenario JSON document.
#[pyfunction]
#[pyo3(signature = (scenario, full_scale = false))]
fn simulate(py: Python<'_>, scenario: &str, full_scale: bool) -> PyResult<PySimReport> {
    let de = &mut serde_json::Deserializer::from_str(scenario);
    let mut parsed: Scenario = serde_path_to_error::deserialize(de)
        .map_err(|e| PyValueError::new_err(format!("schema violation at '{}': {}", e.path(), e.inner())))?;
    if full_scale {
        parsed = parsed.full_scale();
    }
    let parsed = parsed.normalized().map_err(py_err)?;
    let report = py.detach(|| sim::run(&parsed)).map_err(py_err)?;
    let mut csv = Vec::new();
    report
        .write_csv(&mut csv)
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok(PySimReport {
        fingerprint: report.fingerprint.clone(),
        csv: String::from_utf8(csv).map_err(|e| PyRuntimeError::new_err(e.to_string()))?,
        report,
    })
}

#[pymodule]
fn pycpt(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCptResult>()?;
    m.add_class::<PyInterval>()?;
    m.add_class::<PyOrdering>()?;
    m.add_class::<PySimReport>()?;
    m.add_function(wrap_pyfunction!(cpt, m)?)?;
    m.add_function(wrap_pyfunction!(confidence_interval, m)?)?;
    m.add_function(wrap_pyfunction!(order, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    Ok(())
}
