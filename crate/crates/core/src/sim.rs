//! Monte Carlo size and power studies of the CPT against the classical
//! t/F-test.
//!
//! For each design copy the harness draws `X`, calibrates a benchmark signal
//! at which the t/F-test has the target power, pre-orders the rows once per
//! CPT variant and then tallies rejections of `y_s = X_{[r]}(sβ) + ε` over
//! `reps` error draws and every signal level `s`. All randomness comes from
//! streams keyed by `(seed, purpose, copy, rep)`, so reports do not depend on
//! thread scheduling.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::distribution::{ContinuousCDF, FisherSnedecor};

use crate::construction::{solve_eta, ShiftPlan, WeightMatrix};
use crate::hypothesis::{reduce, ContrastSpec};
use crate::ordering::{self, OrderingConfig, OrderingMethod};
use crate::rank_test;
use crate::rng::{self, StreamRng};
use crate::{CptError, Result};

const DESIGN_STREAM: u64 = 1;
const CALIBRATION_STREAM: u64 = 2;
const ERROR_STREAM: u64 = 3;
const ORDERING_STREAM: u64 = 4;

/// Error draws per parallel work unit.
const BLOCK_REPS: usize = 250;
const BISECTION_STEPS: usize = 30;
const BRACKET_DOUBLINGS: usize = 64;
/// Acceptable distance of the calibrated power from its target.
pub const CALIBRATION_TOLERANCE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum DesignFamily {
    Gaussian,
    Cauchy,
    OneWayAnova,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum ErrorFamily {
    Gaussian,
    Cauchy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Method {
    CptGa,
    CptSearch,
    CptIdentity,
    TTest,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::CptGa, Method::CptSearch, Method::CptIdentity, Method::TTest];

    pub fn name(self) -> &'static str {
        match self {
            Method::CptGa => "cptGa",
            Method::CptSearch => "cptSearch",
            Method::CptIdentity => "cptIdentity",
            Method::TTest => "tTest",
        }
    }
}

fn default_r() -> usize {
    1
}
fn default_m() -> usize {
    19
}
fn default_alpha() -> f64 {
    0.05
}
fn default_budget() -> usize {
    1000
}
fn default_calibration_reps() -> usize {
    2000
}
fn default_target_power() -> f64 {
    0.2
}
fn default_methods() -> Vec<Method> {
    Method::ALL.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct Scenario {
    pub design_family: DesignFamily,
    pub error_family: ErrorFamily,
    pub n: usize,
    pub p: usize,
    #[serde(default = "default_r")]
    pub r: usize,
    #[serde(default = "default_m")]
    pub m: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    pub signal_levels: Vec<u32>,
    pub reps: usize,
    pub design_copies: usize,
    pub seed: u64,
    #[serde(default = "default_budget")]
    pub ga_budget: usize,
    #[serde(default = "default_budget")]
    pub search_budget: usize,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default = "default_calibration_reps")]
    pub calibration_reps: usize,
    #[serde(default = "default_target_power")]
    pub target_power: f64,
}

impl Scenario {
    /// Desk-scale defaults for a design family, `p` and error family.
    pub fn desk(design_family: DesignFamily, error_family: ErrorFamily, p: usize, seed: u64) -> Self {
        Scenario {
            design_family,
            error_family,
            n: 200,
            p,
            r: 1,
            m: 19,
            alpha: 0.05,
            signal_levels: (0..=5).collect(),
            reps: 2000,
            design_copies: 5,
            seed,
            ga_budget: default_budget(),
            search_budget: default_budget(),
            methods: default_methods(),
            calibration_reps: default_calibration_reps(),
            target_power: default_target_power(),
        }
    }

    /// The large configuration: `n = 1000`, 3000 reps, 50 copies and `p`
    /// mapped from {5, 8, 10} to {25, 33, 40}.
    pub fn full_scale(mut self) -> Self {
        self.p = match self.p {
            5 => 25,
            8 => 33,
            10 => 40,
            p => p * 5,
        };
        self.n = 1000;
        self.reps = 3000;
        self.design_copies = 50;
        self
    }

    /// Check ranges; sorts and de-duplicates the signal levels and adds
    /// `s = 0` when missing.
    pub fn normalized(mut self) -> Result<Self> {
        if self.signal_levels.is_empty() {
            return Err(CptError::InvalidInput("signalLevels must not be empty".into()));
        }
        self.signal_levels.push(0);
        self.signal_levels.sort_unstable();
        self.signal_levels.dedup();
        self.methods.sort_unstable();
        self.methods.dedup();
        if self.methods.is_empty() {
            return Err(CptError::InvalidInput("methods must not be empty".into()));
        }
        if self.reps == 0 || self.design_copies == 0 || self.calibration_reps == 0 {
            return Err(CptError::InvalidInput(
                "reps, designCopies and calibrationReps must be positive".into(),
            ));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(CptError::InvalidInput(format!("alpha = {} outside (0, 1)", self.alpha)));
        }
        if !(self.target_power > self.alpha && self.target_power < 1.0) {
            return Err(CptError::InvalidInput("targetPower must lie in (alpha, 1)".into()));
        }
        if self.r == 0 || self.r > self.p {
            return Err(CptError::TooManyConstraints { r: self.r, p: self.p });
        }
        if self.n <= self.p + 1 {
            return Err(CptError::InvalidInput(format!(
                "the t/F-test needs n > p + 1, got n = {}, p = {}",
                self.n, self.p
            )));
        }
        if self.m == 0 {
            return Err(CptError::InvalidInput("m must be positive".into()));
        }
        Ok(self)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("scenario serializes");
        let digest = Sha256::digest(&json);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// `M = E[ξξᵀ] = 11ᵀ + Σ` for the `r > 1` alternative `ξ ~ N(1, Σ)`,
    /// `Σ = diag(1/r, 2/r, …, 1)`.
    pub fn weight(&self) -> Option<WeightMatrix> {
        (self.r > 1).then(|| {
            let r = self.r;
            let m = DMatrix::from_fn(r, r, |i, j| 1.0 + if i == j { (i + 1) as f64 / r as f64 } else { 0.0 });
            WeightMatrix::new(m).expect("positive definite by construction")
        })
    }
}

/// Draw an `n × p` design.
///
/// One-way ANOVA designs use treatment coding: each row picks one of `p + 1`
/// levels uniformly, and the last level is the reference with no column, so
/// a row is either a unit vector or zero.
pub fn gen_design<R: Rng>(family: DesignFamily, n: usize, p: usize, rng: &mut R) -> DMatrix<f64> {
    match family {
        DesignFamily::Gaussian => DMatrix::from_fn(n, p, |_, _| rng.sample(StandardNormal)),
        DesignFamily::Cauchy => DMatrix::from_fn(n, p, |_, _| rng::cauchy(rng)),
        DesignFamily::OneWayAnova => {
            let mut x = DMatrix::zeros(n, p);
            for i in 0..n {
                let level = rng.random_range(0..=p);
                if level < p {
                    x[(i, level)] = 1.0;
                }
            }
            x
        }
    }
}

/// Whether every ANOVA level, the reference included, occurs.
fn all_levels_present(x: &DMatrix<f64>) -> bool {
    let columns = x.column_iter().all(|c| c.iter().any(|&v| v != 0.0));
    let reference = x.row_iter().any(|row| row.iter().all(|&v| v == 0.0));
    columns && reference
}

/// Design for one copy, redrawn while an ANOVA level is empty.
pub fn design_for_copy(scenario: &Scenario, copy: usize) -> DMatrix<f64> {
    let mut g = rng::keyed_stream(scenario.seed, &[DESIGN_STREAM, copy as u64]);
    loop {
        let x = gen_design(scenario.design_family, scenario.n, scenario.p, &mut g);
        if scenario.design_family != DesignFamily::OneWayAnova || all_levels_present(&x) {
            return x;
        }
    }
}

pub fn draw_errors<R: Rng>(family: ErrorFamily, n: usize, rng: &mut R) -> DVector<f64> {
    match family {
        ErrorFamily::Gaussian => DVector::from_fn(n, |_, _| rng.sample(StandardNormal)),
        ErrorFamily::Cauchy => DVector::from_fn(n, |_, _| rng::cauchy(rng)),
    }
}

/// `ξ ~ N(1, diag(1/r, …, 1))`; the constant `1` when `r = 1`.
fn draw_direction<R: Rng>(r: usize, rng: &mut R) -> DVector<f64> {
    if r == 1 {
        return DVector::from_element(1, 1.0);
    }
    DVector::from_fn(r, |i, _| {
        let z: f64 = rng.sample(StandardNormal);
        1.0 + z * ((i + 1) as f64 / r as f64).sqrt()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTestResult {
    /// `F` statistic; the squared t statistic when `r = 1`.
    pub f: f64,
    /// Signed t statistic when `r = 1`.
    pub t: Option<f64>,
    pub pvalue: f64,
    pub reject: bool,
}

/// Least-squares t (`r = 1`) or F test of the first `r` coefficients with an
/// intercept appended.
#[derive(Debug, Clone)]
pub struct TTestPlan {
    /// Orthonormal basis of `[1, X_{-r}, X_{[r]}]`, tested columns last.
    q: DMatrix<f64>,
    r_diag_last: f64,
    r: usize,
    df: f64,
    dist: FisherSnedecor,
    crit: f64,
    alpha: f64,
}

/// Sufficient statistics `(Qᵀy, ‖y‖²)`.
#[derive(Debug, Clone)]
struct Projection {
    z: DVector<f64>,
    yy: f64,
}

impl TTestPlan {
    pub fn new(x: &DMatrix<f64>, r: usize, alpha: f64) -> Result<Self> {
        let (n, p) = x.shape();
        if r == 0 || r > p {
            return Err(CptError::TooManyConstraints { r, p });
        }
        if n <= p + 1 {
            return Err(CptError::InvalidInput(format!(
                "t/F-test needs n > p + 1, got n = {n}, p = {p}"
            )));
        }
        let mut z = DMatrix::zeros(n, p + 1);
        z.column_mut(0).fill(1.0);
        for (k, c) in (r..p).chain(0..r).enumerate() {
            z.column_mut(k + 1).copy_from(&x.column(c));
        }
        let qr = z.qr();
        let rmat = qr.r();
        let diag: Vec<f64> = (0..=p).map(|i| rmat[(i, i)].abs()).collect();
        let scale = diag.iter().cloned().fold(0.0, f64::max);
        let tol = crate::linalg::rank_tolerance(n, p + 1, scale);
        if diag.iter().any(|&d| d <= tol) {
            return Err(CptError::RankDeficientDesign(
                "intercept-augmented design is not of full column rank".into(),
            ));
        }
        let df = (n - p - 1) as f64;
        let dist = FisherSnedecor::new(r as f64, df).map_err(|e| CptError::InvalidInput(e.to_string()))?;
        let crit = dist.inverse_cdf(1.0 - alpha);
        Ok(TTestPlan {
            q: qr.q(),
            r_diag_last: rmat[(p, p)],
            r,
            df,
            dist,
            crit,
            alpha,
        })
    }

    fn project(&self, y: &DVector<f64>) -> Projection {
        Projection {
            z: self.q.tr_mul(y),
            yy: y.norm_squared(),
        }
    }

    fn decide(&self, proj: &Projection) -> (f64, bool) {
        let k = proj.z.len();
        let tested = proj.z.rows(k - self.r, self.r).norm_squared();
        let rss = (proj.yy - proj.z.norm_squared()).max(0.0);
        let f = if rss > 0.0 {
            (tested / self.r as f64) / (rss / self.df)
        } else if tested > 0.0 {
            f64::INFINITY
        } else {
            0.0
        };
        // The p-value is only needed near the critical value.
        let reject = if f > self.crit * 1.01 {
            true
        } else if f < self.crit * 0.99 {
            false
        } else {
            self.pvalue(f) <= self.alpha
        };
        (f, reject)
    }

    fn pvalue(&self, f: f64) -> f64 {
        if f.is_infinite() {
            0.0
        } else {
            self.dist.sf(f)
        }
    }

    pub fn test(&self, y: &DVector<f64>) -> Result<TTestResult> {
        if y.len() != self.q.nrows() {
            return Err(CptError::DimensionMismatch(format!(
                "outcome has length {}, design has {} rows",
                y.len(),
                self.q.nrows()
            )));
        }
        let proj = self.project(y);
        let (f, reject) = self.decide(&proj);
        let t = (self.r == 1).then(|| {
            let k = proj.z.len();
            let rss = (proj.yy - proj.z.norm_squared()).max(0.0);
            proj.z[k - 1] * self.r_diag_last.signum() / (rss / self.df).sqrt()
        });
        Ok(TTestResult {
            f,
            t,
            pvalue: self.pvalue(f),
            reject,
        })
    }
}

/// Classical test of `Rᵀβ = 0` with an intercept appended to `x`.
pub fn t_test(y: &DVector<f64>, x: &DMatrix<f64>, spec: &ContrastSpec, alpha: f64) -> Result<TTestResult> {
    let reduced = reduce(x, spec)?;
    TTestPlan::new(&reduced.x, reduced.r(), alpha)?.test(y)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Calibration {
    pub beta1: f64,
    pub power: f64,
    /// `(β, power)` at every evaluated point, in evaluation order.
    pub history: Vec<(f64, f64)>,
}

/// Find `β` such that the t/F-test rejects `y = X_{[r]}(βξ) + ε` with
/// probability `target` (within [`CALIBRATION_TOLERANCE`]).
///
/// Bracketing then bisection, with the same `reps` error draws at every
/// point so that the estimated power curve is a deterministic function of
/// `β`.
pub fn calibrate_signal(
    x: &DMatrix<f64>,
    r: usize,
    error_family: ErrorFamily,
    alpha: f64,
    target: f64,
    reps: usize,
    rng: &mut StreamRng,
) -> Result<Calibration> {
    if reps == 0 {
        return Err(CptError::InvalidInput("calibration needs at least one rep".into()));
    }
    let n = x.nrows();
    let plan = TTestPlan::new(x, r, alpha)?;
    let tested = x.columns(0, r).into_owned();
    // y(β) = ε + βv, so Qᵀy and ‖y‖² are quadratic in β.
    let draws: Vec<(Projection, DVector<f64>, f64, f64)> = (0..reps)
        .map(|_| {
            let eps = draw_errors(error_family, n, rng);
            let xi = draw_direction(r, rng);
            let v = &tested * xi;
            let proj = plan.project(&eps);
            let zv = plan.q.tr_mul(&v);
            let ev = eps.dot(&v);
            (proj, zv, ev, v.norm_squared())
        })
        .collect();
    let power = |beta: f64| {
        let hits = draws
            .iter()
            .filter(|(proj, zv, ev, vv)| {
                let shifted = Projection {
                    z: &proj.z + zv * beta,
                    yy: proj.yy + 2.0 * beta * ev + beta * beta * vv,
                };
                plan.decide(&shifted).1
            })
            .count();
        hits as f64 / reps as f64
    };
    let mut history = Vec::new();
    let mut record = |beta: f64| {
        let pw = power(beta);
        history.push((beta, pw));
        pw
    };
    let close = |pw: f64| (pw - target).abs() <= CALIBRATION_TOLERANCE;

    let p0 = record(0.0);
    if close(p0) {
        return Ok(Calibration {
            beta1: 0.0,
            power: p0,
            history,
        });
    }
    let mut lo = 0.0;
    let mut hi = 1.0;
    let mut p_hi = record(hi);
    let mut doublings = 0;
    while p_hi < target && !close(p_hi) {
        lo = hi;
        hi *= 2.0;
        p_hi = record(hi);
        doublings += 1;
        if doublings > BRACKET_DOUBLINGS {
            return Err(CptError::Calibration(format!(
                "power stays below {target} up to beta = {hi}"
            )));
        }
    }
    if close(p_hi) {
        return Ok(Calibration {
            beta1: hi,
            power: p_hi,
            history,
        });
    }
    for _ in 0..BISECTION_STEPS {
        let mid = 0.5 * (lo + hi);
        let pw = record(mid);
        if close(pw) {
            return Ok(Calibration {
                beta1: mid,
                power: pw,
                history,
            });
        }
        if pw < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(CptError::Calibration(format!(
        "no power within {CALIBRATION_TOLERANCE} of {target} after {BISECTION_STEPS} bisection steps"
    )))
}

/// Everything fixed for one design copy.
struct CopySetup {
    x: DMatrix<f64>,
    beta1: f64,
    calibrated_power: f64,
    ttest: Option<TTestPlan>,
    /// `η₀ … η_m` mapped back to the original row order, per CPT method.
    cpt: Vec<(Method, std::result::Result<CptFixed, String>)>,
}

struct CptFixed {
    etas: Vec<DVector<f64>>,
    objective: f64,
}

fn ordering_method(method: Method, scenario: &Scenario, copy: usize) -> OrderingMethod {
    let seed = rng::keyed_stream(scenario.seed, &[ORDERING_STREAM, copy as u64]).random::<u64>();
    match method {
        Method::CptGa => OrderingMethod::Genetic(OrderingConfig::with_budget(scenario.ga_budget, seed)),
        Method::CptSearch => {
            OrderingMethod::StochasticSearch(OrderingConfig::with_budget(scenario.search_budget, seed))
        }
        _ => OrderingMethod::Identity,
    }
}

fn prepare_cpt(
    scenario: &Scenario,
    x: &DMatrix<f64>,
    copy: usize,
    method: Method,
    weight: Option<&WeightMatrix>,
) -> Result<CptFixed> {
    let plan = ShiftPlan::new(scenario.n, scenario.m)?;
    let solution = ordering::order(x, &plan, scenario.r, weight, &ordering_method(method, scenario, copy))?;
    let perm = &solution.permutation;
    let system = solve_eta(&crate::linalg::gather_rows(x, perm), &plan, scenario.r, weight)?;
    let etas = system
        .etas
        .iter()
        .map(|eta| {
            let mut orig = DVector::zeros(eta.len());
            for (i, &row) in perm.iter().enumerate() {
                orig[row] = eta[i];
            }
            orig
        })
        .collect();
    Ok(CptFixed {
        etas,
        objective: system.objective,
    })
}

fn setup_copy(scenario: &Scenario, copy: usize) -> Result<CopySetup> {
    let x = design_for_copy(scenario, copy);
    let weight = scenario.weight();
    let mut cal_rng = rng::keyed_stream(scenario.seed, &[CALIBRATION_STREAM, copy as u64]);
    let calibration = calibrate_signal(
        &x,
        scenario.r,
        scenario.error_family,
        scenario.alpha,
        scenario.target_power,
        scenario.calibration_reps,
        &mut cal_rng,
    )?;
    let ttest = if scenario.methods.contains(&Method::TTest) {
        Some(TTestPlan::new(&x, scenario.r, scenario.alpha)?)
    } else {
        None
    };
    let cpt = scenario
        .methods
        .iter()
        .filter(|&&m| m != Method::TTest)
        .map(|&m| {
            (
                m,
                prepare_cpt(scenario, &x, copy, m, weight.as_ref()).map_err(|e| e.to_string()),
            )
        })
        .collect();
    Ok(CopySetup {
        x,
        beta1: calibration.beta1,
        calibrated_power: calibration.power,
        ttest,
        cpt,
    })
}

/// Error vector and signal direction of rep `rep` in copy `copy`.
fn rep_draws(scenario: &Scenario, copy: usize, rep: usize) -> (DVector<f64>, DVector<f64>) {
    let mut g = rng::keyed_stream(scenario.seed, &[ERROR_STREAM, copy as u64, rep as u64]);
    let eps = draw_errors(scenario.error_family, scenario.n, &mut g);
    let xi = draw_direction(scenario.r, &mut g);
    (eps, xi)
}

fn outcome(setup: &CopySetup, r: usize, eps: &DVector<f64>, xi: &DVector<f64>, signal: f64) -> DVector<f64> {
    if signal == 0.0 {
        eps.clone()
    } else {
        eps + setup.x.columns(0, r) * (xi * signal)
    }
}

fn cpt_rejects(fixed: &CptFixed, y: &DVector<f64>, alpha: f64) -> bool {
    let s: Vec<f64> = fixed.etas.iter().map(|e| e.dot(y)).collect();
    let stilde = rank_test::center(&s);
    let rank0 = stilde.iter().filter(|&&v| v >= stilde[0]).count();
    rank_test::rejects(rank0, stilde.len(), alpha)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SimRow {
    /// `None` for rows pooled over copies.
    pub copy: Option<usize>,
    pub method: Method,
    pub s: u32,
    pub rate: f64,
    pub se: f64,
    pub beta1: f64,
    pub reps: usize,
    pub rejections: usize,
    pub failed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CopySummary {
    pub copy: usize,
    pub beta1: f64,
    pub calibrated_power: f64,
    /// `O*` of the chosen ordering per CPT method.
    pub objectives: Vec<(Method, Option<f64>)>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SimReport {
    pub scenario: Scenario,
    pub fingerprint: String,
    pub copies: Vec<CopySummary>,
    pub rows: Vec<SimRow>,
    /// Wall-clock seconds; kept out of the serialized report so reruns are
    /// byte-identical.
    #[serde(skip)]
    pub runtime_secs: f64,
}

/// Equality of everything but the wall-clock time.
impl PartialEq for SimReport {
    fn eq(&self, other: &Self) -> bool {
        self.scenario == other.scenario
            && self.fingerprint == other.fingerprint
            && self.copies == other.copies
            && self.rows == other.rows
    }
}

impl SimReport {
    pub fn pooled(&self, method: Method, s: u32) -> Option<&SimRow> {
        self.rows
            .iter()
            .find(|row| row.copy.is_none() && row.method == method && row.s == s)
    }

    pub fn per_copy(&self, method: Method, s: u32) -> Vec<&SimRow> {
        self.rows
            .iter()
            .filter(|row| row.copy.is_some() && row.method == method && row.s == s)
            .collect()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "copy,method,s,rate,se,beta1,reps,rejections,failed")?;
        for row in &self.rows {
            let copy = row.copy.map_or_else(|| "all".to_string(), |c| c.to_string());
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                copy,
                row.method.name(),
                row.s,
                row.rate,
                row.se,
                row.beta1,
                row.reps,
                row.rejections,
                row.failed
            )?;
        }
        Ok(())
    }
}

fn rate_row(
    copy: Option<usize>,
    method: Method,
    s: u32,
    beta1: f64,
    reps: usize,
    rejections: usize,
    failed: bool,
) -> SimRow {
    let rate = if reps > 0 { rejections as f64 / reps as f64 } else { 0.0 };
    SimRow {
        copy,
        method,
        s,
        rate,
        se: if reps > 0 {
            (rate * (1.0 - rate) / reps as f64).sqrt()
        } else {
            0.0
        },
        beta1,
        reps,
        rejections,
        failed,
    }
}

/// Rejections for reps `start..end` of one copy: `[method][signal]`.
fn run_block(scenario: &Scenario, setup: &CopySetup, copy: usize, start: usize, end: usize) -> Vec<Vec<usize>> {
    let methods = &scenario.methods;
    let levels = &scenario.signal_levels;
    let mut counts = vec![vec![0usize; levels.len()]; methods.len()];
    for rep in start..end {
        let (eps, xi) = rep_draws(scenario, copy, rep);
        for (si, &s) in levels.iter().enumerate() {
            let y = outcome(setup, scenario.r, &eps, &xi, f64::from(s) * setup.beta1);
            for (mi, &method) in methods.iter().enumerate() {
                if decide(scenario, setup, method, &y) == Some(true) {
                    counts[mi][si] += 1;
                }
            }
        }
    }
    counts
}

fn decide(scenario: &Scenario, setup: &CopySetup, method: Method, y: &DVector<f64>) -> Option<bool> {
    match method {
        Method::TTest => setup.ttest.as_ref().map(|plan| plan.decide(&plan.project(y)).1),
        _ => setup
            .cpt
            .iter()
            .find(|(m, _)| *m == method)
            .and_then(|(_, fixed)| fixed.as_ref().ok())
            .map(|fixed| cpt_rejects(fixed, y, scenario.alpha)),
    }
}

/// Recompute a single decision from its stored coordinates.
pub fn replay(scenario: &Scenario, copy: usize, rep: usize, s: u32, method: Method) -> Result<bool> {
    let scenario = scenario.clone().normalized()?;
    let setup = setup_copy(&scenario, copy)?;
    let (eps, xi) = rep_draws(&scenario, copy, rep);
    let y = outcome(&setup, scenario.r, &eps, &xi, f64::from(s) * setup.beta1);
    decide(&scenario, &setup, method, &y)
        .ok_or_else(|| CptError::InvalidInput(format!("method {} unavailable", method.name())))
}

/// Run the full study.
pub fn run(scenario: &Scenario) -> Result<SimReport> {
    let started = std::time::Instant::now();
    let scenario = scenario.clone().normalized()?;
    let setups: Vec<Result<CopySetup>> = (0..scenario.design_copies)
        .into_par_iter()
        .map(|c| setup_copy(&scenario, c))
        .collect();

    let blocks: Vec<(usize, usize, usize)> = (0..scenario.design_copies)
        .flat_map(|c| {
            (0..scenario.reps)
                .step_by(BLOCK_REPS)
                .map(move |start| (c, start, (start + BLOCK_REPS).min(scenario.reps)))
        })
        .collect();
    let counts: Vec<Option<Vec<Vec<usize>>>> = blocks
        .par_iter()
        .map(|&(c, start, end)| {
            setups[c]
                .as_ref()
                .ok()
                .map(|setup| run_block(&scenario, setup, c, start, end))
        })
        .collect();

    let nm = scenario.methods.len();
    let ns = scenario.signal_levels.len();
    let mut per_copy = vec![vec![vec![0usize; ns]; nm]; scenario.design_copies];
    for (&(c, _, _), block) in blocks.iter().zip(&counts) {
        if let Some(block) = block {
            for mi in 0..nm {
                for si in 0..ns {
                    per_copy[c][mi][si] += block[mi][si];
                }
            }
        }
    }

    let mut rows = Vec::new();
    let mut copies = Vec::new();
    let mut pooled = vec![vec![(0usize, 0usize); ns]; nm];
    let mut beta_sum = 0.0;
    let mut beta_count = 0usize;
    for (c, setup) in setups.iter().enumerate() {
        match setup {
            Ok(setup) => {
                beta_sum += setup.beta1;
                beta_count += 1;
                for (mi, &method) in scenario.methods.iter().enumerate() {
                    let available = decide_available(setup, method);
                    for (si, &s) in scenario.signal_levels.iter().enumerate() {
                        let reps = if available { scenario.reps } else { 0 };
                        let hits = per_copy[c][mi][si];
                        rows.push(rate_row(Some(c), method, s, setup.beta1, reps, hits, !available));
                        pooled[mi][si].0 += reps;
                        pooled[mi][si].1 += hits;
                    }
                }
                copies.push(CopySummary {
                    copy: c,
                    beta1: setup.beta1,
                    calibrated_power: setup.calibrated_power,
                    objectives: setup
                        .cpt
                        .iter()
                        .map(|(m, fixed)| (*m, fixed.as_ref().ok().map(|f| f.objective)))
                        .collect(),
                    error: setup.cpt.iter().find_map(|(_, fixed)| fixed.as_ref().err().cloned()),
                });
            }
            Err(e) => {
                for &method in &scenario.methods {
                    for &s in &scenario.signal_levels {
                        rows.push(rate_row(Some(c), method, s, f64::NAN, 0, 0, true));
                    }
                }
                copies.push(CopySummary {
                    copy: c,
                    beta1: f64::NAN,
                    calibrated_power: f64::NAN,
                    objectives: Vec::new(),
                    error: Some(e.to_string()),
                });
            }
        }
    }
    let mean_beta = if beta_count > 0 {
        beta_sum / beta_count as f64
    } else {
        f64::NAN
    };
    for (mi, &method) in scenario.methods.iter().enumerate() {
        for (si, &s) in scenario.signal_levels.iter().enumerate() {
            let (reps, hits) = pooled[mi][si];
            rows.push(rate_row(None, method, s, mean_beta, reps, hits, reps == 0));
        }
    }
    Ok(SimReport {
        fingerprint: scenario.fingerprint(),
        scenario,
        copies,
        rows,
        runtime_secs: started.elapsed().as_secs_f64(),
    })
}

fn decide_available(setup: &CopySetup, method: Method) -> bool {
    match method {
        Method::TTest => setup.ttest.is_some(),
        _ => setup.cpt.iter().any(|(m, fixed)| *m == method && fixed.is_ok()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn anova_rows_are_unit_or_reference() {
        let mut g = rng::stream(1, 1);
        let x = gen_design(DesignFamily::OneWayAnova, 500, 4, &mut g);
        for row in x.row_iter() {
            let sum: f64 = row.iter().sum();
            assert!(sum == 0.0 || sum == 1.0);
            assert!(row.iter().all(|&v| v == 0.0 || v == 1.0));
        }
        let scenario = Scenario {
            n: 12,
            p: 5,
            ..Scenario::desk(DesignFamily::OneWayAnova, ErrorFamily::Gaussian, 5, 3)
        };
        for c in 0..5 {
            assert!(all_levels_present(&design_for_copy(&scenario, c)));
        }
    }

    #[test]
    fn gaussian_design_mean_is_centered() {
        let mut g = rng::stream(2, 1);
        let x = gen_design(DesignFamily::Gaussian, 10_000, 1, &mut g);
        assert!(x.mean().abs() < 4.0 / 100.0);
    }

    #[test]
    fn cauchy_design_median_is_centered() {
        let mut g = rng::stream(3, 1);
        let x = gen_design(DesignFamily::Cauchy, 10_000, 1, &mut g);
        // The sample median has standard error π/(2√n) ≈ 0.0157.
        let med = rank_test::median(x.as_slice());
        assert!(med.abs() < 4.0 * std::f64::consts::PI / (2.0 * 100.0));
    }

    #[test]
    fn textbook_regression() {
        let x = DMatrix::from_column_slice(3, 1, &[0.0, 1.0, 2.0]);
        let y = DVector::from_column_slice(&[1.0, 3.0, 2.0]);
        let res = t_test(&y, &x, &ContrastSpec::single(0), 0.05).unwrap();
        // β̂ = 0.5, RSS = 1.5 on 1 df, se = sqrt(1.5 / 2).
        let t = 0.5 / (1.5f64 / 2.0).sqrt();
        assert!((res.t.unwrap() - t).abs() < 1e-12);
        assert!((res.f - t * t).abs() < 1e-12);
        // Two-sided t with 1 df: p = 1 − 2 atan(|t|)/π.
        let p = 1.0 - 2.0 * t.atan() / std::f64::consts::PI;
        assert!((res.pvalue - p).abs() < 1e-10);
        assert!(!res.reject);
    }

    #[test]
    fn orthogonal_outcome_gives_zero_statistic() {
        let mut g = rng::stream(4, 1);
        let x = gen_design(DesignFamily::Gaussian, 30, 3, &mut g);
        let mut z = DMatrix::zeros(30, 4);
        z.column_mut(0).fill(1.0);
        z.columns_mut(1, 3).copy_from(&x);
        let w = DVector::from_fn(30, |_, _| g.sample::<f64, _>(StandardNormal));
        // Residual of w on the design is orthogonal to every column.
        let proj = &z * z.clone().pseudo_inverse(1e-12).unwrap() * &w;
        let y = w - proj;
        let res = t_test(&y, &x, &ContrastSpec::single(0), 0.05).unwrap();
        assert!(res.f < 1e-20);
        assert!(!res.reject);
    }

    #[test]
    fn rank_deficient_design_rejected() {
        let x = DMatrix::from_fn(20, 2, |i, j| if j == 0 { 1.0 } else { i as f64 });
        assert!(matches!(
            TTestPlan::new(&x, 1, 0.05),
            Err(CptError::RankDeficientDesign(_))
        ));
    }

    #[test]
    fn calibration_hits_target_and_zero_is_size() {
        let mut g = rng::stream(5, 1);
        let x = gen_design(DesignFamily::Gaussian, 100, 3, &mut g);
        let cal = calibrate_signal(&x, 1, ErrorFamily::Gaussian, 0.05, 0.2, 2000, &mut g).unwrap();
        assert!((cal.power - 0.2).abs() <= CALIBRATION_TOLERANCE);
        assert_eq!(cal.history[0].0, 0.0);
        // 2000 draws: 4 standard errors around α.
        assert!((cal.history[0].1 - 0.05).abs() < 4.0 * (0.05f64 * 0.95 / 2000.0).sqrt());
    }

    #[test]
    fn scenario_json_round_trip_and_validation() {
        let json = r#"{"designFamily":"oneWayAnova","errorFamily":"cauchy","n":60,"p":3,
            "signalLevels":[2,1],"reps":10,"designCopies":1,"seed":9}"#;
        let sc: Scenario = serde_json::from_str(json).unwrap();
        assert_eq!(sc.m, 19);
        let sc = sc.normalized().unwrap();
        assert_eq!(sc.signal_levels, vec![0, 1, 2]);
        let back: Scenario = serde_json::from_str(&serde_json::to_string(&sc).unwrap()).unwrap();
        assert_eq!(back, sc);
        let bad = json.replace("oneWayAnova", "twoWay");
        assert!(serde_json::from_str::<Scenario>(&bad).is_err());
        let empty: Scenario = serde_json::from_str(&json.replace("[2,1]", "[]")).unwrap();
        assert!(empty.normalized().is_err());
    }

    #[test]
    fn full_scale_mapping() {
        let sc = Scenario::desk(DesignFamily::Gaussian, ErrorFamily::Gaussian, 8, 0).full_scale();
        assert_eq!((sc.n, sc.p, sc.reps, sc.design_copies), (1000, 33, 3000, 50));
    }

    #[test]
    fn small_run_is_reproducible_and_replayable() {
        let sc = Scenario {
            n: 80,
            p: 3,
            m: 3,
            alpha: 0.25,
            signal_levels: vec![0, 2],
            reps: 60,
            design_copies: 2,
            ga_budget: 40,
            search_budget: 40,
            calibration_reps: 400,
            target_power: 0.5,
            ..Scenario::desk(DesignFamily::Gaussian, ErrorFamily::Gaussian, 3, 11)
        };
        let a = run(&sc).unwrap();
        let b = run(&sc).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.fingerprint.len(), 64);
        for row in &a.rows {
            assert!((0.0..=1.0).contains(&row.rate));
            assert!(!row.failed);
            let se = (row.rate * (1.0 - row.rate) / row.reps as f64).sqrt();
            assert!((row.se - se).abs() < 1e-15);
        }
        // Replaying every decision of one cell reproduces its tally.
        let tally = (0..sc.reps)
            .filter(|&rep| replay(&sc, 1, rep, 2, Method::CptGa).unwrap())
            .count();
        assert_eq!(a.per_copy(Method::CptGa, 2)[1].rejections, tally);
        let mut csv = Vec::new();
        a.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("copy,method,s,rate,se,beta1,reps,rejections,failed\n"));
        assert_eq!(text.lines().count(), 1 + a.rows.len());
    }

    #[test]
    fn failed_cells_are_marked() {
        // p·m > n: the CPT cannot be built, the t-test still runs.
        let sc = Scenario {
            n: 30,
            p: 3,
            m: 19,
            signal_levels: vec![0],
            reps: 20,
            design_copies: 1,
            calibration_reps: 200,
            methods: vec![Method::CptIdentity, Method::TTest],
            ..Scenario::desk(DesignFamily::Gaussian, ErrorFamily::Gaussian, 3, 1)
        };
        let rep = run(&sc).unwrap();
        assert!(rep.pooled(Method::CptIdentity, 0).unwrap().failed);
        assert!(!rep.pooled(Method::TTest, 0).unwrap().failed);
        assert!(rep.copies[0].error.as_deref().unwrap().contains("power condition"));
    }

    #[test]
    fn general_weight_is_second_moment() {
        let sc = Scenario {
            r: 5,
            ..Scenario::desk(DesignFamily::Gaussian, ErrorFamily::Gaussian, 5, 0)
        };
        let w = sc.weight().unwrap();
        assert!((w.matrix()[(0, 0)] - 1.2).abs() < 1e-15);
        assert!((w.matrix()[(4, 4)] - 2.0).abs() < 1e-15);
        assert_eq!(w.matrix()[(0, 1)], 1.0);
    }
}
