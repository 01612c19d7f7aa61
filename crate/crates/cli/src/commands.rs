use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use clap::Parser;
use cpt_core::ci::{self, GridCheck};
use cpt_core::ordering::{self, OrderingConfig, OrderingMethod, OrderingSolution, SearchKind};
use cpt_core::rank_test::{is_exact_level, CptOutcome};
use cpt_core::sim::{self, Scenario, SimReport};
use cpt_core::{cpt, reduce, ContrastSpec, CptError, CptOptions, ShiftPlan};
use nalgebra::DVector;
use serde::Serialize;

use crate::args::{
    CiArgs, Cli, Command, DataArgs, OrderArgs, OrderingArgs, OrderingChoice, RerunArgs, SearchChoice, SimulateArgs,
    TestArgs,
};
use crate::data::{self, Dataset};
use crate::error::{CliError, CliResult};
use crate::manifest::{self, digest_input, OutputDir, RunManifest, MANIFEST_FILE};

const TRACE_FILE: &str = "trace.csv";

pub fn run(command: Command) -> CliResult<()> {
    let start = Instant::now();
    let argv = command.canonical_argv();
    match &command {
        Command::Test(a) => cmd_test(a, argv, start),
        Command::Ci(a) => cmd_ci(a, argv, start),
        Command::Order(a) => cmd_order(a, argv, start),
        Command::Simulate(a) => cmd_simulate(a, argv, start),
        Command::Rerun(a) => cmd_rerun(a),
    }
}

struct Prepared {
    data: Dataset,
    spec: ContrastSpec,
    target_label: String,
    inputs: Vec<manifest::FileDigest>,
    options: CptOptions,
    m: usize,
}

fn prepare(data_args: &DataArgs, ordering: Option<&OrderingArgs>) -> CliResult<Prepared> {
    let data = data::load(&data_args.data, data_args.outcome.as_deref(), !data_args.no_intercept)?;
    let (spec, contrast_path) = data::target_spec(&data_args.target, &data)?;
    let mut inputs = vec![digest_input(&data_args.data)?];
    let target_label = match &contrast_path {
        Some(path) => {
            inputs.push(digest_input(path)?);
            file_name(path)
        }
        None => data_args.target.clone(),
    };
    let mut options = CptOptions::new(data_args.alpha);
    options.m = data_args.m;
    if let Some(ord) = ordering {
        options.ordering = match &ord.preorder {
            Some(path) => {
                inputs.push(digest_input(path)?);
                OrderingMethod::Fixed(data::read_permutation(path, data.n())?)
            }
            None => match ord.ordering {
                OrderingChoice::None => OrderingMethod::Identity,
                OrderingChoice::Ga => OrderingMethod::Genetic(OrderingConfig::with_budget(ord.budget, ord.seed)),
                OrderingChoice::Search => {
                    OrderingMethod::StochasticSearch(OrderingConfig::with_budget(ord.budget, ord.seed))
                }
            },
        };
    }
    if !(data_args.alpha > 0.0 && data_args.alpha < 1.0) {
        return Err(CliError::Precondition(format!(
            "--alpha {} outside (0, 1)",
            data_args.alpha
        )));
    }
    let m = options.resolve_m()?;
    Ok(Prepared {
        data,
        spec,
        target_label,
        inputs,
        options,
        m,
    })
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned())
}

fn kind_name(kind: SearchKind) -> &'static str {
    match kind {
        SearchKind::Genetic => "ga",
        SearchKind::StochasticSearch => "search",
        SearchKind::Identity => "none",
        SearchKind::Fixed => "preorder",
    }
}

#[derive(Debug, Serialize)]
#[serde(rename_all = "camelCase")]
struct OrderingSummary {
    method: &'static str,
    budget: Option<usize>,
    seed: Option<u64>,
    evaluations: usize,
    objective: f64,
    trace_length: usize,
}

impl OrderingSummary {
    fn new(solution: &OrderingSolution, budget: usize, seed: u64) -> Self {
        let searched = matches!(solution.method, SearchKind::Genetic | SearchKind::StochasticSearch);
        OrderingSummary {
            method: kind_name(solution.method),
            budget: searched.then_some(budget),
            seed: searched.then_some(seed),
            evaluations: solution.evaluations,
            objective: solution.objective,
            trace_length: solution.trace.len(),
        }
    }
}

#[derive(Debug, Serialize)]
#[serde(rename_all = "camelCase")]
struct Statistics {
    s: Vec<f64>,
    stilde: Vec<f64>,
}

#[derive(Debug, Serialize)]
#[serde(rename_all = "camelCase")]
struct TestReport {
    command: &'static str,
    data: String,
    outcome: String,
    target: String,
    n: usize,
    p: usize,
    r: usize,
    intercept: bool,
    alpha: f64,
    m: usize,
    exact_level: bool,
    ordering: OrderingSummary,
    objective: f64,
    delta: Vec<f64>,
    statistics: Statistics,
    rank0: usize,
    pvalue: f64,
    reject: bool,
    warnings: Vec<String>,
}

fn test_report(prep: &Prepared, out: &CptOutcome, ord: &OrderingArgs) -> TestReport {
    TestReport {
        command: "test",
        data: file_name(&prep.data.path),
        outcome: prep.data.outcome.clone(),
        target: prep.target_label.clone(),
        n: prep.data.n(),
        p: prep.data.p(),
        r: out.reduced.r(),
        intercept: prep.data.intercept,
        alpha: prep.options.alpha,
        m: prep.m,
        exact_level: is_exact_level(prep.options.alpha, prep.m),
        ordering: OrderingSummary::new(&out.ordering, ord.budget, ord.seed),
        objective: out.etas.objective,
        delta: out.etas.delta.iter().copied().collect(),
        statistics: Statistics {
            s: out.statistics.s.clone(),
            stilde: out.statistics.stilde.clone(),
        },
        rank0: out.statistics.rank0,
        pvalue: out.statistics.pvalue,
        reject: out.statistics.reject,
        warnings: out.warnings.iter().map(ToString::to_string).collect(),
    }
}

fn render_test(report: &TestReport, trace: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "cyclic permutation test of '{}' (r = {}) on {}",
        report.target, report.r, report.data
    );
    let _ = writeln!(
        s,
        "n = {}, p = {}{}, m = {}, alpha = {}",
        report.n,
        report.p,
        if report.intercept { " (intercept appended)" } else { "" },
        report.m,
        report.alpha
    );
    let _ = writeln!(
        s,
        "ordering: {} ({} evaluations)",
        report.ordering.method, report.ordering.evaluations
    );
    let _ = writeln!(s, "O*(X) = {}", report.objective);
    let _ = writeln!(s, "rank R0 = {} of {}", report.rank0, report.m + 1);
    let _ = writeln!(s, "p-value = {}", report.pvalue);
    let verdict = if report.reject { "reject H0" } else { "do not reject H0" };
    let _ = writeln!(s, "decision: {verdict} at alpha = {}", report.alpha);
    let _ = writeln!(s, "trace: {trace}");
    for w in &report.warnings {
        let _ = writeln!(s, "warning: {w}");
    }
    s
}

fn base_manifest(
    command: &str,
    argv: Vec<String>,
    inputs: Vec<manifest::FileDigest>,
    parameters: serde_json::Value,
    seed: Option<u64>,
    start: Instant,
) -> RunManifest {
    RunManifest {
        command: command.to_string(),
        argv,
        inputs,
        parameters,
        seed,
        software_version: env!("CARGO_PKG_VERSION").to_string(),
        outputs: Vec::new(),
        wall_clock: start.elapsed().as_secs_f64(),
        threads: manifest::threads(),
    }
}

fn to_json<T: Serialize>(value: &T) -> CliResult<String> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Internal(e.to_string()))?;
    text.push('\n');
    Ok(text)
}

fn trace_csv(solution: &OrderingSolution) -> CliResult<Vec<u8>> {
    let mut buf = Vec::new();
    solution
        .write_trace_csv(&mut buf)
        .map_err(|e| CliError::Internal(e.to_string()))?;
    Ok(buf)
}

fn ordering_parameters(ord: &OrderingArgs) -> serde_json::Value {
    serde_json::json!({
        "ordering": if ord.preorder.is_some() { "preorder" } else { ord.ordering.name() },
        "budget": ord.budget,
        "seed": ord.seed,
    })
}

fn data_parameters(args: &DataArgs, m: usize) -> serde_json::Value {
    serde_json::json!({
        "target": args.target,
        "outcome": args.outcome,
        "intercept": !args.no_intercept,
        "alpha": args.alpha,
        "m": m,
    })
}

fn merge(mut a: serde_json::Value, b: serde_json::Value) -> serde_json::Value {
    if let (Some(a), serde_json::Value::Object(b)) = (a.as_object_mut(), b) {
        a.extend(b);
    }
    a
}

fn cmd_test(args: &TestArgs, mut argv: Vec<String>, start: Instant) -> CliResult<()> {
    let prep = prepare(&args.data, Some(&args.ordering))?;
    let out = cpt(&prep.data.y, &prep.data.x, &prep.spec, &prep.options)?;
    let report = test_report(&prep, &out, &args.ordering);
    let json = to_json(&report)?;
    let trace_label = match &args.output_dir {
        Some(dir) => dir.join(TRACE_FILE).display().to_string(),
        None => "not written (pass --output-dir)".to_string(),
    };
    if args.json {
        print!("{json}");
    } else {
        print!("{}", render_test(&report, &trace_label));
    }
    if let Some(dir) = &args.output_dir {
        let mut outdir = OutputDir::create(dir)?;
        outdir.write("report.json", json.as_bytes())?;
        outdir.write("report.txt", render_test(&report, TRACE_FILE).as_bytes())?;
        outdir.write(TRACE_FILE, &trace_csv(&out.ordering)?)?;
        push_output_dir(&mut argv, dir);
        let params = merge(data_parameters(&args.data, prep.m), ordering_parameters(&args.ordering));
        outdir.finish(base_manifest(
            "test",
            argv,
            prep.inputs,
            params,
            Some(args.ordering.seed),
            start,
        ))?;
    }
    Ok(())
}

fn push_output_dir(argv: &mut Vec<String>, dir: &Path) {
    argv.push("--output-dir".into());
    argv.push(dir.display().to_string());
}

#[derive(Debug, Serialize)]
#[serde(rename_all = "camelCase")]
struct CiReport {
    command: &'static str,
    data: String,
    outcome: String,
    target: String,
    n: usize,
    p: usize,
    intercept: bool,
    alpha: f64,
    m: usize,
    level: f64,
    /// `None` when unbounded below.
    lower: Option<f64>,
    upper: Option<f64>,
    unbounded: bool,
    disconnected: bool,
    estimate: f64,
    breakpoint_count: usize,
    endpoint_gap: Option<f64>,
    min_gap: Option<f64>,
    delta: f64,
    scale: f64,
    ordering: OrderingSummary,
    pvalue_at_zero: f64,
    statistics: Vec<f64>,
    grid_check: Option<GridCheck>,
    warnings: Vec<String>,
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

/// Least-squares estimate of the tested contrast.
fn estimate(data: &Dataset, spec: &ContrastSpec) -> CliResult<f64> {
    let svd = data.x.clone().svd(true, true);
    let beta: DVector<f64> = svd
        .solve(&data.y, 1e-12)
        .map_err(|e| CliError::Internal(e.to_string()))?;
    Ok(match spec {
        ContrastSpec::Indices(ix) => beta[ix[0]],
        ContrastSpec::Contrast(c) => c.column(0).dot(&beta),
    })
}

fn render_ci(report: &CiReport) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "confidence interval for '{}' on {} (n = {}, p = {}, m = {}, alpha = {})",
        report.target, report.data, report.n, report.p, report.m, report.alpha
    );
    let show = |v: Option<f64>, inf: &str| v.map_or_else(|| inf.to_string(), |v| v.to_string());
    let _ = writeln!(
        s,
        "{}% interval: [{}, {}]",
        (report.level * 1e6).round() / 1e4,
        show(report.lower, "-inf"),
        show(report.upper, "inf")
    );
    if report.unbounded {
        let _ = writeln!(s, "unbounded: the accepted set extends to infinity");
    }
    if report.disconnected {
        let _ = writeln!(s, "note: the accepted set has gaps inside the interval");
    }
    let _ = writeln!(s, "least-squares estimate = {}", report.estimate);
    let _ = writeln!(s, "p-value at 0 = {}", report.pvalue_at_zero);
    let _ = writeln!(
        s,
        "ordering: {} ({} evaluations)",
        report.ordering.method, report.ordering.evaluations
    );
    if let Some(g) = &report.grid_check {
        let _ = writeln!(
            s,
            "grid check: {} accepted points in [{}, {}], {} interior rejections",
            g.accepted, g.lo, g.hi, g.interior_rejections
        );
    }
    for w in &report.warnings {
        let _ = writeln!(s, "warning: {w}");
    }
    s
}

fn cmd_ci(args: &CiArgs, mut argv: Vec<String>, start: Instant) -> CliResult<()> {
    let prep = prepare(&args.data, Some(&args.ordering))?;
    if prep.spec.r() != 1 {
        return Err(CptError::MultivariateInversion(prep.spec.r()).into());
    }
    let (out, inv) = ci::confidence_interval(&prep.data.y, &prep.data.x, &prep.spec, &prep.options)?;
    let grid = args.grid_check.map(|points| inv.grid_check(points));
    let report = CiReport {
        command: "ci",
        data: file_name(&prep.data.path),
        outcome: prep.data.outcome.clone(),
        target: prep.target_label.clone(),
        n: prep.data.n(),
        p: prep.data.p(),
        intercept: prep.data.intercept,
        alpha: prep.options.alpha,
        m: prep.m,
        level: inv.level,
        lower: finite(inv.interval.0),
        upper: finite(inv.interval.1),
        unbounded: inv.unbounded,
        disconnected: inv.disconnected,
        estimate: estimate(&prep.data, &prep.spec)?,
        breakpoint_count: inv.breakpoint_count,
        endpoint_gap: finite(inv.endpoint_gap),
        min_gap: finite(inv.min_gap),
        delta: inv.delta,
        scale: inv.scale,
        ordering: OrderingSummary::new(&out.ordering, args.ordering.budget, args.ordering.seed),
        pvalue_at_zero: out.statistics.pvalue,
        statistics: inv.statistics.clone(),
        grid_check: grid,
        warnings: out.warnings.iter().map(ToString::to_string).collect(),
    };
    let json = to_json(&report)?;
    if args.json {
        print!("{json}");
    } else {
        print!("{}", render_ci(&report));
    }
    if let Some(dir) = &args.output_dir {
        let mut outdir = OutputDir::create(dir)?;
        outdir.write("report.json", json.as_bytes())?;
        outdir.write("report.txt", render_ci(&report).as_bytes())?;
        outdir.write(TRACE_FILE, &trace_csv(&out.ordering)?)?;
        push_output_dir(&mut argv, dir);
        let mut params = merge(data_parameters(&args.data, prep.m), ordering_parameters(&args.ordering));
        if let Some(points) = args.grid_check {
            params = merge(params, serde_json::json!({ "gridCheck": points }));
        }
        outdir.finish(base_manifest(
            "ci",
            argv,
            prep.inputs,
            params,
            Some(args.ordering.seed),
            start,
        ))?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
#[serde(rename_all = "camelCase")]
struct OrderReport {
    command: &'static str,
    data: String,
    target: String,
    n: usize,
    p: usize,
    r: usize,
    m: usize,
    method: &'static str,
    budget: usize,
    seed: u64,
    evaluations: usize,
    objective: f64,
    identity_objective: f64,
    trace_length: usize,
}

fn cmd_order(args: &OrderArgs, mut argv: Vec<String>, start: Instant) -> CliResult<()> {
    let prep = prepare(&args.data, None)?;
    let reduced = reduce(&prep.data.x, &prep.spec)?;
    let r = reduced.r();
    let plan = ShiftPlan::new(prep.data.n(), prep.m)?;
    let cfg = OrderingConfig::with_budget(args.budget, args.seed);
    let solution = match args.method {
        SearchChoice::Ga => ordering::ga_optimize(&reduced.x, &plan, r, None, &cfg)?,
        SearchChoice::Search => ordering::stochastic_search(&reduced.x, &plan, r, None, &cfg)?,
    };
    let identity: Vec<usize> = (0..prep.data.n()).collect();
    let identity_objective = ordering::evaluate(&reduced.x, &identity, &plan, r, None)?;
    let report = OrderReport {
        command: "order",
        data: file_name(&prep.data.path),
        target: prep.target_label.clone(),
        n: prep.data.n(),
        p: prep.data.p(),
        r,
        m: prep.m,
        method: kind_name(solution.method),
        budget: args.budget,
        seed: args.seed,
        evaluations: solution.evaluations,
        objective: solution.objective,
        identity_objective,
        trace_length: solution.trace.len(),
    };
    let mut outdir = OutputDir::create(&args.output_dir)?;
    let perm_path = outdir.write(
        "permutation.txt",
        data::format_permutation(&solution.permutation).as_bytes(),
    )?;
    let trace_path = outdir.write(TRACE_FILE, &trace_csv(&solution)?)?;
    outdir.write("order.json", to_json(&report)?.as_bytes())?;
    println!(
        "{} ordering: O* = {} after {} evaluations (identity: {})",
        report.method, report.objective, report.evaluations, report.identity_objective
    );
    println!("permutation: {}", perm_path.display());
    println!("trace: {}", trace_path.display());
    push_output_dir(&mut argv, &args.output_dir);
    let params = merge(
        data_parameters(&args.data, prep.m),
        serde_json::json!({ "method": report.method, "budget": args.budget, "seed": args.seed }),
    );
    outdir.finish(base_manifest(
        "order",
        argv,
        prep.inputs,
        params,
        Some(args.seed),
        start,
    ))?;
    Ok(())
}

pub fn parse_scenario(path: &Path) -> CliResult<Scenario> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(&path.display().to_string(), e))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let at = e.path().to_string();
        CliError::Precondition(format!("{}: schema violation at '{at}': {}", path.display(), e.inner()))
    })
}

fn render_sim(report: &SimReport) -> String {
    let mut s = String::new();
    let sc = &report.scenario;
    let _ = writeln!(
        s,
        "scenario {}: n = {}, p = {}, r = {}, m = {}, alpha = {}, {} reps x {} copies",
        &report.fingerprint[..12],
        sc.n,
        sc.p,
        sc.r,
        sc.m,
        sc.alpha,
        sc.reps,
        sc.design_copies
    );
    let _ = writeln!(s, "{:<12} {:>3} {:>8} {:>8}", "method", "s", "rate", "se");
    for row in report.rows.iter().filter(|r| r.copy.is_none()) {
        let _ = writeln!(
            s,
            "{:<12} {:>3} {:>8.4} {:>8.4}",
            row.method.name(),
            row.s,
            row.rate,
            row.se
        );
    }
    for copy in &report.copies {
        if let Some(err) = &copy.error {
            let _ = writeln!(s, "copy {} failed: {err}", copy.copy);
        }
    }
    s
}

fn cmd_simulate(args: &SimulateArgs, mut argv: Vec<String>, start: Instant) -> CliResult<()> {
    let mut scenario = parse_scenario(&args.scenario)?;
    if args.full_scale {
        scenario = scenario.full_scale();
    }
    let scenario = scenario.normalized()?;
    let report = sim::run(&scenario)?;
    let mut outdir = OutputDir::create(&args.output_dir)?;
    let mut csv = Vec::new();
    report
        .write_csv(&mut csv)
        .map_err(|e| CliError::Internal(e.to_string()))?;
    outdir.write("report.csv", &csv)?;
    outdir.write("report.json", to_json(&report)?.as_bytes())?;
    print!("{}", render_sim(&report));
    push_output_dir(&mut argv, &args.output_dir);
    let params = serde_json::to_value(&scenario).map_err(|e| CliError::Internal(e.to_string()))?;
    let params = merge(params, serde_json::json!({ "fullScale": args.full_scale }));
    let inputs = vec![digest_input(&args.scenario)?];
    outdir.finish(base_manifest(
        "simulate",
        argv,
        inputs,
        params,
        Some(scenario.seed),
        start,
    ))?;
    Ok(())
}

fn cmd_rerun(args: &RerunArgs) -> CliResult<()> {
    let recorded = manifest::read_manifest(&args.manifest)?;
    for input in &recorded.inputs {
        let now = manifest::sha256_file(Path::new(&input.path))?;
        if now != input.sha256 {
            return Err(CliError::Precondition(format!(
                "input {} changed since the recorded run",
                input.path
            )));
        }
    }
    let argv = std::iter::once("cpt".to_string()).chain(recorded.argv.iter().cloned());
    let mut command = Cli::try_parse_from(argv)
        .map_err(|e| CliError::Precondition(format!("manifest argv does not parse: {e}")))?
        .command;
    if matches!(command, Command::Rerun(_)) {
        return Err(CliError::Precondition("a manifest cannot record a rerun".into()));
    }
    if std::fs::canonicalize(&args.output_dir).ok() == recorded_dir(&args.manifest) {
        return Err(CliError::Precondition(
            "--output-dir must differ from the recorded run's directory".into(),
        ));
    }
    command.set_output_dir(args.output_dir.clone());
    run(command)?;
    let mut mismatched = Vec::new();
    for out in &recorded.outputs {
        let fresh = manifest::sha256_file(&args.output_dir.join(&out.path))?;
        if fresh != out.sha256 {
            mismatched.push(out.path.clone());
        }
    }
    if mismatched.is_empty() {
        eprintln!(
            "reproduced {} output file(s) bit-exactly; new manifest at {}",
            recorded.outputs.len(),
            args.output_dir.join(MANIFEST_FILE).display()
        );
        Ok(())
    } else {
        Err(CliError::Internal(format!(
            "outputs differ from the manifest: {}",
            mismatched.join(", ")
        )))
    }
}

fn recorded_dir(manifest: &Path) -> Option<std::path::PathBuf> {
    std::fs::canonicalize(manifest).ok()?.parent().map(Path::to_path_buf)
}
