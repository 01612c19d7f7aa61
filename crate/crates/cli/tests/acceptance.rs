//! End-to-end acceptance suite. Runs without the libtest harness so that
//! every criterion prints one PASS/FAIL line; exits non-zero on any failure.

#[path = "../../core/tests/support/oracles.rs"]
mod oracles;

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use cpt_core::ci::{confidence_interval, test_at};
use cpt_core::construction::{solve_eta_general, solve_eta_r1, solve_validity_only, ShiftPlan, WeightMatrix};
use cpt_core::ordering::{ga_optimize, stochastic_search, OrderingConfig, OrderingMethod};
use cpt_core::rank_test::{cpt, evaluate_outcome, CptOptions};
use cpt_core::sim::{self, DesignFamily, ErrorFamily, Method, Scenario};
use cpt_core::{rng, ContrastSpec, CptError};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

type Outcome = Result<String, String>;

fn gaussian(rows: usize, cols: usize, g: &mut rng::StreamRng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| g.sample(StandardNormal))
}

fn normal_vec(n: usize, g: &mut rng::StreamRng) -> DVector<f64> {
    DVector::from_fn(n, |_, _| g.sample::<f64, _>(StandardNormal))
}

fn exact_size() -> Outcome {
    let (lo, hi) = (0.0435, 0.0565);
    let mut parts = Vec::new();
    let mut ok = true;
    for (errors, name) in [(ErrorFamily::Gaussian, "gaussian"), (ErrorFamily::Cauchy, "cauchy")] {
        let scenario = Scenario {
            signal_levels: vec![0],
            reps: 10_000,
            design_copies: 1,
            methods: vec![Method::CptGa],
            ..Scenario::desk(DesignFamily::Gaussian, errors, 5, 2024)
        }
        .normalized()
        .map_err(|e| e.to_string())?;
        let report = sim::run(&scenario).map_err(|e| e.to_string())?;
        let row = report.pooled(Method::CptGa, 0).ok_or("missing row")?;
        ok &= !row.failed && (lo..=hi).contains(&row.rate);
        parts.push(format!("{name} errors {:.4}", row.rate));
    }
    let msg = format!("{} (window [{lo}, {hi}], 10000 reps each)", parts.join(", "));
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn rank_uniformity() -> Outcome {
    let mut g = rng::stream(7, 1);
    let x = gaussian(200, 5, &mut g);
    let y = normal_vec(200, &mut g);
    let opts = CptOptions {
        m: Some(19),
        ..CptOptions::new(0.05)
    };
    let out = cpt(&y, &x, &ContrastSpec::single(0), &opts).map_err(|e| e.to_string())?;
    let mut counts = [0usize; 20];
    for _ in 0..10_000 {
        let eps = normal_vec(200, &mut g);
        let stats = evaluate_outcome(&eps, &out.etas, 0.05).map_err(|e| e.to_string())?;
        counts[stats.rank0 - 1] += 1;
    }
    let (stat, p) = oracles::chi_square_uniform(&counts);
    let msg = format!("chi2 = {stat:.2} on 19 df, p = {p:.4} (need > 0.001)");
    if p > 0.001 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn closed_form_optimality() -> Outcome {
    let mut g = rng::stream(8, 1);
    let mut worst_r1 = 0.0f64;
    let mut checked = 0;
    while checked < 50 {
        let p = g.random_range(1..=3);
        let m = g.random_range(1..=4);
        let n = g.random_range((p * m).max(m + 1)..=60);
        let x = gaussian(n, p, &mut g);
        let plan = ShiftPlan::new(n, m).map_err(|e| e.to_string())?;
        let fast = solve_eta_r1(&x, &plan).map_err(|e| e.to_string())?.objective;
        let oracle = oracles::r1_objective(&x, m);
        worst_r1 = worst_r1.max((fast - oracle).abs() / oracle.max(1.0));
        checked += 1;
    }
    let mut worst_r2 = 0.0f64;
    for _ in 0..20 {
        let p = g.random_range(2..=3);
        let m = g.random_range(1..=4);
        let n = g.random_range((p * m).max(m + 1)..=60);
        let x = gaussian(n, p, &mut g);
        let plan = ShiftPlan::new(n, m).map_err(|e| e.to_string())?;
        let eig = solve_eta_general(&x, &plan, 2, &WeightMatrix::identity(2))
            .map_err(|e| e.to_string())?
            .objective;
        let oracle = oracles::general_objective(&x, m, 2);
        worst_r2 = worst_r2.max((eig - oracle).abs() / oracle.max(1.0));
    }
    let msg = format!(
        "r = 1: 50 instances, max rel err {worst_r1:.1e} (tol 1e-8); r = 2: max rel err {worst_r2:.1e} (tol 1e-9)"
    );
    if worst_r1 <= 1e-8 && worst_r2 <= 1e-9 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn construction_conditions() -> Outcome {
    let mut g = rng::stream(9, 1);
    let mut cases = 0;
    let mut failures = Vec::new();
    for p in 1..=5usize {
        for m in 1..=6usize {
            for r in 1..=p {
                // Validity: errors iff n/(p−r) ≤ m.
                let q = p - r;
                if q > 0 {
                    for n in [m * q, m * q + 1] {
                        let Ok(plan) = ShiftPlan::new(n, m) else { continue };
                        let x = gaussian(n, q, &mut g);
                        let res = solve_validity_only(&x, &plan);
                        let expect_err = n <= m * q;
                        cases += 1;
                        if expect_err != matches!(res, Err(CptError::ValidityConditionViolated { .. }))
                            || (!expect_err && res.is_err())
                        {
                            failures.push(format!("validity n={n} q={q} m={m}"));
                        }
                    }
                }
                // General: errors iff n < pm − r + 1.
                for n in [(p * m + 1 - r).saturating_sub(1), p * m + 1 - r] {
                    let Ok(plan) = ShiftPlan::new(n, m) else { continue };
                    let x = gaussian(n, p, &mut g);
                    let res = solve_eta_general(&x, &plan, r, &WeightMatrix::identity(r));
                    let expect_err = n + r < p * m + 1;
                    cases += 1;
                    if expect_err != matches!(res, Err(CptError::PowerConditionViolated { .. }))
                        || (!expect_err && res.is_err())
                    {
                        failures.push(format!("general n={n} p={p} m={m} r={r}"));
                    }
                }
            }
            // Closed form: errors iff n < pm.
            for n in [p * m - 1, p * m] {
                let Ok(plan) = ShiftPlan::new(n, m) else { continue };
                let x = gaussian(n, p, &mut g);
                let res = solve_eta_r1(&x, &plan);
                let expect_err = n < p * m;
                cases += 1;
                if expect_err != matches!(res, Err(CptError::PowerConditionViolated { .. }))
                    || (!expect_err && res.is_err())
                {
                    failures.push(format!("r1 n={n} p={p} m={m}"));
                }
            }
        }
    }
    if failures.is_empty() {
        Ok(format!("{cases} boundary cases on both sides"))
    } else {
        Err(format!(
            "{} of {cases} boundary cases wrong: {}",
            failures.len(),
            failures.join("; ")
        ))
    }
}

fn ordering_search() -> Outcome {
    let (n, p, m, budget) = (200, 10, 19, 2000);
    let plan = ShiftPlan::new(n, m).map_err(|e| e.to_string())?;
    let mut parts = Vec::new();
    let mut ok = true;
    for (family, name) in [
        (DesignFamily::Gaussian, "gaussian"),
        (DesignFamily::Cauchy, "cauchy"),
        (DesignFamily::OneWayAnova, "anova"),
    ] {
        let mut wins = 0;
        let mut monotone = 0;
        for seed in 0..20u64 {
            let x = sim::gen_design(family, n, p, &mut rng::keyed_stream(seed, &[5, family as u64]));
            let cfg = OrderingConfig::with_budget(budget, seed);
            let ga = ga_optimize(&x, &plan, 1, None, &cfg).map_err(|e| e.to_string())?;
            let ss = stochastic_search(&x, &plan, 1, None, &cfg).map_err(|e| e.to_string())?;
            if ga.objective >= ss.objective {
                wins += 1;
            }
            let mono = ga
                .trace
                .windows(2)
                .all(|w| w[0].best_objective <= w[1].best_objective && w[0].evaluations < w[1].evaluations)
                && ga.evaluations <= budget;
            monotone += usize::from(mono);
        }
        ok &= wins >= 12 && monotone == 20;
        parts.push(format!("{name} GA>=SS {wins}/20, monotone {monotone}/20"));
    }
    let msg = parts.join("; ") + " (need >= 12/20 and 20/20)";
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn interval_duality() -> Outcome {
    let (n, p, beta1) = (100, 3, 1.0);
    let mut g = rng::stream(10, 1);
    let mut off_endpoint = 0;
    let mut near_endpoint = 0;
    for d in 0..50u64 {
        let x = gaussian(n, p, &mut g);
        let y = x.column(0) * beta1 + normal_vec(n, &mut g);
        let opts = CptOptions {
            m: Some(19),
            ordering: OrderingMethod::Genetic(OrderingConfig::with_budget(200, d)),
            ..CptOptions::new(0.05)
        };
        let (out, inv) = confidence_interval(&y, &x, &ContrastSpec::single(0), &opts).map_err(|e| e.to_string())?;
        if inv.unbounded {
            return Err(format!("dataset {d}: unbounded interval"));
        }
        let (lo, hi) = inv.interval;
        let w = hi - lo;
        for i in 0..=400 {
            let theta = lo - 0.5 * w + 2.0 * w * i as f64 / 400.0;
            let member = inv.contains(theta);
            let accepted = !test_at(&out, theta).map_err(|e| e.to_string())?.reject;
            if member != accepted {
                if (theta - lo).abs().min((theta - hi).abs()) <= inv.endpoint_gap {
                    near_endpoint += 1;
                } else {
                    off_endpoint += 1;
                }
            }
        }
    }

    // Coverage at a fixed design with the ordering chosen once.
    let x = gaussian(n, p, &mut g);
    let plan = ShiftPlan::new(n, 19).map_err(|e| e.to_string())?;
    let perm = ga_optimize(&x, &plan, 1, None, &OrderingConfig::with_budget(500, 3))
        .map_err(|e| e.to_string())?
        .permutation;
    let opts = CptOptions {
        m: Some(19),
        ordering: OrderingMethod::Fixed(perm),
        ..CptOptions::new(0.05)
    };
    let reps = 2000;
    let mut covered = 0;
    for _ in 0..reps {
        let y = x.column(0) * beta1 + normal_vec(n, &mut g);
        let (_, inv) = confidence_interval(&y, &x, &ContrastSpec::single(0), &opts).map_err(|e| e.to_string())?;
        covered += usize::from(inv.contains(beta1));
    }
    let coverage = covered as f64 / reps as f64;
    let msg = format!(
        "50 datasets x 401 points: {off_endpoint} disagreements away from endpoints, {near_endpoint} within one gap; coverage {coverage:.4} over {reps} reps (need 0.95 +/- 0.015)"
    );
    if off_endpoint == 0 && (coverage - 0.95).abs() <= 0.015 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn power_sanity() -> Outcome {
    let scenario = Scenario {
        design_copies: 20,
        methods: vec![Method::CptGa, Method::CptIdentity, Method::TTest],
        ..Scenario::desk(DesignFamily::Gaussian, ErrorFamily::Gaussian, 5, 77)
    }
    .normalized()
    .map_err(|e| e.to_string())?;
    let report = sim::run(&scenario).map_err(|e| e.to_string())?;
    let mut problems = Vec::new();

    let t1 = report.pooled(Method::TTest, 1).ok_or("missing t row")?;
    let calibrated_ok = report
        .copies
        .iter()
        .all(|c| c.error.is_none() && (c.calibrated_power - 0.2).abs() <= 0.05);
    if (t1.rate - 0.2).abs() > 0.05 || !calibrated_ok {
        problems.push(format!("t-test power at s = 1 is {:.4}", t1.rate));
    }

    let ga: Vec<_> = (0..=5).map(|s| report.pooled(Method::CptGa, s).unwrap()).collect();
    for w in ga.windows(2) {
        if w[1].rate <= w[0].rate - w[0].se.max(w[1].se) {
            problems.push(format!("GA power not increasing at s = {}", w[1].s));
        }
    }

    let ga3 = report.per_copy(Method::CptGa, 3);
    let id3 = report.per_copy(Method::CptIdentity, 3);
    let better = ga3.iter().zip(&id3).filter(|(a, b)| a.rate >= b.rate).count();
    if better < 14 {
        problems.push(format!("GA >= identity in only {better}/20 copies"));
    }
    let rates: Vec<String> = ga.iter().map(|r| format!("{:.3}", r.rate)).collect();
    let msg = format!(
        "t power(s=1) {:.4}; GA power by s [{}]; GA >= identity at s = 3 in {better}/20 copies",
        t1.rate,
        rates.join(", ")
    );
    if problems.is_empty() {
        Ok(msg)
    } else {
        Err(format!("{msg}: {}", problems.join("; ")))
    }
}

fn run_cli(args: &[&str], threads: usize) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_cpt"))
        .args(args)
        .env("CPT_THREADS", threads.to_string())
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

/// Manifest minus the fields that legitimately vary between runs.
fn stable_manifest(dir: &Path) -> Result<serde_json::Value, String> {
    let text = std::fs::read_to_string(dir.join("manifest.json")).map_err(|e| e.to_string())?;
    let mut v: serde_json::Value = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    let obj = v.as_object_mut().ok_or("manifest is not an object")?;
    obj.remove("wallClock");
    obj.remove("threads");
    if let Some(argv) = obj.get_mut("argv").and_then(|a| a.as_array_mut()) {
        argv.pop();
    }
    Ok(v)
}

fn determinism() -> Outcome {
    let root = Path::new(env!("CARGO_MANIFEST_DIR"));
    let data = root.join("data/example.csv");
    let scenario = root.join("tests/data/small_scenario.json");
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = data.to_str().unwrap();
    let scenario = scenario.to_str().unwrap();
    let commands: Vec<(&str, Vec<&str>)> = vec![
        (
            "test",
            vec![
                "test",
                data,
                "--target",
                "x1",
                "--ordering",
                "ga",
                "--budget",
                "400",
                "--seed",
                "3",
            ],
        ),
        (
            "ci",
            vec![
                "ci",
                data,
                "--target",
                "x2",
                "--ordering",
                "search",
                "--budget",
                "400",
                "--seed",
                "4",
            ],
        ),
        (
            "order",
            vec!["order", data, "--target", "x3", "--budget", "400", "--seed", "5"],
        ),
        ("simulate", vec!["simulate", scenario]),
    ];
    let mut checked = 0;
    for (name, args) in &commands {
        let mut dirs = Vec::new();
        let mut stdouts = Vec::new();
        for threads in [1usize, 4] {
            let dir = tmp.path().join(format!("{name}-{threads}"));
            let dir_str = dir.to_str().unwrap().to_string();
            let mut full: Vec<&str> = args.clone();
            full.push("--output-dir");
            full.push(&dir_str);
            stdouts.push(run_cli(&full, threads)?.replace(&dir_str, "<out>"));
            dirs.push(dir);
        }
        if stdouts[0] != stdouts[1] {
            return Err(format!("{name}: stdout differs between 1 and 4 threads"));
        }
        let mut names: Vec<String> = std::fs::read_dir(&dirs[0])
            .map_err(|e| e.to_string())?
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .filter(|f| f != "manifest.json")
            .collect();
        names.sort();
        for file in &names {
            let a = std::fs::read(dirs[0].join(file)).map_err(|e| e.to_string())?;
            let b = std::fs::read(dirs[1].join(file)).map_err(|e| e.to_string())?;
            if a != b {
                return Err(format!("{name}: {file} differs between 1 and 4 threads"));
            }
            checked += 1;
        }
        if stable_manifest(&dirs[0])? != stable_manifest(&dirs[1])? {
            return Err(format!("{name}: manifests differ beyond wall-clock and thread count"));
        }
        // The manifest alone reproduces the outputs.
        let manifest = dirs[0].join("manifest.json");
        let again = tmp.path().join(format!("{name}-rerun"));
        run_cli(
            &[
                "rerun",
                manifest.to_str().unwrap(),
                "--output-dir",
                again.to_str().unwrap(),
            ],
            2,
        )?;
    }
    Ok(format!(
        "{} commands, {checked} output files bit-identical at 1 vs 4 threads; every manifest re-ran exactly",
        commands.len()
    ))
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 8] = [
        ("exact size", exact_size),
        ("rank uniformity", rank_uniformity),
        ("closed-form optimality", closed_form_optimality),
        ("construction conditions", construction_conditions),
        ("ordering search", ordering_search),
        ("interval duality and coverage", interval_duality),
        ("power sanity", power_sanity),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(msg) => println!("PASS {} {name}: {msg} [{secs:.1}s]", i + 1),
            Err(msg) => {
                failed += 1;
                println!("FAIL {} {name}: {msg} [{secs:.1}s]", i + 1);
            }
        }
    }
    println!(
        "{} of {} acceptance criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
