//! Row pre-ordering: maximize `O*(ΠX)` over row permutations `Π`.
//!
//! The objective is not invariant to the order of the rows because the
//! cyclic shifts act on positions. Finding the best order is a non-linear
//! travelling-salesman-type problem; we search it with a genetic algorithm
//! (order crossover, transposition mutation, size-2 tournaments, elitism)
//! and keep plain random search as a baseline.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::{Hash, Hasher};
use std::io::Write;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::construction::{solve_eta, ShiftPlan, WeightMatrix};
use crate::linalg::gather_rows;
use crate::rng::{self, StreamRng};
use crate::spectral::SpectralObjective;
use crate::{CptError, Result};

/// Row index map: `(ΠX)[i] = X[perm[i]]`.
pub type Permutation = Vec<usize>;

/// Generations in a row without a single new evaluation before the genetic
/// search gives up on the remaining budget.
const STALE_GENERATION_LIMIT: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct OrderingConfig {
    pub population_size: usize,
    /// Total objective evaluations; cache hits are free.
    pub sample_budget: usize,
    pub crossover_rate: f64,
    pub mutation_rate: f64,
    pub seed: u64,
    pub elitism: usize,
}

impl Default for OrderingConfig {
    fn default() -> Self {
        OrderingConfig {
            population_size: 10,
            sample_budget: 1000,
            crossover_rate: 0.9,
            mutation_rate: 0.5,
            seed: 0,
            elitism: 1,
        }
    }
}

impl OrderingConfig {
    pub fn with_budget(sample_budget: usize, seed: u64) -> Self {
        OrderingConfig {
            sample_budget,
            seed,
            ..Default::default()
        }
    }

    fn validate(&self, genetic: bool) -> Result<()> {
        let rate_ok = |r: f64| (0.0..=1.0).contains(&r);
        if !rate_ok(self.crossover_rate) || !rate_ok(self.mutation_rate) {
            return Err(CptError::InvalidInput("rates must lie in [0, 1]".into()));
        }
        if self.sample_budget == 0 {
            return Err(CptError::InvalidInput("sample budget must be positive".into()));
        }
        if genetic {
            if self.population_size < 2 {
                return Err(CptError::InvalidInput("population size must be at least 2".into()));
            }
            if self.elitism == 0 || self.elitism >= self.population_size {
                return Err(CptError::InvalidInput("elitism must be in [1, population size)".into()));
            }
            if self.sample_budget < self.population_size {
                return Err(CptError::InvalidInput(
                    "sample budget must cover the initial population".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchKind {
    Genetic,
    StochasticSearch,
    Identity,
    Fixed,
}

/// How the pipeline picks its pre-ordering.
#[derive(Debug, Clone, PartialEq)]
pub enum OrderingMethod {
    Identity,
    Fixed(Permutation),
    StochasticSearch(OrderingConfig),
    Genetic(OrderingConfig),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub evaluations: usize,
    pub best_objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderingSolution {
    pub permutation: Permutation,
    /// `O*(ΠX)` recomputed by the construction module.
    pub objective: f64,
    pub trace: Vec<TracePoint>,
    pub method: SearchKind,
    pub evaluations: usize,
}

impl OrderingSolution {
    /// Trace as `evaluations,best_objective` CSV.
    pub fn write_trace_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "evaluations,best_objective")?;
        for point in &self.trace {
            writeln!(out, "{},{}", point.evaluations, point.best_objective)?;
        }
        Ok(())
    }
}

pub fn is_bijection(perm: &[usize]) -> bool {
    let mut seen = vec![false; perm.len()];
    perm.iter()
        .all(|&i| i < seen.len() && !std::mem::replace(&mut seen[i], true))
}

/// `O*(ΠX)` through the construction module.
pub fn evaluate(
    x: &DMatrix<f64>,
    perm: &[usize],
    plan: &ShiftPlan,
    r: usize,
    weight: Option<&WeightMatrix>,
) -> Result<f64> {
    if perm.len() != x.nrows() || !is_bijection(perm) {
        return Err(CptError::InvalidInput(
            "permutation is not a bijection on the rows".into(),
        ));
    }
    Ok(solve_eta(&gather_rows(x, perm), plan, r, weight)?.objective)
}

/// Objective with a spectral fast path and the dense route as fallback.
struct Objective<'a> {
    x: &'a DMatrix<f64>,
    plan: ShiftPlan,
    r: usize,
    weight: Option<&'a WeightMatrix>,
    fast: SpectralObjective,
}

impl<'a> Objective<'a> {
    fn new(x: &'a DMatrix<f64>, plan: &ShiftPlan, r: usize, weight: Option<&'a WeightMatrix>) -> Result<Self> {
        if x.nrows() != plan.n {
            return Err(CptError::DimensionMismatch(format!(
                "design has {} rows, shift plan expects {}",
                x.nrows(),
                plan.n
            )));
        }
        // Surfaces precondition errors (power condition, weight shape) once.
        let identity: Permutation = (0..plan.n).collect();
        evaluate(x, &identity, plan, r, weight)?;
        Ok(Objective {
            x,
            plan: *plan,
            r,
            weight,
            fast: SpectralObjective::new(x, *plan, r, weight),
        })
    }

    fn value(&self, perm: &[usize]) -> Result<f64> {
        match self.fast.value(perm) {
            Some(v) => Ok(v),
            None => evaluate(self.x, perm, &self.plan, self.r, self.weight),
        }
    }

    fn values(&self, perms: &[Permutation]) -> Result<Vec<f64>> {
        perms.par_iter().map(|p| self.value(p)).collect()
    }

    fn finish(
        &self,
        best: Permutation,
        trace: Vec<TracePoint>,
        method: SearchKind,
        evaluations: usize,
    ) -> Result<OrderingSolution> {
        let objective = evaluate(self.x, &best, &self.plan, self.r, self.weight)?;
        Ok(OrderingSolution {
            permutation: best,
            objective,
            trace,
            method,
            evaluations,
        })
    }
}

fn key(perm: &[usize]) -> u64 {
    let mut h = DefaultHasher::new();
    perm.hash(&mut h);
    h.finish()
}

fn random_permutation(n: usize, rng: &mut StreamRng) -> Permutation {
    let mut perm: Permutation = (0..n).collect();
    perm.shuffle(rng);
    perm
}

/// Resolve any ordering method to a solution.
pub fn order(
    x: &DMatrix<f64>,
    plan: &ShiftPlan,
    r: usize,
    weight: Option<&WeightMatrix>,
    method: &OrderingMethod,
) -> Result<OrderingSolution> {
    match method {
        OrderingMethod::Identity => fixed(x, plan, r, weight, (0..x.nrows()).collect(), SearchKind::Identity),
        OrderingMethod::Fixed(perm) => fixed(x, plan, r, weight, perm.clone(), SearchKind::Fixed),
        OrderingMethod::StochasticSearch(cfg) => stochastic_search(x, plan, r, weight, cfg),
        OrderingMethod::Genetic(cfg) => ga_optimize(x, plan, r, weight, cfg),
    }
}

fn fixed(
    x: &DMatrix<f64>,
    plan: &ShiftPlan,
    r: usize,
    weight: Option<&WeightMatrix>,
    perm: Permutation,
    method: SearchKind,
) -> Result<OrderingSolution> {
    let objective = evaluate(x, &perm, plan, r, weight)?;
    Ok(OrderingSolution {
        permutation: perm,
        objective,
        trace: vec![TracePoint {
            evaluations: 1,
            best_objective: objective,
        }],
        method,
        evaluations: 1,
    })
}

/// Random search: the identity first, then uniformly random orders, keeping
/// the best. Spends exactly `sample_budget` evaluations unless the row count
/// admits fewer distinct orders.
pub fn stochastic_search(
    x: &DMatrix<f64>,
    plan: &ShiftPlan,
    r: usize,
    weight: Option<&WeightMatrix>,
    config: &OrderingConfig,
) -> Result<OrderingSolution> {
    config.validate(false)?;
    let objective = Objective::new(x, plan, r, weight)?;
    let n = x.nrows();
    let mut rng = rng::stream(config.seed, 0x5353);
    let batch_size = config.population_size.max(1);

    let mut seen: HashMap<u64, f64> = HashMap::new();
    let mut best: (Permutation, f64) = ((0..n).collect(), f64::NEG_INFINITY);
    let mut evaluations = 0;
    let mut trace = Vec::new();
    let mut pending: Vec<Permutation> = vec![(0..n).collect()];
    let mut misses = 0;
    loop {
        while pending.len() < batch_size
            && evaluations + pending.len() < config.sample_budget
            && misses < 100 * config.sample_budget
        {
            let cand = random_permutation(n, &mut rng);
            let k = key(&cand);
            if seen.contains_key(&k) || pending.contains(&cand) {
                misses += 1;
                continue;
            }
            pending.push(cand);
        }
        if pending.is_empty() {
            break;
        }
        let values = objective.values(&pending)?;
        for (perm, value) in pending.drain(..).zip(values) {
            seen.insert(key(&perm), value);
            evaluations += 1;
            if value > best.1 {
                best = (perm, value);
            }
        }
        trace.push(TracePoint {
            evaluations,
            best_objective: best.1,
        });
        if evaluations >= config.sample_budget {
            break;
        }
    }
    objective.finish(best.0, trace, SearchKind::StochasticSearch, evaluations)
}

/// Order crossover (OX1): copy a random slice of `a`, fill the remaining
/// positions with the genes of `b` in the order they appear after the slice.
pub fn order_crossover(a: &[usize], b: &[usize], rng: &mut impl Rng) -> Permutation {
    let n = a.len();
    if n < 2 {
        return a.to_vec();
    }
    let mut lo = rng.random_range(0..n);
    let mut hi = rng.random_range(0..n);
    if lo > hi {
        std::mem::swap(&mut lo, &mut hi);
    }
    let mut child = vec![usize::MAX; n];
    let mut used = vec![false; n];
    for k in lo..=hi {
        child[k] = a[k];
        used[a[k]] = true;
    }
    let mut pos = (hi + 1) % n;
    for off in 0..n {
        let gene = b[(hi + 1 + off) % n];
        if !used[gene] {
            child[pos] = gene;
            used[gene] = true;
            pos = (pos + 1) % n;
        }
    }
    child
}

fn tournament<'p>(population: &'p [(Permutation, f64)], rng: &mut StreamRng) -> &'p Permutation {
    let a = rng.random_range(0..population.len());
    let b = rng.random_range(0..population.len());
    if population[b].1 > population[a].1 {
        &population[b].0
    } else {
        &population[a].0
    }
}

/// Genetic search over row orders. The initial population holds the
/// identity and `population_size − 1` random orders; each generation keeps
/// the `elitism` best and breeds the rest. The trace records one point per
/// generation that spent evaluations.
pub fn ga_optimize(
    x: &DMatrix<f64>,
    plan: &ShiftPlan,
    r: usize,
    weight: Option<&WeightMatrix>,
    config: &OrderingConfig,
) -> Result<OrderingSolution> {
    config.validate(true)?;
    let objective = Objective::new(x, plan, r, weight)?;
    let n = x.nrows();
    let pop_size = config.population_size;
    let mut rng = rng::stream(config.seed, 0x4741);

    let mut initial: Vec<Permutation> = vec![(0..n).collect()];
    initial.extend((1..pop_size).map(|_| random_permutation(n, &mut rng)));

    let mut cache: HashMap<u64, f64> = HashMap::new();
    let mut evaluations = 0;
    let mut population: Vec<(Permutation, f64)> = Vec::with_capacity(pop_size);
    {
        let mut fresh: Vec<Permutation> = Vec::new();
        for perm in &initial {
            if !fresh.contains(perm) {
                fresh.push(perm.clone());
            }
        }
        let values = objective.values(&fresh)?;
        evaluations += fresh.len();
        for (perm, value) in fresh.iter().zip(&values) {
            cache.insert(key(perm), *value);
        }
        for perm in initial {
            let value = cache[&key(&perm)];
            population.push((perm, value));
        }
    }
    let best_of = |pop: &[(Permutation, f64)]| -> (Permutation, f64) {
        let mut best = &pop[0];
        for ind in pop {
            if ind.1 > best.1 {
                best = ind;
            }
        }
        best.clone()
    };
    let mut best = best_of(&population);
    let mut trace = vec![TracePoint {
        evaluations,
        best_objective: best.1,
    }];

    let mut stale = 0;
    while evaluations < config.sample_budget && stale < STALE_GENERATION_LIMIT {
        let mut ranked: Vec<usize> = (0..population.len()).collect();
        ranked.sort_by(|&a, &b| population[b].1.total_cmp(&population[a].1).then(a.cmp(&b)));

        let mut children: Vec<Permutation> = Vec::with_capacity(pop_size - config.elitism);
        for _ in 0..pop_size - config.elitism {
            let a = tournament(&population, &mut rng);
            let b = tournament(&population, &mut rng);
            let mut child = if rng.random::<f64>() < config.crossover_rate {
                order_crossover(a, b, &mut rng)
            } else {
                a.clone()
            };
            if n >= 2 && rng.random::<f64>() < config.mutation_rate {
                let i = rng.random_range(0..n);
                let mut j = rng.random_range(0..n - 1);
                if j >= i {
                    j += 1;
                }
                child.swap(i, j);
            }
            debug_assert!(is_bijection(&child));
            children.push(child);
        }

        let mut pending: Vec<Permutation> = Vec::new();
        let mut kept: Vec<Permutation> = Vec::with_capacity(children.len());
        for child in children {
            let k = key(&child);
            if cache.contains_key(&k) || pending.contains(&child) {
                kept.push(child);
            } else if evaluations + pending.len() < config.sample_budget {
                pending.push(child.clone());
                kept.push(child);
            }
        }
        let values = objective.values(&pending)?;
        evaluations += pending.len();
        for (perm, value) in pending.iter().zip(values) {
            cache.insert(key(perm), value);
        }

        let mut next: Vec<(Permutation, f64)> = ranked
            .iter()
            .take(config.elitism)
            .map(|&i| population[i].clone())
            .collect();
        for child in kept {
            let value = cache[&key(&child)];
            next.push((child, value));
        }
        // Children dropped for lack of budget are replaced by the next-best
        // survivors of the previous generation.
        for &i in ranked.iter().skip(config.elitism) {
            if next.len() >= pop_size {
                break;
            }
            next.push(population[i].clone());
        }
        population = next;

        let gen_best = best_of(&population);
        if gen_best.1 > best.1 {
            best = gen_best;
        }
        if pending.is_empty() {
            stale += 1;
        } else {
            stale = 0;
            trace.push(TracePoint {
                evaluations,
                best_objective: best.1,
            });
        }
    }
    objective.finish(best.0, trace, SearchKind::Genetic, evaluations)
}
