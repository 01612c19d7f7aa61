//! Confidence intervals for a single contrast by inverting the CPT.
//!
//! Testing `Rᵀβ = θ` with the same coefficient vectors only moves `S₀`
//! relative to the other statistics: after re-centering, the shifted
//! statistics are `S₀ − x` and `S_j` (`j ≥ 1`) with `x = θδ / ‖R‖`. Writing
//! `u = S₀ − x`, the median of `{u, S₁, …, S_m}` is affine in `u` between
//! consecutive order statistics of `S₁ … S_m`, and each indicator
//! `|S_j − med| ≥ |u − med|` flips only where `u = S_j` or
//! `u = (S_j − 2A)/(2B − 1)` on a piece where `med = A + Bu`. The acceptance
//! set is therefore a finite union of points and open intervals between
//! sorted candidates.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::rank_test::{self, CptOptions, CptOutcome, CyclicStatistics};
use crate::{ContrastSpec, CptError, Result};

/// Candidates closer than this, relative to the largest `|S_j|`, are merged.
const MERGE_TOLERANCE: f64 = 1e-10;

/// Points used by [`InversionResult::grid_check`] unless overridden.
pub const DEFAULT_GRID_POINTS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct InversionResult {
    /// Infimum of the accepted shifts `x`; `-∞` when unbounded.
    pub x_min: f64,
    pub x_max: f64,
    /// `[x_min/δ, x_max/δ]` rescaled to the units of `Rᵀβ`.
    pub interval: (f64, f64),
    pub level: f64,
    pub breakpoint_count: usize,
    pub unbounded: bool,
    /// The acceptance set has a rejected stretch strictly inside the
    /// reported interval.
    pub disconnected: bool,
    /// Largest distance between an endpoint and its neighbouring candidate,
    /// in the units of `Rᵀβ`.
    pub endpoint_gap: f64,
    /// Smallest distance between consecutive candidates, in the units of
    /// `Rᵀβ`.
    pub min_gap: f64,
    pub delta: f64,
    pub scale: f64,
    pub alpha: f64,
    /// `S₀ … S_m` at `θ = 0`.
    pub statistics: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct GridCheck {
    pub lo: f64,
    pub hi: f64,
    pub accepted: usize,
    /// Rejected grid points strictly between the first and last accepted
    /// points.
    pub interior_rejections: usize,
}

/// `1 + #{j ≥ 1 : |c_j − med| ≥ |u − med|}`, centered exactly as the test
/// does.
fn rank_at(u: f64, c: &[f64]) -> usize {
    let mut all = Vec::with_capacity(c.len() + 1);
    all.push(u);
    all.extend_from_slice(c);
    let centered = rank_test::center(&all);
    1 + centered[1..].iter().filter(|&&v| v >= centered[0]).count()
}

/// Order statistic `idx` of `{u} ∪ c` as `A + Bu`, where `u` sits at
/// position `k` among the sorted `c`.
fn order_stat(idx: usize, k: usize, c: &[f64]) -> (f64, f64) {
    match idx.cmp(&k) {
        std::cmp::Ordering::Less => (c[idx], 0.0),
        std::cmp::Ordering::Equal => (0.0, 1.0),
        std::cmp::Ordering::Greater => (c[idx - 1], 0.0),
    }
}

fn affine_median(k: usize, c: &[f64]) -> (f64, f64) {
    order_stat(c.len() / 2, k, c)
}

/// Sorted, de-duplicated candidate points in `u`.
fn candidates(c: &[f64]) -> Vec<f64> {
    let mut sorted = c.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut out = sorted.clone();
    for k in 0..=sorted.len() {
        let (a, b) = affine_median(k, &sorted);
        let denom = 2.0 * b - 1.0;
        if denom == 0.0 {
            continue;
        }
        out.extend(sorted.iter().map(|&cj| (cj - 2.0 * a) / denom));
    }
    out.retain(|v| v.is_finite());
    out.sort_by(f64::total_cmp);
    // Roots that coincide in exact arithmetic land within rounding of each
    // other; merge them so every gap is resolvable.
    let spread = sorted.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(f64::MIN_POSITIVE);
    let merge = MERGE_TOLERANCE * spread;
    let mut merged: Vec<f64> = Vec::with_capacity(out.len());
    for v in out {
        if merged.last().is_none_or(|&last| v - last > merge) {
            merged.push(v);
        }
    }
    merged
}

/// Accepted `u` range from the CPT statistics `s = [S₀, …, S_m]`.
struct URegion {
    lo: f64,
    hi: f64,
    lo_gap: f64,
    hi_gap: f64,
    min_gap: f64,
    count: usize,
    disconnected: bool,
}

fn accepted_region(c: &[f64], alpha: f64) -> Option<URegion> {
    let total = c.len() + 1;
    let cand = candidates(c);
    let k = cand.len();
    let accepts = |u: f64| !rank_test::rejects(rank_at(u, c), total, alpha);
    // Pieces in order: the left ray, point 0, open (0, 1), point 1, ...,
    // point k-1, the right ray. The rank is constant on each open piece.
    // With m = 1 one of the rays is accepted, so both are probed.
    let pad = 1.0 + (cand[k - 1] - cand[0]);
    let mut pieces: Vec<(f64, f64, bool, bool)> = Vec::with_capacity(2 * k + 1);
    pieces.push((f64::NEG_INFINITY, cand[0], true, accepts(cand[0] - pad)));
    for (i, &v) in cand.iter().enumerate() {
        pieces.push((v, v, false, accepts(v)));
        if i + 1 < k {
            pieces.push((v, cand[i + 1], true, accepts(0.5 * (v + cand[i + 1]))));
        }
    }
    pieces.push((cand[k - 1], f64::INFINITY, true, accepts(cand[k - 1] + pad)));

    let first = pieces.iter().position(|piece| piece.3)?;
    let last = pieces.iter().rposition(|piece| piece.3)?;
    let lo = pieces[first].0;
    let hi = pieces[last].1;
    let gap_at = |v: f64| {
        if !v.is_finite() {
            return f64::INFINITY;
        }
        let i = cand.partition_point(|&w| w < v);
        let left = if i > 0 { cand[i] - cand[i - 1] } else { 0.0 };
        let right = if i + 1 < k { cand[i + 1] - cand[i] } else { 0.0 };
        left.max(right)
    };
    let min_gap = cand.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
    Some(URegion {
        lo,
        hi,
        lo_gap: gap_at(lo),
        hi_gap: gap_at(hi),
        min_gap,
        count: k,
        disconnected: pieces[first..=last].iter().any(|piece| piece.2 && !piece.3),
    })
}

/// Invert the test of `Rᵀβ = θ` over `θ` given the statistics, the signal
/// gap `δ` and the contrast scale `‖R‖`.
pub fn invert_statistics(s: &[f64], delta: f64, scale: f64, alpha: f64) -> Result<InversionResult> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(CptError::InvalidInput(format!("alpha = {alpha} outside (0, 1)")));
    }
    if s.len() < 2 {
        return Err(CptError::InvalidInput("need at least two statistics".into()));
    }
    if delta.is_nan() || delta <= 0.0 || !delta.is_finite() {
        return Err(CptError::IntervalUndefined(format!("signal gap delta = {delta}")));
    }
    let c = &s[1..];
    let region = accepted_region(c, alpha)
        .ok_or_else(|| CptError::IntervalUndefined("no accepted value; statistics are degenerate".into()))?;
    // Far from the data the rank is 1 once m ≥ 2, so a bounded set needs
    // 1/(m+1) ≤ α; the region scan covers this through its outer rays.
    let to_theta = |x: f64| x / delta * scale;
    let x_min = s[0] - region.hi;
    let x_max = s[0] - region.lo;
    Ok(InversionResult {
        x_min,
        x_max,
        interval: (to_theta(x_min), to_theta(x_max)),
        level: 1.0 - alpha,
        breakpoint_count: region.count,
        unbounded: !(x_min.is_finite() && x_max.is_finite()),
        disconnected: region.disconnected,
        endpoint_gap: to_theta(region.lo_gap.max(region.hi_gap)),
        min_gap: to_theta(region.min_gap),
        delta,
        scale,
        alpha,
        statistics: s.to_vec(),
    })
}

/// Invert a completed single-contrast CPT run.
pub fn invert(outcome: &CptOutcome) -> Result<InversionResult> {
    let r = outcome.reduced.r();
    if r > 1 {
        return Err(CptError::MultivariateInversion(r));
    }
    if outcome.etas.vanishing_signal {
        return Err(CptError::IntervalUndefined("vanishing signal".into()));
    }
    let scale = outcome
        .reduced
        .contrast_scale()
        .ok_or(CptError::MultivariateInversion(r))?;
    // Realized gap on the tested column, so the duality with re-running the
    // test at `y − X₁θ` holds to rounding.
    let tested = outcome.x.column(0);
    let delta = tested.dot(&outcome.etas.etas[0]) - tested.dot(&outcome.etas.etas[1]);
    invert_statistics(&outcome.statistics.s, delta, scale, outcome.alpha)
}

/// Run the CPT for a single contrast and invert it.
pub fn confidence_interval(
    y: &DVector<f64>,
    x: &nalgebra::DMatrix<f64>,
    spec: &ContrastSpec,
    options: &CptOptions,
) -> Result<(CptOutcome, InversionResult)> {
    if spec.r() > 1 {
        return Err(CptError::MultivariateInversion(spec.r()));
    }
    let outcome = rank_test::cpt(y, x, spec, options)?;
    let interval = invert(&outcome)?;
    Ok((outcome, interval))
}

/// Re-run the test of `Rᵀβ = θ` on the outcome's data by subtracting the
/// tested column.
pub fn test_at(outcome: &CptOutcome, theta: f64) -> Result<CyclicStatistics> {
    let scale = outcome
        .reduced
        .contrast_scale()
        .ok_or(CptError::MultivariateInversion(outcome.reduced.r()))?;
    let shifted = &outcome.y - outcome.x.column(0) * (theta / scale);
    rank_test::evaluate_outcome(&shifted, &outcome.etas, outcome.alpha)
}

impl InversionResult {
    pub fn contains(&self, theta: f64) -> bool {
        self.interval.0 <= theta && theta <= self.interval.1
    }

    /// p-value of `Rᵀβ = θ` from the stored statistics.
    pub fn pvalue_at(&self, theta: f64) -> f64 {
        let x = theta * self.delta / self.scale;
        rank_at(self.statistics[0] - x, &self.statistics[1..]) as f64 / self.statistics.len() as f64
    }

    pub fn accepts(&self, theta: f64) -> bool {
        let total = self.statistics.len();
        let x = theta * self.delta / self.scale;
        !rank_test::rejects(
            rank_at(self.statistics[0] - x, &self.statistics[1..]),
            total,
            self.alpha,
        )
    }

    /// Dense-grid cross-check over a span covering every accepted value.
    pub fn grid_check(&self, points: usize) -> GridCheck {
        let c = &self.statistics[1..];
        let (cmin, cmax) = c
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let mean = c.iter().sum::<f64>() / c.len() as f64;
        let sd = (c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c.len() as f64).sqrt();
        let pad = 2.0 * (cmax - cmin) + 6.0 * sd + 1e-12;
        let (ulo, uhi) = (cmin - pad, cmax + pad);
        let to_theta = |u: f64| (self.statistics[0] - u) / self.delta * self.scale;
        let total = self.statistics.len();
        let steps = points.max(2) - 1;
        let flags: Vec<(f64, bool)> = (0..=steps)
            .map(|i| {
                let u = ulo + (uhi - ulo) * i as f64 / steps as f64;
                (to_theta(u), !rank_test::rejects(rank_at(u, c), total, self.alpha))
            })
            .collect();
        let acc: Vec<usize> = (0..flags.len()).filter(|&i| flags[i].1).collect();
        match (acc.first(), acc.last()) {
            (Some(&a), Some(&b)) => {
                let (t1, t2) = (flags[a].0, flags[b].0);
                GridCheck {
                    lo: t1.min(t2),
                    hi: t1.max(t2),
                    accepted: acc.len(),
                    interior_rejections: (a..=b).filter(|&i| !flags[i].1).count(),
                }
            }
            _ => GridCheck {
                lo: f64::NAN,
                hi: f64::NAN,
                accepted: 0,
                interior_rejections: 0,
            },
        }
    }
}
