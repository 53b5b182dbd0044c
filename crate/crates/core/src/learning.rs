//! Learning functions and candidate scoring.
//!
//! `eff`, `u` and `u_m` score a single prediction. The collective learning
//! function scores a candidate `(x_next, level)` by the cost-normalized mean
//! drop of a learning function over a subset of the pool when the candidate's
//! hypothetical observation shrinks the high-fidelity posterior variance
//! (the posterior mean is held fixed). The mfEGRA routines pick a source for a
//! fixed point by an EFF-weighted lookahead KL divergence.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mfgp::{MfGpModel, VARIANCE_FLOOR};
use crate::par;
use crate::probability::{std_normal_cdf, std_normal_pdf};

/// Expected feasibility around the limit state `g = 0` with band `2 sigma`.
pub fn eff(mu: f64, sigma: f64) -> f64 {
    if !(sigma > 0.0) {
        return 0.0;
    }
    let eps = 2.0 * sigma;
    let t0 = -mu / sigma;
    let tm = (-eps - mu) / sigma;
    let tp = (eps - mu) / sigma;
    let v = mu * (2.0 * std_normal_cdf(t0) - std_normal_cdf(tm) - std_normal_cdf(tp))
        - sigma * (2.0 * std_normal_pdf(t0) - std_normal_pdf(tm) - std_normal_pdf(tp))
        + eps * (std_normal_cdf(tp) - std_normal_cdf(tm));
    v.max(0.0)
}

/// `|mu| / sigma`; `+inf` for a fully resolved point.
pub fn u(mu: f64, sigma: f64) -> f64 {
    if sigma > 0.0 {
        mu.abs() / sigma
    } else {
        f64::INFINITY
    }
}

/// `sigma / exp(|mu|)`.
pub fn u_m(mu: f64, sigma: f64) -> f64 {
    sigma.max(0.0) * (-mu.abs()).exp()
}

/// Learning functions admissible as the core of the collective score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LearningFunctionKind {
    #[serde(rename = "eff")]
    Eff,
    #[serde(rename = "um")]
    Um,
}

impl LearningFunctionKind {
    /// Value at posterior mean `mu` and variance `variance`.
    #[inline]
    pub fn value(self, mu: f64, variance: f64) -> f64 {
        let sigma = variance.max(0.0).sqrt();
        match self {
            LearningFunctionKind::Eff => eff(mu, sigma),
            LearningFunctionKind::Um => u_m(mu, sigma),
        }
    }
}

/// Scored candidate `(pool point, source)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub point: usize,
    pub level: usize,
    pub score: f64,
    pub cost: f64,
}

/// Points over which the collective score is averaged, with cached
/// high-fidelity posterior moments (physical units).
#[derive(Debug, Clone)]
pub struct Subset {
    pub dim: usize,
    /// Row-major inputs.
    pub points: Vec<f64>,
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
}

impl Subset {
    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }
}

/// Collective learning function of one candidate, evaluated pointwise.
///
/// Returns `-inf` for a degenerate candidate. This is the reference
/// formulation; [`scan_candidates`] computes the same scores for a whole
/// candidate set with shared factorizations.
pub fn clf(
    model: &MfGpModel,
    subset: &Subset,
    x_next: &[f64],
    level: usize,
    kind: LearningFunctionKind,
    cost: f64,
) -> Result<f64> {
    if subset.is_empty() {
        return Err(Error::domain("collective score needs a non-empty subset"));
    }
    if !(cost > 0.0) {
        return Err(Error::domain(format!("source cost must be positive, got {cost}")));
    }
    let mut total = 0.0;
    for i in 0..subset.len() {
        let Some(fv) = model.future_variance(subset.point(i), x_next, level)? else {
            return Ok(f64::NEG_INFINITY);
        };
        let mu = subset.means[i];
        total += kind.value(mu, subset.variances[i]) - kind.value(mu, fv);
    }
    Ok(total / subset.len() as f64 / cost)
}

/// Scores every `(subset point, level)` pair as a candidate, with the subset
/// doubling as the averaging set.
///
/// The high-fidelity variances of the subset are recomputed from the model so
/// they are consistent with the cross-covariances used for the lookahead.
/// `excluded(point, level)` removes candidates (e.g. already evaluated ones);
/// degenerate candidates are reported with a score of `-inf`. Output order is
/// level-major, then subset order.
pub fn scan_candidates<F>(
    model: &MfGpModel,
    subset: &Subset,
    costs: &[f64],
    kind: LearningFunctionKind,
    excluded: F,
) -> Result<Vec<CandidateScore>>
where
    F: Fn(usize, usize) -> bool + Sync,
{
    if subset.is_empty() {
        return Err(Error::domain("collective score needs a non-empty subset"));
    }
    if costs.len() != model.n_levels() || costs.iter().any(|c| !(*c > 0.0)) {
        return Err(Error::domain("one positive cost per level is required"));
    }
    let m = subset.len();
    let d = subset.dim;
    let ys2 = model.scaling().y_scale.powi(2);
    let zs = model.standardize_rows(&subset.points);
    let v = model.whitened_cross(0, &zs);
    let s0 = model.prior_variance_std(0);
    let var_std: Vec<f64> = (0..m).map(|i| (s0 - v.column(i).norm_squared()).max(0.0)).collect();
    let base: Vec<f64> = (0..m).map(|i| kind.value(subset.means[i], var_std[i] * ys2)).collect();

    // prior level-0 cross-covariance is the same for every candidate level
    let prior =
        nalgebra::DMatrix::from_fn(m, m, |i, c| model.kernel0_std(&zs[i * d..(i + 1) * d], &zs[c * d..(c + 1) * d]));

    let mut out = Vec::with_capacity(m * costs.len());
    for (level, &cost) in costs.iter().enumerate() {
        let w = model.whitened_cross(level, &zs);
        let mut cross = prior.clone();
        cross.gemm_tr(-1.0, &v, &w, 1.0);
        let prior_l = model.prior_variance_std(level);
        let noise = model.observation_noise(level);
        let scores = par::map_range(m, |c| {
            if excluded(c, level) {
                return None;
            }
            let denom = (prior_l - w.column(c).norm_squared()).max(0.0) + noise;
            if denom < VARIANCE_FLOOR * prior_l {
                return Some(f64::NEG_INFINITY);
            }
            let col = cross.column(c);
            let mut total = 0.0;
            for i in 0..m {
                let fv = (var_std[i] - col[i] * col[i] / denom).max(0.0);
                // unchanged variance contributes exactly zero
                if fv != var_std[i] {
                    total += base[i] - kind.value(subset.means[i], fv * ys2);
                }
            }
            Some(total / m as f64 / cost)
        });
        for (c, s) in scores.into_iter().enumerate() {
            if let Some(score) = s {
                out.push(CandidateScore { point: c, level, score, cost });
            }
        }
    }
    Ok(out)
}

/// Best candidate: highest score, then cheaper source, then lower level,
/// then lower point index. Candidates scoring `-inf` or NaN never win.
pub fn select_best(scores: &[CandidateScore]) -> Option<CandidateScore> {
    scores.iter().filter(|s| s.score > f64::NEG_INFINITY).copied().reduce(|best, s| {
        let better = s.score > best.score
            || (s.score == best.score
                && (s.cost < best.cost
                    || (s.cost == best.cost
                        && (s.level < best.level || (s.level == best.level && s.point < best.point)))));
        if better {
            s
        } else {
            best
        }
    })
}

/// KL information gain between present and one-step-ahead high-fidelity
/// posteriors at `x`.
///
/// `Ok(None)` flags a degenerate term: the present or future predictive
/// variance is below the variance floor, or the candidate itself is
/// degenerate.
pub fn kl_term(model: &MfGpModel, x: &[f64], x_next: &[f64], level: usize) -> Result<Option<f64>> {
    let sp2 = model.predict(0, x)?.variance;
    let Some(bar) = model.lookahead_variance(x, x_next, level)? else {
        return Ok(None);
    };
    let floor = VARIANCE_FLOOR * model.prior_variance_std(0) * model.scaling().y_scale.powi(2);
    Ok(kl_from_variances(sp2, bar, floor))
}

fn kl_from_variances(sp2: f64, bar: f64, floor: f64) -> Option<f64> {
    let sf2 = sp2 - bar;
    if sp2 < floor || sf2 < floor {
        return None;
    }
    Some((0.5 * (sf2 / sp2).ln() + (sp2 + bar) / (2.0 * sf2) - 0.5).max(0.0))
}

/// mfEGRA source selection for a fixed next point.
///
/// Maximizes `(1 / c_l) * sum_x EFF(x) * D(x | x_next, l)` over the pool
/// (`pool` is row-major, `eff_values` aligned with it). The term of
/// `skip_point` (the pool index of `x_next`, whose own term is the
/// exact-observation limit) is left out, as are flagged terms. Returns
/// `Ok(None)` when every source's sum is zero. Ties go to the cheaper
/// source, then the lower level.
pub fn mfegra_select_source(
    model: &MfGpModel,
    x_next: &[f64],
    pool: &[f64],
    eff_values: &[f64],
    costs: &[f64],
    skip_point: Option<usize>,
    allowed: &dyn Fn(usize) -> bool,
) -> Result<Option<usize>> {
    let d = model.dim();
    if pool.is_empty() || pool.len() != eff_values.len() * d {
        return Err(Error::domain("pool and EFF values must be non-empty and aligned"));
    }
    if costs.len() != model.n_levels() || costs.iter().any(|c| !(*c > 0.0)) {
        return Err(Error::domain("one positive cost per level is required"));
    }
    let active: Vec<usize> = (0..eff_values.len()).filter(|&i| eff_values[i] > 0.0 && Some(i) != skip_point).collect();
    let rows: Vec<f64> = active.iter().flat_map(|&i| pool[i * d..(i + 1) * d].iter().copied()).collect();
    let zs = model.standardize_rows(&rows);
    let z_next = model.standardize_rows(x_next);
    let s0 = model.prior_variance_std(0);
    let floor = VARIANCE_FLOOR * s0;

    const BLOCK: usize = 1024;
    let blocks = active.len().div_ceil(BLOCK);
    let mut best: Option<(usize, f64)> = None;
    for level in 0..costs.len() {
        if !allowed(level) {
            continue;
        }
        let w = model.whitened_cross(level, &z_next);
        let w = w.column(0);
        let denom = (model.prior_variance_std(level) - w.norm_squared()).max(0.0) + model.observation_noise(level);
        if denom < VARIANCE_FLOOR * model.prior_variance_std(level) {
            continue;
        }
        let partial = par::map_range(blocks, |b| {
            let lo = b * BLOCK;
            let hi = (lo + BLOCK).min(active.len());
            let zb = &zs[lo * d..hi * d];
            let v = model.whitened_cross(0, zb);
            let mut sum = 0.0;
            for j in 0..hi - lo {
                let vj = v.column(j);
                let sp2 = (s0 - vj.norm_squared()).max(0.0);
                let c = model.kernel0_std(&zb[j * d..(j + 1) * d], &z_next) - vj.dot(&w);
                let bar = c * c / denom;
                if let Some(kl) = kl_from_variances(sp2, bar, floor) {
                    sum += eff_values[active[lo + j]] * kl;
                }
            }
            sum
        });
        let score = partial.iter().sum::<f64>() / costs[level];
        if !(score > 0.0) {
            continue;
        }
        let better = match best {
            None => true,
            Some((bl, bs)) => score > bs || (score == bs && costs[level] < costs[bl]),
        };
        if better {
            best = Some((level, score));
        }
    }
    Ok(best.map(|(l, _)| l))
}
