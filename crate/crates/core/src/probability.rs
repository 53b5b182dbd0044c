//! Marginal distributions, candidate populations and Monte Carlo estimators.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Gamma, LogNormal, Normal};
use statrs::function::erf;

use crate::error::{Error, Result};

/// Seeded generator used for every stochastic step of a run.
pub type RunRng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> RunRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Standard normal density.
#[inline]
pub fn std_normal_pdf(z: f64) -> f64 {
    const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
    INV_SQRT_2PI * (-0.5 * z * z).exp()
}

/// Standard normal CDF.
#[inline]
pub fn std_normal_cdf(z: f64) -> f64 {
    0.5 * erf::erfc(-z / std::f64::consts::SQRT_2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Normal,
    Lognormal,
    Gamma,
}

/// One independent input variable, specified by its first two moments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RandomVariable {
    pub family: Family,
    pub mean: f64,
    pub std_dev: f64,
}

enum Marginal {
    Normal(Normal),
    Lognormal(LogNormal),
    Gamma(Gamma),
}

impl Marginal {
    fn cdf(&self, x: f64) -> f64 {
        match self {
            Marginal::Normal(d) => d.cdf(x),
            Marginal::Lognormal(d) => d.cdf(x),
            Marginal::Gamma(d) => d.cdf(x),
        }
    }

    fn pdf(&self, x: f64) -> f64 {
        match self {
            Marginal::Normal(d) => d.pdf(x),
            Marginal::Lognormal(d) => d.pdf(x),
            Marginal::Gamma(d) => d.pdf(x),
        }
    }

    fn quantile(&self, u: f64) -> f64 {
        match self {
            Marginal::Normal(d) => d.inverse_cdf(u),
            Marginal::Lognormal(d) => d.inverse_cdf(u),
            Marginal::Gamma(d) => d.inverse_cdf(u),
        }
    }
}

impl RandomVariable {
    pub fn new(family: Family, mean: f64, std_dev: f64) -> Result<Self> {
        let rv = RandomVariable { family, mean, std_dev };
        rv.validate()?;
        Ok(rv)
    }

    pub fn normal(mean: f64, std_dev: f64) -> Result<Self> {
        Self::new(Family::Normal, mean, std_dev)
    }

    pub fn lognormal(mean: f64, std_dev: f64) -> Result<Self> {
        Self::new(Family::Lognormal, mean, std_dev)
    }

    pub fn gamma(mean: f64, std_dev: f64) -> Result<Self> {
        Self::new(Family::Gamma, mean, std_dev)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.std_dev > 0.0 && self.std_dev.is_finite()) || !self.mean.is_finite() {
            return Err(Error::domain(format!("invalid moments mean={} std_dev={}", self.mean, self.std_dev)));
        }
        if matches!(self.family, Family::Lognormal | Family::Gamma) && self.mean <= 0.0 {
            return Err(Error::domain(format!("{:?} variable needs a positive mean, got {}", self.family, self.mean)));
        }
        Ok(())
    }

    /// `(mu_ln, sigma_ln)` of the underlying normal for a lognormal variable.
    pub fn lognormal_params(&self) -> (f64, f64) {
        let cv = self.std_dev / self.mean;
        let var_ln = (1.0 + cv * cv).ln();
        (self.mean.ln() - 0.5 * var_ln, var_ln.sqrt())
    }

    /// `(shape, scale)` of a gamma variable.
    pub fn gamma_params(&self) -> (f64, f64) {
        let shape = (self.mean / self.std_dev).powi(2);
        (shape, self.std_dev * self.std_dev / self.mean)
    }

    fn marginal(&self) -> Marginal {
        // Parameters were validated on construction, so these cannot fail.
        match self.family {
            Family::Normal => Marginal::Normal(Normal::new(self.mean, self.std_dev).unwrap()),
            Family::Lognormal => {
                let (mu, sigma) = self.lognormal_params();
                Marginal::Lognormal(LogNormal::new(mu, sigma).unwrap())
            }
            Family::Gamma => {
                let (shape, scale) = self.gamma_params();
                Marginal::Gamma(Gamma::new(shape, 1.0 / scale).unwrap())
            }
        }
    }

    pub fn cdf(&self, x: f64) -> f64 {
        self.marginal().cdf(x)
    }

    /// The `u`-quantile of the variable.
    pub fn inverse_cdf(&self, u: f64) -> Result<f64> {
        if !(u > 0.0 && u < 1.0) {
            return Err(Error::domain(format!("quantile level {u} outside (0, 1)")));
        }
        self.validate()?;
        Ok(self.quantile_unchecked(&self.marginal(), u))
    }

    fn quantile_unchecked(&self, m: &Marginal, u: f64) -> f64 {
        let mut x = m.quantile(u);
        // Newton polish; the library quantiles are only accurate to ~1e-9 in places.
        for _ in 0..2 {
            let p = m.pdf(x);
            if !(p > 0.0) {
                break;
            }
            let step = (m.cdf(x) - u) / p;
            let next = x - step;
            if !next.is_finite() || (self.family != Family::Normal && next <= 0.0) {
                break;
            }
            x = next;
        }
        x
    }
}

/// Row-major set of input vectors drawn from the joint input distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePool {
    dim: usize,
    data: Vec<f64>,
    pub seed: u64,
}

impl CandidatePool {
    pub fn from_rows(rows: &[Vec<f64>], seed: u64) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.is_empty() || dim == 0 || rows.iter().any(|r| r.len() != dim) {
            return Err(Error::domain("pool rows must be non-empty and of equal length"));
        }
        Ok(CandidatePool { dim, data: rows.concat(), seed })
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Row-major coordinates of every point.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    /// Appends another pool of the same dimension.
    pub fn extend(&mut self, other: &CandidatePool) {
        assert_eq!(self.dim, other.dim, "pool dimension mismatch");
        self.data.extend_from_slice(&other.data);
    }

    /// Per-dimension sample mean and standard deviation.
    pub fn moments(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.len() as f64;
        let mut mean = vec![0.0; self.dim];
        for p in self.iter() {
            for (m, v) in mean.iter_mut().zip(p) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; self.dim];
        for p in self.iter() {
            for ((s, v), m) in var.iter_mut().zip(p).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let sd = var.iter().map(|s| (s / (n - 1.0).max(1.0)).sqrt()).collect();
        (mean, sd)
    }
}

/// Latin hypercube sample of `n` points for independent marginals.
pub fn lhs_population(rvs: &[RandomVariable], n: usize, seed: u64) -> Result<CandidatePool> {
    let mut rng = seeded_rng(seed);
    let mut pool = lhs_with_rng(rvs, n, &mut rng, None)?;
    pool.seed = seed;
    Ok(pool)
}

/// Acceptance predicate for points that must lie inside an evaluator's domain.
pub type DomainCheck<'a> = &'a (dyn Fn(&[f64]) -> bool + Sync);

/// Latin hypercube sampling driven by a caller-owned generator.
///
/// Points rejected by `accept` are re-jittered inside their own strata, so the
/// one-point-per-stratum structure is kept.
pub fn lhs_with_rng(
    rvs: &[RandomVariable],
    n: usize,
    rng: &mut RunRng,
    accept: Option<DomainCheck<'_>>,
) -> Result<CandidatePool> {
    if n == 0 {
        return Err(Error::domain("population size must be at least 1"));
    }
    if rvs.is_empty() {
        return Err(Error::domain("at least one random variable is required"));
    }
    for rv in rvs {
        rv.validate()?;
    }
    let dim = rvs.len();
    let marginals: Vec<Marginal> = rvs.iter().map(RandomVariable::marginal).collect();
    let strata: Vec<Vec<usize>> = (0..dim)
        .map(|_| {
            let mut s: Vec<usize> = (0..n).collect();
            s.shuffle(rng);
            s
        })
        .collect();

    let mut data = vec![0.0; n * dim];
    let mut rejected = 0usize;
    for i in 0..n {
        loop {
            for d in 0..dim {
                let u = stratum_draw(strata[d][i], n, rng);
                data[i * dim + d] = rvs[d].quantile_unchecked(&marginals[d], u);
            }
            match accept {
                Some(ok) if !ok(&data[i * dim..(i + 1) * dim]) => {
                    rejected += 1;
                    if rejected > 1000 * n {
                        return Err(Error::domain("domain check rejects almost every draw"));
                    }
                }
                _ => break,
            }
        }
    }
    if rejected > 0 {
        log::warn!("rejected {rejected} LHS draws outside the evaluator domain");
    }
    Ok(CandidatePool { dim, data, seed: 0 })
}

fn stratum_draw(stratum: usize, n: usize, rng: &mut RunRng) -> f64 {
    let r: f64 = rng.random();
    ((stratum as f64 + r.max(f64::EPSILON)) / n as f64).min(1.0 - f64::EPSILON)
}

/// Independent draws from the joint input distribution.
pub fn iid_sample(
    rvs: &[RandomVariable],
    n: usize,
    rng: &mut RunRng,
    accept: Option<DomainCheck<'_>>,
) -> Result<(Vec<f64>, usize)> {
    for rv in rvs {
        rv.validate()?;
    }
    let dim = rvs.len();
    let marginals: Vec<Marginal> = rvs.iter().map(RandomVariable::marginal).collect();
    let mut data = vec![0.0; n * dim];
    let mut rejected = 0usize;
    for i in 0..n {
        loop {
            for d in 0..dim {
                let r: f64 = rng.random();
                let u = r.clamp(f64::EPSILON, 1.0 - f64::EPSILON);
                data[i * dim + d] = rvs[d].quantile_unchecked(&marginals[d], u);
            }
            match accept {
                Some(ok) if !ok(&data[i * dim..(i + 1) * dim]) => rejected += 1,
                _ => break,
            }
        }
    }
    Ok((data, rejected))
}

/// Monte Carlo failure probability: the mean of the failure indicators.
pub fn mcs_failure_probability(indicators: &[bool]) -> Result<f64> {
    if indicators.is_empty() {
        return Err(Error::domain("no indicators to average"));
    }
    let failures = indicators.iter().filter(|&&f| f).count();
    Ok(failures as f64 / indicators.len() as f64)
}

/// Coefficient of variation of a Monte Carlo failure-probability estimate.
///
/// `Ok(None)` when `pf_hat` is zero: the coefficient is undefined there.
pub fn cov_pf(pf_hat: f64, n_mcs: usize) -> Result<Option<f64>> {
    if !(0.0..=1.0).contains(&pf_hat) || n_mcs == 0 {
        return Err(Error::domain(format!("cov_pf needs pf_hat in [0,1] and n >= 1, got {pf_hat}, {n_mcs}")));
    }
    if pf_hat == 0.0 {
        return Ok(None);
    }
    Ok(Some(((1.0 - pf_hat) / (n_mcs as f64 * pf_hat)).sqrt()))
}
