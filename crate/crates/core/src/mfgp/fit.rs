//! Maximum-likelihood hyperparameter fitting.
//!
//! The constant mean and the high-fidelity signal variance have closed-form
//! maximizers for fixed correlation parameters, so the local search runs over
//! the remaining parameters only: log-lengthscales of every level and the
//! log variance ratio `sigma_l^2 / sigma_0^2` of every discrepancy. Each
//! parameter is kept inside its box through a logistic reparameterization.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use super::{
    check_records, cholesky_or_err, training_covariance, Hyperparams, LevelKernel, MfGpModel, Scaling, TrainingRecord,
};
use crate::error::{Error, Result};
use crate::optim::{self, LbfgsOptions};
use crate::par;
use crate::probability::seeded_rng;

/// Default lengthscale box in standardized input units.
pub const LENGTHSCALE_BOUNDS: (f64, f64) = (1e-2, 1e2);
const VARIANCE_BOUNDS: (f64, f64) = (1e-6, 1e6);

/// Gaussian log-density of the training responses under the prior `hp`.
///
/// Works in whatever coordinates the records are given in.
pub fn log_marginal_likelihood(hp: &Hyperparams, records: &[TrainingRecord]) -> Result<f64> {
    check_records(records, hp.n_levels(), hp.dim())?;
    let n = records.len();
    let xs: Vec<f64> = records.iter().flat_map(|r| r.x.iter().copied()).collect();
    let levels: Vec<usize> = records.iter().map(|r| r.level).collect();
    let chol = cholesky_or_err(training_covariance(hp, &xs, &levels))?;
    let r = DVector::from_iterator(n, records.iter().map(|r| r.y - hp.mean));
    let alpha = chol.solve(&r);
    let logdet: f64 = chol.l_dirty().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
    Ok(-0.5 * r.dot(&alpha) - 0.5 * logdet - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln())
}

/// Settings for [`fit_mle`].
#[derive(Debug, Clone)]
pub struct FitConfig {
    /// Number of local searches; the first starts from `warm_start` when given.
    pub restarts: usize,
    pub nugget: f64,
    pub seed: u64,
    pub max_iterations: usize,
    /// Previous optimum, in the standardized space of a previous fit.
    pub warm_start: Option<Hyperparams>,
    /// Per-dimension `(shift, scale)` for input standardization; identity if `None`.
    pub input_scaling: Option<(Vec<f64>, Vec<f64>)>,
    /// Box for every lengthscale, standardized units.
    pub lengthscale_bounds: (f64, f64),
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            restarts: 10,
            nugget: super::DEFAULT_NUGGET,
            seed: 0,
            max_iterations: 150,
            warm_start: None,
            input_scaling: None,
            lengthscale_bounds: LENGTHSCALE_BOUNDS,
        }
    }
}

struct Problem {
    n: usize,
    dim: usize,
    n_levels: usize,
    levels: Vec<usize>,
    y: DVector<f64>,
    /// `sqd[d][i * n + j]` = squared difference of standardized inputs in dimension d.
    sqd: Vec<Vec<f64>>,
    nugget: f64,
    lo: Vec<f64>,
    hi: Vec<f64>,
}

struct Evaluation {
    lml: f64,
    grad: Vec<f64>,
    mean: f64,
    sigma2: f64,
}

impl Problem {
    fn n_params(&self) -> usize {
        self.dim + (self.n_levels - 1) * (self.dim + 1)
    }

    /// Offset of level `l`'s block: `[ln rho_l, ln ell_l...]` for l >= 1.
    fn block(&self, l: usize) -> usize {
        self.dim + (l - 1) * (self.dim + 1)
    }

    fn unit_kernel(&self, log_ls: &[f64]) -> Vec<f64> {
        let n = self.n;
        let inv2: Vec<f64> = log_ls.iter().map(|l| (-2.0 * l).exp()).collect();
        let mut e = vec![0.0; n * n];
        for i in 0..n {
            e[i * n + i] = 1.0;
            for j in 0..i {
                let r2: f64 = (0..self.dim).map(|d| self.sqd[d][i * n + j] * inv2[d]).sum();
                let v = (-0.5 * r2).exp();
                e[i * n + j] = v;
                e[j * n + i] = v;
            }
        }
        e
    }

    fn evaluate(&self, theta: &[f64]) -> Option<Evaluation> {
        let n = self.n;
        let e0 = self.unit_kernel(&theta[..self.dim]);
        let mut disc: Vec<(f64, Vec<f64>)> = Vec::with_capacity(self.n_levels - 1);
        for l in 1..self.n_levels {
            let b = self.block(l);
            disc.push((theta[b].exp(), self.unit_kernel(&theta[b + 1..b + 1 + self.dim])));
        }
        let same = |i: usize, j: usize| -> Option<usize> {
            let l = self.levels[i];
            (l >= 1 && l == self.levels[j]).then_some(l)
        };

        let mut r = DMatrix::from_fn(n, n, |i, j| {
            let mut v = e0[i * n + j];
            if let Some(l) = same(i, j) {
                v += disc[l - 1].0 * disc[l - 1].1[i * n + j];
            }
            v
        });
        for i in 0..n {
            let rho = if self.levels[i] >= 1 { disc[self.levels[i] - 1].0 } else { 0.0 };
            r[(i, i)] += self.nugget * (1.0 + rho);
        }
        let chol = r.cholesky()?;
        let rinv = chol.inverse();
        let ones = DVector::from_element(n, 1.0);
        let a = &rinv * &ones;
        let b = &rinv * &self.y;
        let mean = b.sum() / a.sum();
        let alpha = b - &a * mean;
        let resid = &self.y - &ones * mean;
        let sigma2 = resid.dot(&alpha) / n as f64;
        if !(sigma2 > 0.0) || !sigma2.is_finite() {
            return None;
        }
        let logdet: f64 = chol.l_dirty().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
        let lml = -0.5 * n as f64 * ((2.0 * std::f64::consts::PI * sigma2).ln() + 1.0) - 0.5 * logdet;

        // W = alpha alpha^T / sigma2 - R^{-1}; d lml = 1/2 tr(W dR)
        let w = |i: usize, j: usize| alpha[i] * alpha[j] / sigma2 - rinv[(i, j)];
        let mut grad = vec![0.0; self.n_params()];
        let inv2_0: Vec<f64> = theta[..self.dim].iter().map(|l| (-2.0 * l).exp()).collect();
        let inv2_l: Vec<Vec<f64>> = (1..self.n_levels)
            .map(|l| {
                let b = self.block(l);
                theta[b + 1..b + 1 + self.dim].iter().map(|v| (-2.0 * v).exp()).collect()
            })
            .collect();
        for i in 0..n {
            for j in 0..i {
                let wij = 2.0 * w(i, j);
                let k0 = e0[i * n + j];
                for d in 0..self.dim {
                    grad[d] += 0.5 * wij * k0 * self.sqd[d][i * n + j] * inv2_0[d];
                }
                if let Some(l) = same(i, j) {
                    let (rho, ref el) = disc[l - 1];
                    let kl = rho * el[i * n + j];
                    let b = self.block(l);
                    grad[b] += 0.5 * wij * kl;
                    for d in 0..self.dim {
                        grad[b + 1 + d] += 0.5 * wij * kl * self.sqd[d][i * n + j] * inv2_l[l - 1][d];
                    }
                }
            }
            let l = self.levels[i];
            if l >= 1 {
                let rho = disc[l - 1].0;
                grad[self.block(l)] += 0.5 * w(i, i) * rho * (1.0 + self.nugget);
            }
        }
        Some(Evaluation { lml, grad, mean, sigma2 })
    }

    fn to_theta(&self, z: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut theta = Vec::with_capacity(z.len());
        let mut jac = Vec::with_capacity(z.len());
        for ((zi, lo), hi) in z.iter().zip(&self.lo).zip(&self.hi) {
            let s = 1.0 / (1.0 + (-zi).exp());
            theta.push(lo + (hi - lo) * s);
            jac.push((hi - lo) * s * (1.0 - s));
        }
        (theta, jac)
    }

    fn to_z(&self, theta: &[f64]) -> Vec<f64> {
        theta
            .iter()
            .zip(&self.lo)
            .zip(&self.hi)
            .map(|((t, lo), hi)| {
                let s = ((t - lo) / (hi - lo)).clamp(1e-6, 1.0 - 1e-6);
                (s / (1.0 - s)).ln()
            })
            .collect()
    }

    fn local_search(&self, theta0: &[f64], max_iterations: usize) -> Option<(Vec<f64>, f64)> {
        let objective = |z: &[f64]| {
            let (theta, jac) = self.to_theta(z);
            let ev = self.evaluate(&theta)?;
            let g = ev.grad.iter().zip(&jac).map(|(g, j)| -g * j).collect();
            Some((-ev.lml, g))
        };
        let opts = LbfgsOptions { max_iterations, grad_tol: 1e-7, ..Default::default() };
        let m = optim::minimize(objective, self.to_z(theta0), opts)?;
        log::trace!("local search: lml {:.6} after {} iterations", -m.f, m.iterations);
        Some((self.to_theta(&m.x).0, -m.f))
    }

    fn theta_from_hyperparams(&self, hp: &Hyperparams) -> Option<Vec<f64>> {
        if hp.n_levels() != self.n_levels || hp.dim() != self.dim {
            return None;
        }
        let mut theta = vec![0.0; self.n_params()];
        for d in 0..self.dim {
            theta[d] = hp.kernels[0].lengthscales[d].ln();
        }
        let s0 = hp.kernels[0].signal_variance;
        for l in 1..self.n_levels {
            let b = self.block(l);
            theta[b] = (hp.kernels[l].signal_variance / s0).ln();
            for d in 0..self.dim {
                theta[b + 1 + d] = hp.kernels[l].lengthscales[d].ln();
            }
        }
        Some(theta)
    }

    fn default_theta(&self) -> Vec<f64> {
        let mut theta = vec![0.0; self.n_params()];
        for l in 1..self.n_levels {
            theta[self.block(l)] = 0.1f64.ln();
        }
        theta
    }

    fn random_theta(&self, seed: u64) -> Vec<f64> {
        let mut rng = seeded_rng(seed);
        let mut theta = vec![0.0; self.n_params()];
        for d in 0..self.dim {
            theta[d] = rng.random_range(0.1f64.ln()..10f64.ln());
        }
        for l in 1..self.n_levels {
            let b = self.block(l);
            theta[b] = rng.random_range(1e-3f64.ln()..1f64.ln());
            for d in 0..self.dim {
                theta[b + 1 + d] = rng.random_range(0.1f64.ln()..10f64.ln());
            }
        }
        theta
    }
}

/// Fits constant mean, signal variances and lengthscales by maximizing the
/// marginal likelihood with multi-start local search.
///
/// `n_levels` is the number of sources the model covers (k + 1); levels
/// without records keep the hyperparameters the search leaves them at.
pub fn fit_mle(records: &[TrainingRecord], n_levels: usize, config: &FitConfig) -> Result<MfGpModel> {
    if n_levels == 0 {
        return Err(Error::domain("at least one level is required"));
    }
    let dim = records.first().map_or(0, |r| r.x.len());
    check_records(records, n_levels, dim)?;
    if records.len() < 2 || !records.iter().any(|r| r.level == 0) {
        return Err(Error::domain("fitting needs at least two records including one high-fidelity record"));
    }
    if config.restarts == 0 {
        return Err(Error::domain("at least one restart is required"));
    }

    let (x_shift, x_scale) = config.input_scaling.clone().unwrap_or_else(|| (vec![0.0; dim], vec![1.0; dim]));
    let y0: Vec<f64> = records.iter().filter(|r| r.level == 0).map(|r| r.y).collect();
    let y_scale = sample_std(&y0).filter(|s| *s > 0.0).unwrap_or(1.0);
    let scaling = Scaling { x_shift, x_scale, y_scale };

    let n = records.len();
    let zs: Vec<Vec<f64>> = records.iter().map(|r| scaling.to_std(&r.x)).collect();
    let mut sqd = vec![vec![0.0; n * n]; dim];
    for i in 0..n {
        for j in 0..n {
            for d in 0..dim {
                let t = zs[i][d] - zs[j][d];
                sqd[d][i * n + j] = t * t;
            }
        }
    }
    let mut problem = Problem {
        n,
        dim,
        n_levels,
        levels: records.iter().map(|r| r.level).collect(),
        y: DVector::from_iterator(n, records.iter().map(|r| r.y / y_scale)),
        sqd,
        nugget: config.nugget,
        lo: Vec::new(),
        hi: Vec::new(),
    };
    let (ls_lo, ls_hi) = config.lengthscale_bounds;
    if !(ls_lo > 0.0 && ls_lo < ls_hi && ls_hi.is_finite()) {
        return Err(Error::domain(format!("invalid lengthscale bounds ({ls_lo}, {ls_hi})")));
    }
    let ls = (ls_lo.ln(), ls_hi.ln());
    let ratio = (VARIANCE_BOUNDS.0.ln(), VARIANCE_BOUNDS.1.ln());
    for p in 0..problem.n_params() {
        let is_ratio = p >= dim && (p - dim).is_multiple_of(dim + 1);
        let (lo, hi) = if is_ratio { ratio } else { ls };
        problem.lo.push(lo);
        problem.hi.push(hi);
    }

    let starts: Vec<Vec<f64>> = (0..config.restarts)
        .map(|r| {
            if r == 0 {
                config
                    .warm_start
                    .as_ref()
                    .and_then(|hp| problem.theta_from_hyperparams(hp))
                    .unwrap_or_else(|| problem.default_theta())
            } else {
                problem.random_theta(config.seed.wrapping_add((r as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)))
            }
        })
        .collect();

    let results = par::map_slice(&starts, |t0| problem.local_search(t0, config.max_iterations));
    let best = results
        .into_iter()
        .flatten()
        .filter(|(_, lml)| lml.is_finite())
        .fold(None::<(Vec<f64>, f64)>, |acc, cand| match acc {
            Some(a) if a.1 >= cand.1 => Some(a),
            _ => Some(cand),
        })
        .ok_or_else(|| Error::Fit(format!("all {} restarts failed to factorize", config.restarts)))?;

    let ev = problem.evaluate(&best.0).ok_or_else(|| Error::Fit("optimum could not be re-evaluated".into()))?;
    let s0 = ev.sigma2.clamp(VARIANCE_BOUNDS.0, VARIANCE_BOUNDS.1);
    let mut kernels =
        vec![LevelKernel { signal_variance: s0, lengthscales: best.0[..dim].iter().map(|v| v.exp()).collect() }];
    for l in 1..n_levels {
        let b = problem.block(l);
        kernels.push(LevelKernel {
            signal_variance: (best.0[b].exp() * ev.sigma2).clamp(VARIANCE_BOUNDS.0, VARIANCE_BOUNDS.1),
            lengthscales: best.0[b + 1..b + 1 + dim].iter().map(|v| v.exp()).collect(),
        });
    }
    let hp = Hyperparams { mean: ev.mean, kernels, nugget: config.nugget };
    MfGpModel::new(hp, records.to_vec(), scaling)
}

fn sample_std(v: &[f64]) -> Option<f64> {
    if v.len() < 2 {
        return None;
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let ss: f64 = v.iter().map(|x| (x - m) * (x - m)).sum();
    Some((ss / (v.len() - 1) as f64).sqrt())
}
