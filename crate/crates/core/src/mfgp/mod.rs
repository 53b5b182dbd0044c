//! Multi-fidelity Gaussian-process metamodel.
//!
//! Every source `l` is modelled as `g(0, x) + delta_l(x)` with independent
//! zero-mean discrepancies `delta_l` (`delta_0 = 0`). The prior covariance
//! between `(l, x)` and `(l', x')` is therefore
//! `K_0(x, x') + [l == l' >= 1] K_l(x, x')`, with each `K` an anisotropic
//! squared-exponential kernel.
//!
//! Fitted models work internally in standardized coordinates (see
//! [`Scaling`]); all public prediction methods take and return physical
//! units.

mod fit;

pub use fit::{fit_mle, log_marginal_likelihood, FitConfig, LENGTHSCALE_BOUNDS};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

/// Relative floor under which a lookahead denominator carries no information.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Default relative nugget on the training covariance diagonal.
pub const DEFAULT_NUGGET: f64 = 1e-8;

/// One evaluated limit-state value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub level: usize,
    pub x: Vec<f64>,
    pub y: f64,
}

/// Squared-exponential kernel parameters of one level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelKernel {
    pub signal_variance: f64,
    pub lengthscales: Vec<f64>,
}

impl LevelKernel {
    #[inline]
    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        let mut r2 = 0.0;
        for ((u, v), l) in a.iter().zip(b).zip(&self.lengthscales) {
            let t = (u - v) / l;
            r2 += t * t;
        }
        self.signal_variance * (-0.5 * r2).exp()
    }
}

/// Constant mean, one kernel per level and the relative diagonal nugget.
///
/// `kernels[0]` is the high-fidelity kernel; `kernels[l]` for `l >= 1` is the
/// kernel of the level-`l` discrepancy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub mean: f64,
    pub kernels: Vec<LevelKernel>,
    pub nugget: f64,
}

impl Hyperparams {
    pub fn n_levels(&self) -> usize {
        self.kernels.len()
    }

    pub fn dim(&self) -> usize {
        self.kernels[0].lengthscales.len()
    }

    fn check_level(&self, level: usize) -> Result<()> {
        if level >= self.kernels.len() {
            return Err(Error::domain(format!("level {level} outside 0..{}", self.kernels.len())));
        }
        Ok(())
    }

    /// Prior variance of `g(level, x)`.
    #[inline]
    pub fn prior_variance(&self, level: usize) -> f64 {
        let s0 = self.kernels[0].signal_variance;
        if level == 0 {
            s0
        } else {
            s0 + self.kernels[level].signal_variance
        }
    }

    #[inline]
    fn cov_unchecked(&self, la: usize, a: &[f64], lb: usize, b: &[f64]) -> f64 {
        let mut c = self.kernels[0].eval(a, b);
        if la == lb && la >= 1 {
            c += self.kernels[la].eval(a, b);
        }
        c
    }
}

/// Prior covariance between `g(la, a)` and `g(lb, b)`.
pub fn prior_covariance(hp: &Hyperparams, (la, a): (usize, &[f64]), (lb, b): (usize, &[f64])) -> Result<f64> {
    hp.check_level(la)?;
    hp.check_level(lb)?;
    Ok(hp.cov_unchecked(la, a, lb, b))
}

/// Affine map between physical and standardized coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaling {
    pub x_shift: Vec<f64>,
    pub x_scale: Vec<f64>,
    pub y_scale: f64,
}

impl Scaling {
    pub fn identity(dim: usize) -> Self {
        Scaling { x_shift: vec![0.0; dim], x_scale: vec![1.0; dim], y_scale: 1.0 }
    }

    pub fn to_std(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.x_shift).zip(&self.x_scale).map(|((v, m), s)| (v - m) / s).collect()
    }

    fn to_std_into(&self, x: &[f64], out: &mut [f64]) {
        for (((o, v), m), s) in out.iter_mut().zip(x).zip(&self.x_shift).zip(&self.x_scale) {
            *o = (v - m) / s;
        }
    }
}

/// Posterior mean and variance of `g(l, x)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosteriorPrediction {
    pub mean: f64,
    pub variance: f64,
}

/// A multi-fidelity GP conditioned on a training set.
#[derive(Debug, Clone)]
pub struct MfGpModel {
    hp: Hyperparams,
    scaling: Scaling,
    records: Vec<TrainingRecord>,
    /// Standardized training inputs, row-major.
    xs: Vec<f64>,
    levels: Vec<usize>,
    chol: Cholesky<f64, Dyn>,
    l_inv: DMatrix<f64>,
    alpha: DVector<f64>,
}

fn check_records(records: &[TrainingRecord], n_levels: usize, dim: usize) -> Result<()> {
    if records.is_empty() {
        return Err(Error::domain("training set is empty"));
    }
    for r in records {
        if r.level >= n_levels {
            return Err(Error::domain(format!("record level {} outside 0..{n_levels}", r.level)));
        }
        if r.x.len() != dim {
            return Err(Error::domain(format!("record has dimension {}, expected {dim}", r.x.len())));
        }
        if !r.y.is_finite() || r.x.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("training record contains a non-finite value"));
        }
    }
    Ok(())
}

/// Training covariance with the relative nugget applied to its diagonal.
pub(crate) fn training_covariance(hp: &Hyperparams, xs: &[f64], levels: &[usize]) -> DMatrix<f64> {
    let n = levels.len();
    let d = hp.dim();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        let xi = &xs[i * d..(i + 1) * d];
        for j in 0..=i {
            let xj = &xs[j * d..(j + 1) * d];
            let v = hp.cov_unchecked(levels[i], xi, levels[j], xj);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
        k[(i, i)] += hp.nugget * hp.prior_variance(levels[i]);
    }
    k
}

pub(crate) fn cholesky_or_err(k: DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    match k.clone().cholesky() {
        Some(c) => Ok(c),
        None => {
            let min_eigenvalue = k.symmetric_eigenvalues().iter().cloned().fold(f64::INFINITY, f64::min);
            Err(Error::IllConditioned { min_eigenvalue })
        }
    }
}

impl MfGpModel {
    /// Conditions the prior given by `hp` on `records`.
    ///
    /// `hp` is interpreted in the standardized space defined by `scaling`;
    /// pass [`Scaling::identity`] to work directly in physical units.
    pub fn new(hp: Hyperparams, records: Vec<TrainingRecord>, scaling: Scaling) -> Result<Self> {
        let dim = hp.dim();
        if hp.kernels.iter().any(|k| {
            k.lengthscales.len() != dim || !(k.signal_variance > 0.0) || k.lengthscales.iter().any(|l| !(*l > 0.0))
        }) || !(hp.nugget >= 0.0)
        {
            return Err(Error::domain("invalid hyperparameters"));
        }
        if scaling.x_shift.len() != dim || scaling.x_scale.len() != dim || !(scaling.y_scale > 0.0) {
            return Err(Error::domain("scaling does not match input dimension"));
        }
        check_records(&records, hp.n_levels(), dim)?;

        let n = records.len();
        let mut xs = vec![0.0; n * dim];
        for (i, r) in records.iter().enumerate() {
            scaling.to_std_into(&r.x, &mut xs[i * dim..(i + 1) * dim]);
        }
        let levels: Vec<usize> = records.iter().map(|r| r.level).collect();
        let chol = cholesky_or_err(training_covariance(&hp, &xs, &levels))?;
        let resid = DVector::from_iterator(n, records.iter().map(|r| r.y / scaling.y_scale - hp.mean));
        let alpha = chol.solve(&resid);
        let l_inv = chol
            .l_dirty()
            .solve_lower_triangular(&DMatrix::identity(n, n))
            .ok_or(Error::IllConditioned { min_eigenvalue: 0.0 })?
            .lower_triangle();
        Ok(MfGpModel { hp, scaling, records, xs, levels, chol, l_inv, alpha })
    }

    pub fn hyperparams(&self) -> &Hyperparams {
        &self.hp
    }

    pub fn scaling(&self) -> &Scaling {
        &self.scaling
    }

    pub fn records(&self) -> &[TrainingRecord] {
        &self.records
    }

    pub fn n_levels(&self) -> usize {
        self.hp.n_levels()
    }

    pub fn dim(&self) -> usize {
        self.hp.dim()
    }

    fn train_x(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.xs[i * d..(i + 1) * d]
    }

    /// `k(X, (level, z))` for a standardized input `z`.
    fn cross_vector(&self, level: usize, z: &[f64]) -> DVector<f64> {
        DVector::from_iterator(
            self.levels.len(),
            (0..self.levels.len()).map(|i| self.hp.cov_unchecked(self.levels[i], self.train_x(i), level, z)),
        )
    }

    /// Posterior of `g(level, x)`.
    pub fn predict(&self, level: usize, x: &[f64]) -> Result<PosteriorPrediction> {
        self.hp.check_level(level)?;
        self.check_dim(x)?;
        let z = self.scaling.to_std(x);
        let k = self.cross_vector(level, &z);
        let mean = self.hp.mean + k.dot(&self.alpha);
        let v = self.whiten(k);
        let var = (self.hp.prior_variance(level) - v.norm_squared()).max(0.0);
        let ys = self.scaling.y_scale;
        Ok(PosteriorPrediction { mean: mean * ys, variance: var * ys * ys })
    }

    fn whiten(&self, k: DVector<f64>) -> DVector<f64> {
        let mut v = k;
        self.chol.l_dirty().solve_lower_triangular_unchecked_mut(&mut v);
        v
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::domain(format!("input has dimension {}, expected {}", x.len(), self.dim())));
        }
        Ok(())
    }

    /// Posterior covariance between `g(la, a)` and `g(lb, b)`.
    pub fn posterior_cross_cov(&self, (la, a): (usize, &[f64]), (lb, b): (usize, &[f64])) -> Result<f64> {
        self.hp.check_level(la)?;
        self.hp.check_level(lb)?;
        self.check_dim(a)?;
        self.check_dim(b)?;
        let za = self.scaling.to_std(a);
        let zb = self.scaling.to_std(b);
        let va = self.whiten(self.cross_vector(la, &za));
        let vb = self.whiten(self.cross_vector(lb, &zb));
        let c = self.hp.cov_unchecked(la, &za, lb, &zb) - va.dot(&vb);
        Ok(c * self.scaling.y_scale * self.scaling.y_scale)
    }

    /// Variance of the one-step-ahead posterior mean of `g(0, x)` induced by
    /// a future observation of source `level` at `x_next`.
    ///
    /// `Ok(None)` flags a degenerate candidate whose predictive variance is
    /// below [`VARIANCE_FLOOR`] relative to the level's prior variance.
    pub fn lookahead_variance(&self, x: &[f64], x_next: &[f64], level: usize) -> Result<Option<f64>> {
        self.hp.check_level(level)?;
        let cross = self.posterior_cross_cov((0, x), (level, x_next))?;
        let ys2 = self.scaling.y_scale * self.scaling.y_scale;
        let diag = self.posterior_cross_cov((level, x_next), (level, x_next))?.max(0.0) / ys2;
        let denom = diag + self.observation_noise(level);
        if denom < VARIANCE_FLOOR * self.hp.prior_variance(level) {
            return Ok(None);
        }
        let cross = cross / ys2;
        Ok(Some(cross * cross / denom * ys2))
    }

    /// High-fidelity posterior variance at `x` after a hypothetical
    /// observation of `level` at `x_next`, hyperparameters held fixed.
    pub fn future_variance(&self, x: &[f64], x_next: &[f64], level: usize) -> Result<Option<f64>> {
        let current = self.predict(0, x)?.variance;
        Ok(self.lookahead_variance(x, x_next, level)?.map(|bar| (current - bar).max(0.0)))
    }

    /// Noise variance (standardized units) a new observation at `level` carries.
    pub(crate) fn observation_noise(&self, level: usize) -> f64 {
        self.hp.nugget * self.hp.prior_variance(level)
    }

    // ---- batched internals, standardized units --------------------------

    /// Standardizes rows of a physical-space matrix (row-major `points`).
    pub(crate) fn standardize_rows(&self, points: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let mut out = vec![0.0; points.len()];
        for (src, dst) in points.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            self.scaling.to_std_into(src, dst);
        }
        out
    }

    /// `L^{-1} k(X, (level, z_j))` for standardized rows `zs`, as an `n x m` matrix.
    pub(crate) fn whitened_cross(&self, level: usize, zs: &[f64]) -> DMatrix<f64> {
        let d = self.dim();
        let m = zs.len() / d;
        let n = self.levels.len();
        let mut k = DMatrix::zeros(n, m);
        for (j, z) in zs.chunks_exact(d).enumerate() {
            for i in 0..n {
                k[(i, j)] = self.hp.cov_unchecked(self.levels[i], self.train_x(i), level, z);
            }
        }
        &self.l_inv * k
    }

    pub(crate) fn prior_variance_std(&self, level: usize) -> f64 {
        self.hp.prior_variance(level)
    }

    pub(crate) fn kernel0_std(&self, a: &[f64], b: &[f64]) -> f64 {
        self.hp.kernels[0].eval(a, b)
    }

    /// Level-0 posterior means and variances (physical units) over
    /// row-major `points`, evaluated in parallel blocks.
    pub fn predict_level0_batch(&self, points: &[f64]) -> (Vec<f64>, Vec<f64>) {
        const BLOCK: usize = 512;
        let d = self.dim();
        let m = points.len() / d;
        let mut out = vec![(0.0, 0.0); m];
        let ys = self.scaling.y_scale;
        let s0 = self.hp.prior_variance(0);
        par::for_each_chunk_mut(&mut out, BLOCK, |ci, chunk| {
            let start = ci * BLOCK;
            let zs = self.standardize_rows(&points[start * d..(start + chunk.len()) * d]);
            let n = self.levels.len();
            let mut k = DMatrix::zeros(n, chunk.len());
            for (j, z) in zs.chunks_exact(d).enumerate() {
                for i in 0..n {
                    k[(i, j)] = self.hp.cov_unchecked(self.levels[i], self.train_x(i), 0, z);
                }
            }
            let means = k.tr_mul(&self.alpha);
            let v = &self.l_inv * &k;
            for (j, slot) in chunk.iter_mut().enumerate() {
                let var = (s0 - v.column(j).norm_squared()).max(0.0);
                *slot = ((self.hp.mean + means[j]) * ys, var * ys * ys);
            }
        });
        out.into_iter().unzip()
    }
}
