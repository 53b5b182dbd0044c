//! Adaptive reliability loops: AMGPRA, mfEGRA and single-fidelity AK-MCS with EFF.
//!
//! Every loop shares one skeleton. A Latin hypercube pool doubles as the Monte
//! Carlo population and the candidate set; the surrogate is refitted after
//! each new evaluation; the loop stops once the pool's maximum EFF falls below
//! its threshold and the coefficient of variation of the failure-probability
//! estimate is small enough, enlarging the pool when it is not.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::benchmarks::MultiFidelityProblem;
use crate::error::{Error, Result};
use crate::learning::{eff, mfegra_select_source, scan_candidates, select_best, LearningFunctionKind, Subset};
use crate::mfgp::{fit_mle, FitConfig, Hyperparams, MfGpModel, TrainingRecord, DEFAULT_NUGGET, LENGTHSCALE_BOUNDS};
use crate::par;
use crate::probability::{cov_pf, lhs_with_rng, seeded_rng, CandidatePool, RunRng};

/// Largest nugget tried when a fit fails to factorize.
const MAX_NUGGET: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    Amgpra,
    Mfegra,
    AkmcsEff,
}

/// Named method as used in configurations: algorithm plus learning function.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Method {
    pub algorithm: Algorithm,
    pub lf: LearningFunctionKind,
}

impl Method {
    pub const AMGPRA_EFF: Method = Method { algorithm: Algorithm::Amgpra, lf: LearningFunctionKind::Eff };
    pub const AMGPRA_UM: Method = Method { algorithm: Algorithm::Amgpra, lf: LearningFunctionKind::Um };
    pub const MFEGRA: Method = Method { algorithm: Algorithm::Mfegra, lf: LearningFunctionKind::Eff };
    pub const AKMCS_EFF: Method = Method { algorithm: Algorithm::AkmcsEff, lf: LearningFunctionKind::Eff };
    pub const ALL: [Method; 4] = [Self::AMGPRA_EFF, Self::AMGPRA_UM, Self::MFEGRA, Self::AKMCS_EFF];

    pub fn name(&self) -> &'static str {
        match (self.algorithm, self.lf) {
            (Algorithm::Amgpra, LearningFunctionKind::Eff) => "amgpra-eff",
            (Algorithm::Amgpra, LearningFunctionKind::Um) => "amgpra-um",
            (Algorithm::Mfegra, _) => "mfegra",
            (Algorithm::AkmcsEff, _) => "akmcs-eff",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            Error::Config(format!("unknown method \"{s}\"; expected one of amgpra-eff, amgpra-um, mfegra, akmcs-eff"))
        })
    }
}

impl Serialize for Method {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Method {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopConfig {
    pub method: Method,
    /// Initial pool size.
    pub n_mcs: usize,
    /// Points added per pool enlargement.
    pub n_delta_s: usize,
    /// Number of top-scoring pool points entering the collective scan.
    pub n_c: usize,
    pub cov_threshold: f64,
    pub eff_threshold: f64,
    /// Cap on adaptive selections.
    pub max_iterations: usize,
    /// Cap on the pool size reached through enlargements.
    pub max_pool: usize,
    pub seed: u64,
    pub nugget: f64,
    /// Initial design size; `min(12, (D+1)(D+2)/2)` when unset.
    pub n_initial: Option<usize>,
    /// Likelihood-maximization restarts per fit.
    pub fit_restarts: usize,
    /// Upper lengthscale bound of the fit, standardized units.
    pub lengthscale_max: f64,
    /// Evaluate the true high-fidelity model on the final pool, for diagnostics.
    pub audit: bool,
}

impl Default for LoopConfig {
    fn default() -> Self {
        LoopConfig {
            method: Method::AMGPRA_EFF,
            n_mcs: 10_000,
            n_delta_s: 10_000,
            n_c: 1000,
            cov_threshold: 0.05,
            eff_threshold: 0.001,
            max_iterations: 300,
            max_pool: 2_000_000,
            seed: 0,
            nugget: DEFAULT_NUGGET,
            n_initial: None,
            fit_restarts: 10,
            lengthscale_max: LENGTHSCALE_BOUNDS.1,
            audit: false,
        }
    }
}

impl LoopConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(what.to_string()));
        if self.n_mcs == 0 || self.n_delta_s == 0 || self.n_c == 0 || self.fit_restarts == 0 {
            return bad("n_mcs, n_delta_s, n_c and fit_restarts must be at least 1");
        }
        if !(self.cov_threshold > 0.0) || !(self.eff_threshold > 0.0) {
            return bad("thresholds must be positive");
        }
        if !(self.nugget > 0.0 && self.nugget.is_finite()) {
            return bad("nugget must be positive");
        }
        if self.n_initial == Some(0) {
            return bad("n_initial must be at least 1");
        }
        if !(self.lengthscale_max > LENGTHSCALE_BOUNDS.0 && self.lengthscale_max.is_finite()) {
            return bad("lengthscale_max must be finite and above the lower lengthscale bound");
        }
        if self.max_pool < self.n_mcs {
            return bad("max_pool must be at least n_mcs");
        }
        Ok(())
    }
}

/// Default initial design size for an input dimension.
pub fn default_initial_size(dim: usize) -> usize {
    12.min((dim + 1) * (dim + 2) / 2)
}

/// True iff the largest EFF over a non-empty pool is strictly below `threshold`.
pub fn check_stop(eff_values: &[f64], threshold: f64) -> bool {
    !eff_values.is_empty() && eff_values.iter().all(|&v| v < threshold)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Converged,
    /// Stopping criterion met but no pool point is predicted to fail, even
    /// after one extra enlargement.
    NoFailuresObserved,
    MaxIterations,
    PoolLimit,
    /// No candidate could be scored (e.g. every mfEGRA information term is zero).
    NoAdmissibleCandidate,
}

/// One row of the run history. Row 0 is the state after the initial design;
/// row `i` follows the `i`-th selection and refit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub point_index: Option<usize>,
    pub level: Option<usize>,
    pub score: Option<f64>,
    pub pf_hat: f64,
    pub max_eff: f64,
    pub cost_cum: f64,
    pub evals: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityEstimate {
    pub pf_hat: f64,
    pub cov: Option<f64>,
    pub n_mcs_final: usize,
    pub total_cost: f64,
    pub evals: Vec<usize>,
    pub converged: bool,
    pub no_failures_observed: bool,
    pub termination: Termination,
    /// Failure fraction of the true high-fidelity model over the final pool,
    /// present when the run was audited.
    pub pf_pool_exact: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    pub problem: String,
    pub method: Method,
    pub seed: u64,
    pub costs: Vec<f64>,
    pub records: Vec<IterationRecord>,
    pub estimate: ReliabilityEstimate,
    pub training: Vec<TrainingRecord>,
}

/// AMGPRA with the learning function of `config.method`.
pub fn run_amgpra(problem: &MultiFidelityProblem, config: &LoopConfig) -> Result<RunHistory> {
    let mut cfg = config.clone();
    cfg.method.algorithm = Algorithm::Amgpra;
    run(problem, &cfg)
}

pub fn run_mfegra(problem: &MultiFidelityProblem, config: &LoopConfig) -> Result<RunHistory> {
    let mut cfg = config.clone();
    cfg.method = Method::MFEGRA;
    run(problem, &cfg)
}

/// Single-fidelity baseline on the high-fidelity source of `problem`.
pub fn run_akmcs_eff(problem: &MultiFidelityProblem, config: &LoopConfig) -> Result<RunHistory> {
    let mut cfg = config.clone();
    cfg.method = Method::AKMCS_EFF;
    run(problem, &cfg)
}

/// Runs the loop selected by `config.method`.
pub fn run(problem: &MultiFidelityProblem, config: &LoopConfig) -> Result<RunHistory> {
    config.validate()?;
    let problem = match config.method.algorithm {
        Algorithm::AkmcsEff => problem.level0_only(),
        _ => problem.clone(),
    };
    Run::start(&problem, config)?.execute()
}

struct Run<'a> {
    problem: &'a MultiFidelityProblem,
    config: &'a LoopConfig,
    rng: RunRng,
    pool: CandidatePool,
    means: Vec<f64>,
    vars: Vec<f64>,
    /// EFF of every pool point under the current model.
    effs: Vec<f64>,
    input_scaling: (Vec<f64>, Vec<f64>),
    records: Vec<TrainingRecord>,
    evaluated: HashSet<(usize, usize)>,
    counts: Vec<usize>,
    model: MfGpModel,
    history: Vec<IterationRecord>,
    n_fits: u64,
}

impl<'a> Run<'a> {
    fn start(problem: &'a MultiFidelityProblem, config: &'a LoopConfig) -> Result<Self> {
        let mut rng = seeded_rng(config.seed);
        let pool = lhs_with_rng(&problem.rvs, config.n_mcs, &mut rng, problem.domain_check())?;
        let input_scaling = pool.moments();
        let n_init = config.n_initial.unwrap_or_else(|| default_initial_size(problem.dim()));
        if n_init > pool.len() {
            return Err(Error::Config(format!("initial design of {n_init} exceeds the pool size {}", pool.len())));
        }
        let initial = index::sample(&mut rng, pool.len(), n_init).into_vec();

        let k = problem.n_levels();
        let mut records = Vec::with_capacity(n_init * k);
        let mut evaluated = HashSet::new();
        for &i in &initial {
            for level in 0..k {
                let x = pool.point(i).to_vec();
                let y = problem.sources[level].evaluate(&x);
                records.push(TrainingRecord { level, x, y });
                evaluated.insert((i, level));
            }
        }
        let model = fit_with_escalation(&records, k, config, &input_scaling, None, config.seed)?;
        let mut run = Run {
            problem,
            config,
            rng,
            pool,
            means: Vec::new(),
            vars: Vec::new(),
            effs: Vec::new(),
            input_scaling,
            records,
            evaluated,
            counts: vec![n_init; k],
            model,
            history: Vec::new(),
            n_fits: 1,
        };
        run.predict_all();
        let row = run.snapshot(0, None, None, None);
        run.history.push(row);
        Ok(run)
    }

    fn execute(mut self) -> Result<RunHistory> {
        let mut selections = 0usize;
        let mut zero_pf_enlarged = false;
        let termination = loop {
            if check_stop(&self.effs, self.config.eff_threshold) {
                let pf = self.pf_hat();
                if pf == 0.0 {
                    if zero_pf_enlarged {
                        break Termination::NoFailuresObserved;
                    }
                    zero_pf_enlarged = true;
                    if !self.enlarge()? {
                        break Termination::PoolLimit;
                    }
                    continue;
                }
                let cov = cov_pf(pf, self.pool.len())?.unwrap_or(f64::INFINITY);
                if cov < self.config.cov_threshold {
                    break Termination::Converged;
                }
                log::debug!("cov {cov:.4} with {} points; enlarging", self.pool.len());
                if !self.enlarge()? {
                    break Termination::PoolLimit;
                }
                continue;
            }
            if selections >= self.config.max_iterations {
                break Termination::MaxIterations;
            }
            let Some((point, level, score)) = self.select()? else {
                break Termination::NoAdmissibleCandidate;
            };
            selections += 1;
            self.add_evaluations(point, level);
            self.refit()?;
            self.predict_all();
            let row = self.snapshot(selections, Some(point), Some(level), Some(score));
            log::debug!(
                "{} it {selections}: point {point} level {level} score {score:.4e} pf {:.4e} max_eff {:.3e}",
                self.problem.name,
                row.pf_hat,
                row.max_eff
            );
            self.history.push(row);
        };

        let pf_hat = self.pf_hat();
        let estimate = ReliabilityEstimate {
            pf_hat,
            cov: cov_pf(pf_hat, self.pool.len())?,
            n_mcs_final: self.pool.len(),
            total_cost: self.total_cost(),
            evals: self.counts.clone(),
            converged: matches!(termination, Termination::Converged | Termination::NoFailuresObserved),
            no_failures_observed: pf_hat == 0.0,
            termination,
            pf_pool_exact: self.config.audit.then(|| self.exact_pool_pf()),
        };
        Ok(RunHistory {
            problem: self.problem.name.clone(),
            method: self.config.method,
            seed: self.config.seed,
            costs: self.problem.costs(),
            records: self.history,
            estimate,
            training: self.records,
        })
    }

    fn pf_hat(&self) -> f64 {
        self.means.iter().filter(|&&m| m <= 0.0).count() as f64 / self.means.len() as f64
    }

    fn exact_pool_pf(&self) -> f64 {
        let g = &self.problem.sources[0];
        let fails = par::map_range(self.pool.len(), |i| g.evaluate(self.pool.point(i)) <= 0.0);
        fails.iter().filter(|&&f| f).count() as f64 / fails.len() as f64
    }

    fn eff_of(means: &[f64], vars: &[f64]) -> Vec<f64> {
        par::map_range(means.len(), |i| eff(means[i], vars[i].sqrt()))
    }

    fn total_cost(&self) -> f64 {
        self.counts.iter().zip(&self.problem.sources).map(|(&n, s)| n as f64 * s.cost).sum()
    }

    fn snapshot(
        &self,
        iteration: usize,
        point: Option<usize>,
        level: Option<usize>,
        score: Option<f64>,
    ) -> IterationRecord {
        let max_eff = self.effs.iter().copied().fold(0.0, f64::max);
        IterationRecord {
            iteration,
            point_index: point,
            level,
            score,
            pf_hat: self.pf_hat(),
            max_eff,
            cost_cum: self.total_cost(),
            evals: self.counts.clone(),
        }
    }

    fn predict_all(&mut self) {
        let (m, v) = self.model.predict_level0_batch(self.pool.data());
        self.effs = Self::eff_of(&m, &v);
        self.means = m;
        self.vars = v;
    }

    /// Appends a fresh batch to the pool; `false` if the pool limit forbids it.
    fn enlarge(&mut self) -> Result<bool> {
        let n = self.config.n_delta_s.min(self.config.max_pool.saturating_sub(self.pool.len()));
        if n == 0 {
            return Ok(false);
        }
        let batch = lhs_with_rng(&self.problem.rvs, n, &mut self.rng, self.problem.domain_check())?;
        let (m, v) = self.model.predict_level0_batch(batch.data());
        self.effs.extend(Self::eff_of(&m, &v));
        self.pool.extend(&batch);
        self.means.extend(m);
        self.vars.extend(v);
        Ok(true)
    }

    fn select(&self) -> Result<Option<(usize, usize, f64)>> {
        let effs = &self.effs;
        match self.config.method.algorithm {
            Algorithm::Amgpra => self.select_amgpra(),
            Algorithm::Mfegra => {
                let Some(point) = argmax_admissible(effs, |i| !self.evaluated.contains(&(i, 0))) else {
                    return Ok(None);
                };
                let allowed = |l: usize| !self.evaluated.contains(&(point, l));
                let costs = self.problem.costs();
                let src = mfegra_select_source(
                    &self.model,
                    self.pool.point(point),
                    self.pool.data(),
                    effs,
                    &costs,
                    Some(point),
                    &allowed,
                )?;
                Ok(src.map(|l| (point, l, effs[point])))
            }
            Algorithm::AkmcsEff => {
                Ok(argmax_admissible(effs, |i| !self.evaluated.contains(&(i, 0))).map(|i| (i, 0, effs[i])))
            }
        }
    }

    fn select_amgpra(&self) -> Result<Option<(usize, usize, f64)>> {
        let lf = self.config.method.lf;
        let top = match lf {
            LearningFunctionKind::Eff => top_indices(&self.effs, self.config.n_c),
            _ => {
                let values = par::map_range(self.means.len(), |i| lf.value(self.means[i], self.vars[i]));
                top_indices(&values, self.config.n_c)
            }
        };
        let d = self.pool.dim();
        let mut points = Vec::with_capacity(top.len() * d);
        for &i in &top {
            points.extend_from_slice(self.pool.point(i));
        }
        let subset = Subset {
            dim: d,
            points,
            means: top.iter().map(|&i| self.means[i]).collect(),
            variances: top.iter().map(|&i| self.vars[i]).collect(),
        };
        let scores = scan_candidates(&self.model, &subset, &self.problem.costs(), lf, |c, l| {
            self.evaluated.contains(&(top[c], l))
        })?;
        Ok(select_best(&scores).map(|b| (top[b.point], b.level, b.score)))
    }

    /// Evaluates the selection. AMGPRA turns a high-fidelity selection into an
    /// evaluation at every level; sources already evaluated at the point are
    /// not repeated.
    fn add_evaluations(&mut self, point: usize, level: usize) {
        let levels: Vec<usize> = if level == 0 && self.config.method.algorithm == Algorithm::Amgpra {
            (0..self.problem.n_levels()).collect()
        } else {
            vec![level]
        };
        for l in levels {
            if !self.evaluated.insert((point, l)) {
                continue;
            }
            let x = self.pool.point(point).to_vec();
            let y = self.problem.sources[l].evaluate(&x);
            self.records.push(TrainingRecord { level: l, x, y });
            self.counts[l] += 1;
        }
    }

    fn refit(&mut self) -> Result<()> {
        let seed = self.config.seed ^ self.n_fits.wrapping_mul(0xD1B5_4A32_D192_ED03);
        self.n_fits += 1;
        self.model = fit_with_escalation(
            &self.records,
            self.problem.n_levels(),
            self.config,
            &self.input_scaling,
            Some(self.model.hyperparams()),
            seed,
        )?;
        Ok(())
    }
}

fn fit_with_escalation(
    records: &[TrainingRecord],
    n_levels: usize,
    config: &LoopConfig,
    input_scaling: &(Vec<f64>, Vec<f64>),
    warm_start: Option<&Hyperparams>,
    seed: u64,
) -> Result<MfGpModel> {
    let mut nugget = config.nugget;
    loop {
        let fit_cfg = FitConfig {
            restarts: config.fit_restarts,
            nugget,
            seed,
            warm_start: warm_start.cloned(),
            input_scaling: Some(input_scaling.clone()),
            lengthscale_bounds: (LENGTHSCALE_BOUNDS.0, config.lengthscale_max),
            ..FitConfig::default()
        };
        match fit_mle(records, n_levels, &fit_cfg) {
            Ok(m) => return Ok(m),
            Err(e) if nugget * 100.0 <= MAX_NUGGET * (1.0 + 1e-9) => {
                log::warn!("fit failed with nugget {nugget:e} ({e}); retrying with a larger nugget");
                nugget *= 100.0;
            }
            Err(e) => return Err(e),
        }
    }
}

/// Indices of the `k` largest values, ordered by value then index.
fn top_indices(values: &[f64], k: usize) -> Vec<usize> {
    let cmp = |a: &usize, b: &usize| values[*b].total_cmp(&values[*a]).then(a.cmp(b));
    let mut idx: Vec<usize> = (0..values.len()).collect();
    let k = k.min(idx.len());
    if k < idx.len() {
        idx.select_nth_unstable_by(k, cmp);
        idx.truncate(k);
    }
    idx.sort_unstable_by(cmp);
    idx
}

/// Lowest index attaining the maximum among admissible entries.
fn argmax_admissible(values: &[f64], admissible: impl Fn(usize) -> bool) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if admissible(i) && best.is_none_or(|b| v > values[b]) {
            best = Some(i);
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchmarks::{multimodal_2f, FidelitySource};
    use crate::probability::RandomVariable;

    fn small(method: Method, seed: u64) -> LoopConfig {
        LoopConfig {
            method,
            n_mcs: 2000,
            n_delta_s: 2000,
            n_c: 150,
            max_iterations: 6,
            seed,
            n_initial: Some(6),
            fit_restarts: 3,
            ..LoopConfig::default()
        }
    }

    #[test]
    fn check_stop_examples() {
        assert!(check_stop(&[0.0, 0.0], 0.001));
        assert!(!check_stop(&[0.0, 0.001], 0.001));
        assert!(check_stop(&[5e-4, 1e-5], 0.001));
        assert!(!check_stop(&[], 0.001));
    }

    #[test]
    fn method_names_roundtrip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
            let j = serde_json::to_string(&m).unwrap();
            assert_eq!(serde_json::from_str::<Method>(&j).unwrap(), m);
        }
        assert!("egra".parse::<Method>().is_err());
    }

    #[test]
    fn default_initial_sizes() {
        assert_eq!(default_initial_size(1), 3);
        assert_eq!(default_initial_size(2), 6);
        assert_eq!(default_initial_size(6), 12);
        assert_eq!(default_initial_size(10), 12);
    }

    #[test]
    fn top_indices_orders_ties_by_index() {
        let v = [0.5, 2.0, 0.5, 3.0, 0.5];
        assert_eq!(top_indices(&v, 3), vec![3, 1, 0]);
        assert_eq!(top_indices(&v, 10), vec![3, 1, 0, 2, 4]);
        assert_eq!(argmax_admissible(&v, |i| i != 3), Some(1));
        assert_eq!(argmax_admissible(&v, |_| false), None);
    }

    #[test]
    fn invalid_configs_rejected() {
        let p = multimodal_2f().unwrap();
        for cfg in [
            LoopConfig { n_c: 0, ..small(Method::AMGPRA_EFF, 0) },
            LoopConfig { eff_threshold: 0.0, ..small(Method::AMGPRA_EFF, 0) },
            LoopConfig { n_initial: Some(5000), ..small(Method::AMGPRA_EFF, 0) },
        ] {
            assert!(matches!(run(&p, &cfg), Err(Error::Config(_))));
        }
    }

    fn linear_problem(shift: f64) -> MultiFidelityProblem {
        let rvs = vec![RandomVariable::normal(0.0, 1.0).unwrap()];
        let sources = vec![
            FidelitySource::new(0, 1.0, move |x| shift + x[0]),
            FidelitySource::new(1, 0.1, move |x| shift + 0.9 * x[0]),
        ];
        MultiFidelityProblem::new("linear", rvs, sources).unwrap()
    }

    #[test]
    fn resolved_initial_model_stops_immediately() {
        let p = linear_problem(0.0);
        let cfg = LoopConfig { n_mcs: 1000, n_initial: Some(25), ..small(Method::AMGPRA_EFF, 3) };
        let h = run(&p, &cfg).unwrap();
        assert_eq!(h.records.len(), 1, "{:?}", h.records);
        assert_eq!(h.estimate.termination, Termination::Converged);
        assert_eq!(h.estimate.total_cost, 25.0 * 1.0 + 25.0 * 0.1);
        assert_eq!(h.estimate.evals, vec![25, 25]);
        assert!((h.estimate.pf_hat - 0.5).abs() < 0.05);
        assert_eq!(h.estimate.pf_pool_exact, None);
        let audited = run(&p, &LoopConfig { audit: true, ..cfg }).unwrap();
        assert_eq!(audited.estimate.pf_pool_exact, Some(audited.estimate.pf_hat));
    }

    #[test]
    fn no_failures_flagged_after_one_enlargement() {
        let p = linear_problem(20.0);
        let cfg = LoopConfig { n_mcs: 500, n_delta_s: 300, n_initial: Some(10), ..small(Method::AMGPRA_EFF, 1) };
        let h = run(&p, &cfg).unwrap();
        assert_eq!(h.estimate.termination, Termination::NoFailuresObserved);
        assert!(h.estimate.converged && h.estimate.no_failures_observed);
        assert_eq!(h.estimate.pf_hat, 0.0);
        assert_eq!(h.estimate.cov, None);
        assert_eq!(h.estimate.n_mcs_final, 800);
    }

    fn check_ledger(h: &RunHistory) {
        for w in h.records.windows(2) {
            assert!(w[1].cost_cum >= w[0].cost_cum);
            assert!(w[1].evals.iter().zip(&w[0].evals).all(|(a, b)| a >= b));
        }
        for r in &h.records {
            let cost: f64 = r.evals.iter().zip(&h.costs).map(|(&n, c)| n as f64 * c).sum();
            assert_eq!(cost, r.cost_cum);
        }
        let per_level: Vec<usize> =
            (0..h.costs.len()).map(|l| h.training.iter().filter(|t| t.level == l).count()).collect();
        assert_eq!(per_level, h.estimate.evals);
    }

    #[test]
    fn amgpra_is_deterministic_and_accounts_costs() {
        let p = multimodal_2f().unwrap();
        let cfg = small(Method::AMGPRA_EFF, 11);
        let a = run(&p, &cfg).unwrap();
        let b = run(&p, &cfg).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert!(a.records.len() > 1);
        check_ledger(&a);
        for w in a.records.windows(2) {
            let added: Vec<usize> = w[1].evals.iter().zip(&w[0].evals).map(|(x, y)| x - y).collect();
            match w[1].level {
                Some(0) => assert_eq!(added, vec![1, 1]),
                Some(1) => assert_eq!(added, vec![0, 1]),
                other => panic!("unexpected level {other:?}"),
            }
        }
    }

    #[test]
    fn max_iterations_guard() {
        let p = multimodal_2f().unwrap();
        let cfg = LoopConfig { max_iterations: 2, ..small(Method::AMGPRA_UM, 5) };
        let h = run(&p, &cfg).unwrap();
        assert_eq!(h.estimate.termination, Termination::MaxIterations);
        assert!(!h.estimate.converged);
        assert_eq!(h.records.len(), 3);
    }

    #[test]
    fn akmcs_uses_only_high_fidelity() {
        let p = multimodal_2f().unwrap();
        let h = run_akmcs_eff(&p, &small(Method::AMGPRA_EFF, 2)).unwrap();
        assert_eq!(h.method, Method::AKMCS_EFF);
        assert_eq!(h.costs, vec![1.0]);
        assert!(h.training.iter().all(|t| t.level == 0));
        assert!(h.records.iter().skip(1).all(|r| r.level == Some(0)));
        check_ledger(&h);
    }

    #[test]
    fn mfegra_adds_single_sources() {
        let p = multimodal_2f().unwrap();
        let h = run_mfegra(&p, &small(Method::AMGPRA_EFF, 4)).unwrap();
        check_ledger(&h);
        for w in h.records.windows(2) {
            let added: usize = w[1].evals.iter().zip(&w[0].evals).map(|(x, y)| x - y).sum();
            assert_eq!(added, 1);
        }
    }

    #[test]
    fn single_source_mfegra_selects_high_fidelity() {
        let p = multimodal_2f().unwrap().level0_only();
        let h = run_mfegra(&p, &small(Method::MFEGRA, 8)).unwrap();
        assert!(h.training.iter().all(|t| t.level == 0));
    }
}
