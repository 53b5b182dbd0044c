//! Batch experiments: configuration, repeated seeded trials, sweeps and result files.
//!
//! A configuration is a JSON object:
//!
//! ```json
//! {
//!   "problem": "multimodal-2f",
//!   "methods": ["amgpra-eff", "akmcs-eff"],
//!   "repetitions": 20,
//!   "seed": 42,
//!   "n_mcs": 10000,
//!   "n_delta_s": 10000,
//!   "n_c": 1000,
//!   "cov_threshold": 0.05,
//!   "eff_threshold": 0.001,
//!   "max_iterations": 300,
//!   "n_initial": 6,
//!   "reference_n": 1000000,
//!   "sweep": {"param": "c1", "values": [0.04, 0.05, 0.1]},
//!   "output_dir": "results/multimodal"
//! }
//! ```
//!
//! Only `problem` is required. `problem` may also be an object
//! `{"name": ..., "costs": [...], "a": ...}` overriding source costs or the
//! accuracy parameter. Unknown keys are rejected.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::active_loop::{run, IterationRecord, LoopConfig, Method, RunHistory};
use crate::benchmarks::{mcs_reference, McsReference, MultiFidelityProblem, ProblemSpec};
use crate::error::{Error, Result};
use crate::mfgp::DEFAULT_NUGGET;
use crate::par;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ProblemField {
    Name(String),
    Spec(ProblemSpec),
}

impl ProblemField {
    pub fn spec(&self) -> ProblemSpec {
        match self {
            ProblemField::Name(n) => ProblemSpec::named(n),
            ProblemField::Spec(s) => s.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepParam {
    /// Cost of the level-1 source.
    C1,
    /// Accuracy parameter of the ten-dimensional problem.
    A,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::C1 => "c1",
            SweepParam::A => "a",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub param: SweepParam,
    pub values: Vec<f64>,
}

fn d_methods() -> Vec<Method> {
    vec![Method::AMGPRA_EFF]
}
fn d_reps() -> usize {
    20
}
fn d_n_mcs() -> usize {
    10_000
}
fn d_n_c() -> usize {
    1000
}
fn d_cov() -> f64 {
    0.05
}
fn d_eff() -> f64 {
    0.001
}
fn d_max_iter() -> usize {
    LoopConfig::default().max_iterations
}
fn d_max_pool() -> usize {
    LoopConfig::default().max_pool
}
fn d_nugget() -> f64 {
    DEFAULT_NUGGET
}
fn d_restarts() -> usize {
    LoopConfig::default().fit_restarts
}
fn d_ls_max() -> f64 {
    LoopConfig::default().lengthscale_max
}
fn d_reference_n() -> usize {
    1_000_000
}
fn d_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemField,
    #[serde(default = "d_methods")]
    pub methods: Vec<Method>,
    #[serde(default = "d_reps")]
    pub repetitions: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_n_mcs")]
    pub n_mcs: usize,
    #[serde(default = "d_n_mcs")]
    pub n_delta_s: usize,
    #[serde(default = "d_n_c")]
    pub n_c: usize,
    #[serde(default = "d_cov")]
    pub cov_threshold: f64,
    #[serde(default = "d_eff")]
    pub eff_threshold: f64,
    #[serde(default = "d_max_iter")]
    pub max_iterations: usize,
    #[serde(default = "d_max_pool")]
    pub max_pool: usize,
    #[serde(default = "d_nugget")]
    pub nugget: f64,
    #[serde(default)]
    pub n_initial: Option<usize>,
    #[serde(default = "d_restarts")]
    pub fit_restarts: usize,
    #[serde(default = "d_ls_max")]
    pub lengthscale_max: f64,
    #[serde(default = "d_reference_n")]
    pub reference_n: usize,
    /// Seed of the reference Monte Carlo run; defaults to `seed`.
    #[serde(default)]
    pub reference_seed: Option<u64>,
    /// Also evaluate the true model on each final pool.
    #[serde(default = "d_true")]
    pub audit: bool,
    #[serde(default)]
    pub sweep: Option<Sweep>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

/// Parses and validates a configuration.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.repetitions == 0 {
            return Err(Error::Config("repetitions must be at least 1".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("at least one method is required".into()));
        }
        if self.reference_n == 0 {
            return Err(Error::Config("reference_n must be at least 1".into()));
        }
        if let Some(s) = &self.sweep {
            if s.values.is_empty() {
                return Err(Error::Config("sweep needs at least one value".into()));
            }
        }
        for (_, spec) in self.variants() {
            spec.build()?;
        }
        self.loop_config(Method::AMGPRA_EFF, self.seed).validate()
    }

    /// Problem variants, one per sweep value.
    pub fn variants(&self) -> Vec<(Option<f64>, ProblemSpec)> {
        let base = self.problem.spec();
        match &self.sweep {
            None => vec![(None, base)],
            Some(sw) => sw
                .values
                .iter()
                .map(|&v| {
                    let mut spec = base.clone();
                    match sw.param {
                        SweepParam::A => spec.a = Some(v),
                        SweepParam::C1 => {
                            let mut costs = match &spec.costs {
                                Some(c) => c.clone(),
                                None => spec.build().map(|p| p.costs()).unwrap_or_default(),
                            };
                            if costs.len() > 1 {
                                costs[1] = v;
                            } else {
                                costs = vec![1.0, v];
                            }
                            spec.costs = Some(costs);
                        }
                    }
                    (Some(v), spec)
                })
                .collect(),
        }
    }

    pub fn loop_config(&self, method: Method, seed: u64) -> LoopConfig {
        LoopConfig {
            method,
            n_mcs: self.n_mcs,
            n_delta_s: self.n_delta_s,
            n_c: self.n_c,
            cov_threshold: self.cov_threshold,
            eff_threshold: self.eff_threshold,
            max_iterations: self.max_iterations,
            max_pool: self.max_pool,
            seed,
            nugget: self.nugget,
            n_initial: self.n_initial,
            fit_restarts: self.fit_restarts,
            lengthscale_max: self.lengthscale_max,
            audit: self.audit,
        }
    }
}

/// One finished (or failed) trial.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunOutcome {
    pub problem: String,
    pub method: Method,
    pub sweep_value: Option<f64>,
    pub trial: usize,
    pub seed: u64,
    pub pf_ref: f64,
    /// `|pf_hat - pf_ref| / pf_ref`.
    pub relative_error: Option<f64>,
    /// Relative error against the true failure fraction of the final pool.
    pub pool_relative_error: Option<f64>,
    pub history: Option<RunHistory>,
    pub error: Option<String>,
}

impl RunOutcome {
    pub fn converged(&self) -> bool {
        self.history.as_ref().is_some_and(|h| h.estimate.converged)
    }

    /// Converged with at least one failure in the pool. A run that stops
    /// without ever observing a failure is degenerate and counts as failed.
    pub fn succeeded(&self) -> bool {
        self.history.as_ref().is_some_and(|h| h.estimate.converged && !h.estimate.no_failures_observed)
    }
}

/// Aggregate of one method on one problem variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRecord {
    pub problem: String,
    pub sweep_param: Option<String>,
    pub sweep_value: Option<f64>,
    pub method: Method,
    pub runs: usize,
    /// Runs that converged and observed at least one failure.
    pub converged: usize,
    pub failed: usize,
    pub failure_rate: f64,
    pub mean_cost: f64,
    pub mean_evals: Vec<f64>,
    pub mean_pf_hat: f64,
    pub pf_ref: f64,
    pub pf_ref_cov: Option<f64>,
    pub mean_rel_error_pct: f64,
    pub mean_pool_rel_error_pct: Option<f64>,
    pub mean_n_mcs_final: f64,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub runs: Vec<RunOutcome>,
    pub summaries: Vec<SummaryRecord>,
    pub references: Vec<(Option<f64>, McsReference)>,
}

impl ExperimentResult {
    pub fn all_succeeded(&self) -> bool {
        self.runs.iter().all(RunOutcome::succeeded)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Cache key of a reference run: level-0 identity, input distribution, size and seed.
pub fn reference_key(problem: &MultiFidelityProblem, n: usize, seed: u64) -> String {
    let rvs = serde_json::to_string(&problem.rvs).expect("random variables serialize");
    let digest = Sha256::digest(format!("{}|{rvs}|{n}|{seed}", problem.reference_key).as_bytes());
    hex(&digest[..12])
}

/// Reference Monte Carlo estimate, read from `cache_dir` when present.
pub fn cached_reference(
    problem: &MultiFidelityProblem,
    n: usize,
    seed: u64,
    cache_dir: Option<&Path>,
) -> Result<McsReference> {
    let path = cache_dir.map(|d| d.join(format!("{}-{}.json", problem.reference_key, reference_key(problem, n, seed))));
    if let Some(p) = &path {
        if let Ok(text) = fs::read_to_string(p) {
            if let Ok(r) = serde_json::from_str::<McsReference>(&text) {
                return Ok(r);
            }
            log::warn!("ignoring unreadable reference cache {}", p.display());
        }
    }
    let r = mcs_reference(problem, n, seed)?;
    if let Some(p) = &path {
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        }
        let text = serde_json::to_string_pretty(&r).expect("reference serializes");
        fs::write(p, text).map_err(|e| Error::io(format!("writing {}", p.display()), e))?;
    }
    Ok(r)
}

fn variant_label(problem: &str, param: Option<SweepParam>, value: Option<f64>) -> String {
    match (param, value) {
        (Some(p), Some(v)) => format!("{problem}_{}={v}", p.name()),
        _ => problem.to_string(),
    }
}

/// Runs every (variant, method, trial) combination, writes results under
/// `out` (when given) and returns them.
pub fn run_experiment(config: &ExperimentConfig, out: Option<&Path>) -> Result<ExperimentResult> {
    config.validate()?;
    let variants = config.variants();
    let ref_seed = config.reference_seed.unwrap_or(config.seed);
    let cache = out.map(|o| o.join("reference"));

    let mut problems = Vec::new();
    let mut references = Vec::new();
    for (value, spec) in &variants {
        let p = spec.build()?;
        let r = cached_reference(&p, config.reference_n, ref_seed, cache.as_deref())?;
        log::info!("{} reference pf {:.4e} (n = {})", p.name, r.pf, r.n);
        references.push((*value, r));
        problems.push(p);
    }

    let jobs: Vec<(usize, Method, usize)> = (0..variants.len())
        .flat_map(|v| config.methods.iter().flat_map(move |&m| (0..config.repetitions).map(move |t| (v, m, t))))
        .collect();

    let runs = par::map_slice(&jobs, |&(v, method, trial)| {
        let problem = &problems[v];
        let pf_ref = references[v].1.pf;
        let seed = config.seed.wrapping_add(trial as u64);
        let outcome = run(problem, &config.loop_config(method, seed));
        let (history, error) = match outcome {
            Ok(h) => (Some(h), None),
            Err(e) => {
                log::error!("{} {method} trial {trial} failed: {e}", problem.name);
                (None, Some(e.to_string()))
            }
        };
        let rel = |pf: f64, reference: f64| (reference > 0.0).then(|| (pf - reference).abs() / reference);
        let relative_error = history.as_ref().and_then(|h| rel(h.estimate.pf_hat, pf_ref));
        let pool_relative_error =
            history.as_ref().and_then(|h| h.estimate.pf_pool_exact.and_then(|e| rel(h.estimate.pf_hat, e)));
        if let Some(h) = &history {
            log::info!(
                "{} {method} trial {trial}: pf {:.4e} cost {:.3} evals {:?} {:?}",
                problem.name,
                h.estimate.pf_hat,
                h.estimate.total_cost,
                h.estimate.evals,
                h.estimate.termination
            );
        }
        RunOutcome {
            problem: problem.name.clone(),
            method,
            sweep_value: variants[v].0,
            trial,
            seed,
            pf_ref,
            relative_error,
            pool_relative_error,
            history,
            error,
        }
    });

    let param = config.sweep.as_ref().map(|s| s.param);
    let mut summaries = Vec::new();
    for (v, (value, _)) in variants.iter().enumerate() {
        for &method in &config.methods {
            let group: Vec<&RunOutcome> = runs
                .iter()
                .filter(|r| r.method == method && r.sweep_value == *value && r.problem == problems[v].name)
                .collect();
            summaries.push(summarize(&group, &problems[v], param, *value, method, &references[v].1));
        }
    }

    if let Some(dir) = out {
        write_outputs(dir, &runs, &summaries, param)?;
    }
    Ok(ExperimentResult { runs, summaries, references })
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

fn summarize(
    group: &[&RunOutcome],
    problem: &MultiFidelityProblem,
    param: Option<SweepParam>,
    value: Option<f64>,
    method: Method,
    reference: &McsReference,
) -> SummaryRecord {
    let ok: Vec<&RunHistory> = group.iter().filter(|r| r.succeeded()).filter_map(|r| r.history.as_ref()).collect();
    let ok_runs: Vec<&&RunOutcome> = group.iter().filter(|r| r.succeeded()).collect();
    let levels = ok.first().map_or(0, |h| h.estimate.evals.len());
    let pool_errors: Vec<f64> = ok_runs.iter().filter_map(|r| r.pool_relative_error).collect();
    SummaryRecord {
        problem: problem.name.clone(),
        sweep_param: param.map(|p| p.name().to_string()),
        sweep_value: value,
        method,
        runs: group.len(),
        converged: ok.len(),
        failed: group.len() - ok.len(),
        failure_rate: (group.len() - ok.len()) as f64 / group.len().max(1) as f64,
        mean_cost: mean(ok.iter().map(|h| h.estimate.total_cost)),
        mean_evals: (0..levels).map(|l| mean(ok.iter().map(|h| h.estimate.evals[l] as f64))).collect(),
        mean_pf_hat: mean(ok.iter().map(|h| h.estimate.pf_hat)),
        pf_ref: reference.pf,
        pf_ref_cov: reference.cov,
        mean_rel_error_pct: 100.0 * mean(ok_runs.iter().map(|r| r.relative_error.unwrap_or(f64::NAN))),
        mean_pool_rel_error_pct: (!pool_errors.is_empty() && pool_errors.len() == ok_runs.len())
            .then(|| 100.0 * mean(pool_errors.iter().copied())),
        mean_n_mcs_final: mean(ok.iter().map(|h| h.estimate.n_mcs_final as f64)),
    }
}

/// Float with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        v.to_string()
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(format!("writing {}", path.display()), io),
        other => Error::Parse { path: path.display().to_string(), message: format!("{other:?}") },
    }
}

/// Writes one history row per iteration.
pub fn write_history(history: &RunHistory, path: &Path) -> Result<()> {
    let levels = history.costs.len();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header: Vec<String> = ["iteration", "point_index", "level", "score", "pf_hat", "max_eff", "cost_cum"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((0..levels).map(|l| format!("evals_l{l}")));
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for r in &history.records {
        let mut row = vec![
            r.iteration.to_string(),
            r.point_index.map(|v| v.to_string()).unwrap_or_default(),
            r.level.map(|v| v.to_string()).unwrap_or_default(),
            fmt_opt(r.score),
            fmt_f64(r.pf_hat),
            fmt_f64(r.max_eff),
            fmt_f64(r.cost_cum),
        ];
        row.extend(r.evals.iter().map(|e| e.to_string()));
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Reads a file written by [`write_history`].
pub fn read_history(path: &Path) -> Result<Vec<IterationRecord>> {
    let bad = |message: String| Error::Parse { path: path.display().to_string(), message };
    let mut rd = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = rd.headers().map_err(|e| csv_err(path, e))?.clone();
    let fixed = ["iteration", "point_index", "level", "score", "pf_hat", "max_eff", "cost_cum"];
    if header.len() < fixed.len() || header.iter().zip(fixed).any(|(a, b)| a != b) {
        return Err(bad(format!("unexpected header {header:?}")));
    }
    let levels = header.len() - fixed.len();
    for l in 0..levels {
        if header[fixed.len() + l] != format!("evals_l{l}") {
            return Err(bad(format!("unexpected header {header:?}")));
        }
    }
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let f = |i: usize| -> Result<f64> { rec[i].parse().map_err(|e| bad(format!("field {}: {e}", fixed[i]))) };
        let opt_usize = |i: usize| -> Result<Option<usize>> {
            if rec[i].is_empty() {
                Ok(None)
            } else {
                rec[i].parse().map(Some).map_err(|e| bad(format!("field {}: {e}", fixed[i])))
            }
        };
        out.push(IterationRecord {
            iteration: rec[0].parse().map_err(|e| bad(format!("iteration: {e}")))?,
            point_index: opt_usize(1)?,
            level: opt_usize(2)?,
            score: if rec[3].is_empty() { None } else { Some(f(3)?) },
            pf_hat: f(4)?,
            max_eff: f(5)?,
            cost_cum: f(6)?,
            evals: (0..levels)
                .map(|l| rec[fixed.len() + l].parse().map_err(|e| bad(format!("evals_l{l}: {e}"))))
                .collect::<Result<_>>()?,
        });
    }
    Ok(out)
}

/// Writes the summary CSV.
pub fn write_summary(summaries: &[SummaryRecord], path: &Path) -> Result<()> {
    let levels = summaries.iter().map(|s| s.mean_evals.len()).max().unwrap_or(0);
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header: Vec<String> =
        ["problem", "sweep_param", "sweep_value", "method", "runs", "converged", "failed", "failure_rate", "mean_cost"]
            .iter()
            .map(|s| s.to_string())
            .collect();
    header.extend((0..levels).map(|l| format!("mean_evals_l{l}")));
    header.extend(
        ["mean_pf_hat", "pf_ref", "pf_ref_cov", "mean_rel_error_pct", "mean_pool_rel_error_pct", "mean_n_mcs_final"]
            .iter()
            .map(|s| s.to_string()),
    );
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for s in summaries {
        let mut row = vec![
            s.problem.clone(),
            s.sweep_param.clone().unwrap_or_default(),
            fmt_opt(s.sweep_value),
            s.method.to_string(),
            s.runs.to_string(),
            s.converged.to_string(),
            s.failed.to_string(),
            fmt_f64(s.failure_rate),
            fmt_f64(s.mean_cost),
        ];
        row.extend((0..levels).map(|l| fmt_opt(s.mean_evals.get(l).copied())));
        row.extend([
            fmt_f64(s.mean_pf_hat),
            fmt_f64(s.pf_ref),
            fmt_opt(s.pf_ref_cov),
            fmt_f64(s.mean_rel_error_pct),
            fmt_opt(s.mean_pool_rel_error_pct),
            fmt_f64(s.mean_n_mcs_final),
        ]);
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn write_outputs(
    dir: &Path,
    runs: &[RunOutcome],
    summaries: &[SummaryRecord],
    param: Option<SweepParam>,
) -> Result<()> {
    for r in runs {
        let sub = dir.join(variant_label(&r.problem, param, r.sweep_value)).join(r.method.name());
        fs::create_dir_all(&sub).map_err(|e| Error::io(format!("creating {}", sub.display()), e))?;
        let json = sub.join(format!("run_{:03}.json", r.trial));
        let text = serde_json::to_string_pretty(r).expect("run record serializes");
        fs::write(&json, text).map_err(|e| Error::io(format!("writing {}", json.display()), e))?;
        if let Some(h) = &r.history {
            write_history(h, &sub.join(format!("history_{:03}.csv", r.trial)))?;
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    write_summary(summaries, &dir.join("summary.csv"))
}
