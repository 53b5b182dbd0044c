//! Analytic multi-fidelity limit states and a brute-force Monte Carlo reference.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::probability::{cov_pf, iid_sample, seeded_rng, RandomVariable};

pub type Evaluator = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
pub type Domain = Arc<dyn Fn(&[f64]) -> bool + Send + Sync>;

/// One information source of a problem. Level 0 is the high-fidelity model.
#[derive(Clone)]
pub struct FidelitySource {
    pub level: usize,
    pub cost: f64,
    eval: Evaluator,
}

impl FidelitySource {
    pub fn new(level: usize, cost: f64, f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        FidelitySource { level, cost, eval: Arc::new(f) }
    }

    pub fn evaluate(&self, x: &[f64]) -> f64 {
        (self.eval)(x)
    }
}

impl fmt::Debug for FidelitySource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FidelitySource").field("level", &self.level).field("cost", &self.cost).finish_non_exhaustive()
    }
}

#[derive(Clone)]
pub struct MultiFidelityProblem {
    pub name: String,
    pub rvs: Vec<RandomVariable>,
    pub sources: Vec<FidelitySource>,
    /// Published failure probability, for information only.
    pub reference_pf: Option<f64>,
    /// Identifies the level-0 limit state and inputs; problems sharing it share
    /// a Monte Carlo reference.
    pub reference_key: String,
    domain: Option<Domain>,
}

impl fmt::Debug for MultiFidelityProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MultiFidelityProblem")
            .field("name", &self.name)
            .field("rvs", &self.rvs)
            .field("sources", &self.sources)
            .field("reference_pf", &self.reference_pf)
            .finish_non_exhaustive()
    }
}

impl MultiFidelityProblem {
    pub fn new(name: impl Into<String>, rvs: Vec<RandomVariable>, sources: Vec<FidelitySource>) -> Result<Self> {
        let name = name.into();
        if rvs.is_empty() || sources.is_empty() {
            return Err(Error::domain("a problem needs inputs and at least one source"));
        }
        for (i, s) in sources.iter().enumerate() {
            if s.level != i {
                return Err(Error::domain("source levels must be contiguous from 0"));
            }
            if !(s.cost > 0.0 && s.cost.is_finite()) {
                return Err(Error::domain(format!("source {i} has non-positive cost {}", s.cost)));
            }
        }
        for rv in &rvs {
            rv.validate()?;
        }
        Ok(MultiFidelityProblem { reference_key: name.clone(), name, rvs, sources, reference_pf: None, domain: None })
    }

    pub fn with_domain(mut self, f: impl Fn(&[f64]) -> bool + Send + Sync + 'static) -> Self {
        self.domain = Some(Arc::new(f));
        self
    }

    pub fn dim(&self) -> usize {
        self.rvs.len()
    }

    pub fn n_levels(&self) -> usize {
        self.sources.len()
    }

    pub fn costs(&self) -> Vec<f64> {
        self.sources.iter().map(|s| s.cost).collect()
    }

    pub fn in_domain(&self, x: &[f64]) -> bool {
        self.domain.as_ref().is_none_or(|d| d(x))
    }

    pub fn domain_check(&self) -> Option<&(dyn Fn(&[f64]) -> bool + Sync)> {
        self.domain.as_deref().map(|d| d as &(dyn Fn(&[f64]) -> bool + Sync))
    }

    pub fn evaluate(&self, level: usize, x: &[f64]) -> Result<f64> {
        let src = self
            .sources
            .get(level)
            .ok_or_else(|| Error::domain(format!("level {level} not in problem {}", self.name)))?;
        if x.len() != self.dim() {
            return Err(Error::domain(format!("expected {} inputs, got {}", self.dim(), x.len())));
        }
        if !self.in_domain(x) {
            return Err(Error::domain(format!("input {x:?} outside the domain of {}", self.name)));
        }
        Ok(src.evaluate(x))
    }

    /// The same problem with only its high-fidelity source.
    pub fn level0_only(&self) -> Self {
        let mut p = self.clone();
        p.sources.truncate(1);
        p
    }
}

/// Multimodal limit state and its two low-fidelity variants.
pub fn multimodal(level: usize, x: &[f64]) -> f64 {
    let (x1, x2) = (x[0], x[1]);
    let g0 = 2.0 - (x1 * x1 + 4.0) * (x2 - 1.0) / 20.0 + (2.5 * x1).sin();
    match level {
        0 => g0,
        1 => g0 - (5.0 * x1 / 22.0 + 5.0 * x2 / 44.0 + 1.25).sin(),
        2 => g0 - (5.0 * x1 / 11.0 + 5.0 * x2 / 22.0 + 35.0 / 11.0).sin(),
        _ => panic!("multimodal has levels 0..=2, got {level}"),
    }
}

/// Undamped single-degree-of-freedom oscillator; `x = (k1, k2, m, r, t1, f1)`.
pub fn oscillator(level: usize, x: &[f64]) -> f64 {
    let (k1, k2, m, r, t1, f1) = (x[0], x[1], x[2], x[3], x[4], x[5]);
    let w0 = ((k1 + k2) / m).sqrt();
    let s = (0.5 * w0 * t1).sin();
    let g0 = 3.0 * r - (2.0 * f1 / (m * w0 * w0) * s).abs();
    match level {
        0 => g0,
        1 => g0 - s / 15.0,
        2 => g0 - 2.0 * s / 15.0,
        _ => panic!("oscillator has levels 0..=2, got {level}"),
    }
}

fn oscillator_domain(x: &[f64]) -> bool {
    x[2] > 0.0 && x[0] + x[1] > 0.0
}

const TENDIM_N: usize = 10;
const TENDIM_SD: f64 = 0.2;

/// Ten-dimensional linear limit state; level 1 scales the sum by `a`.
pub fn tendim(level: usize, x: &[f64], a: f64) -> f64 {
    let n = TENDIM_N as f64;
    let offset = n + 3.0 * TENDIM_SD * n.sqrt();
    let sum: f64 = x.iter().sum();
    match level {
        0 => offset - sum,
        1 => offset - a * sum,
        _ => panic!("tendim has levels 0..=1, got {level}"),
    }
}

pub const PROBLEM_NAMES: [&str; 4] = ["multimodal-2f", "multimodal-3f", "oscillator-3f", "tendim-2f"];

fn multimodal_problem(name: &str, costs: &[f64]) -> Result<MultiFidelityProblem> {
    let rvs = vec![RandomVariable::normal(1.5, 1.0)?, RandomVariable::normal(2.5, 1.0)?];
    let sources =
        costs.iter().enumerate().map(|(l, &c)| FidelitySource::new(l, c, move |x| multimodal(l, x))).collect();
    let mut p = MultiFidelityProblem::new(name, rvs, sources)?;
    p.reference_pf = Some(3.13e-2);
    p.reference_key = "multimodal".into();
    Ok(p)
}

pub fn multimodal_2f() -> Result<MultiFidelityProblem> {
    multimodal_problem("multimodal-2f", &[1.0, 0.1])
}

pub fn multimodal_3f() -> Result<MultiFidelityProblem> {
    multimodal_problem("multimodal-3f", &[1.0, 0.1, 0.01])
}

pub fn oscillator_3f() -> Result<MultiFidelityProblem> {
    let n = RandomVariable::normal;
    let rvs = vec![n(1.0, 0.1)?, n(0.1, 0.01)?, n(1.0, 0.05)?, n(0.65, 0.05)?, n(1.0, 0.2)?, n(1.0, 0.2)?];
    let sources = [1.0, 0.1, 0.01]
        .iter()
        .enumerate()
        .map(|(l, &c)| FidelitySource::new(l, c, move |x| oscillator(l, x)))
        .collect();
    let mut p = MultiFidelityProblem::new("oscillator-3f", rvs, sources)?.with_domain(oscillator_domain);
    p.reference_pf = Some(8.2e-4);
    p.reference_key = "oscillator".into();
    Ok(p)
}

/// Ten-dimensional problem with low-fidelity cost `c1` and accuracy `a`.
pub fn tendim_2f(c1: f64, a: f64) -> Result<MultiFidelityProblem> {
    if !(a > 0.0 && a <= 1.0) {
        return Err(Error::domain(format!("accuracy parameter must lie in (0, 1], got {a}")));
    }
    let rvs = vec![RandomVariable::lognormal(1.0, TENDIM_SD)?; TENDIM_N];
    let sources =
        vec![FidelitySource::new(0, 1.0, |x| tendim(0, x, 1.0)), FidelitySource::new(1, c1, move |x| tendim(1, x, a))];
    let mut p = MultiFidelityProblem::new("tendim-2f", rvs, sources)?;
    p.reference_pf = Some(2.73e-3);
    p.reference_key = "tendim".into();
    Ok(p)
}

/// Problem selection with optional overrides, as accepted by the configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpec {
    pub name: String,
    /// Per-level costs; level 0 must cost 1 for the published problems to keep
    /// their meaning, but any positive values are accepted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub costs: Option<Vec<f64>>,
    /// Accuracy parameter of `tendim-2f`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<f64>,
}

impl ProblemSpec {
    pub fn named(name: &str) -> Self {
        ProblemSpec { name: name.into(), costs: None, a: None }
    }

    pub fn build(&self) -> Result<MultiFidelityProblem> {
        let mut p = match self.name.as_str() {
            "multimodal-2f" => multimodal_2f()?,
            "multimodal-3f" => multimodal_3f()?,
            "oscillator-3f" => oscillator_3f()?,
            "tendim-2f" => {
                let c1 = self.costs.as_ref().and_then(|c| c.get(1).copied()).unwrap_or(0.05);
                tendim_2f(c1, self.a.unwrap_or(0.9))?
            }
            other => return Err(Error::Config(format!("unknown problem \"{other}\""))),
        };
        if self.a.is_some() && self.name != "tendim-2f" {
            return Err(Error::Config(format!("problem {} has no accuracy parameter", self.name)));
        }
        if let Some(costs) = &self.costs {
            if costs.len() != p.n_levels() {
                return Err(Error::Config(format!(
                    "problem {} has {} sources but {} costs were given",
                    self.name,
                    p.n_levels(),
                    costs.len()
                )));
            }
            for (s, &c) in p.sources.iter_mut().zip(costs) {
                if !(c > 0.0 && c.is_finite()) {
                    return Err(Error::Config(format!("costs must be positive, got {c}")));
                }
                s.cost = c;
            }
        }
        Ok(p)
    }
}

pub fn problem_by_name(name: &str) -> Result<MultiFidelityProblem> {
    ProblemSpec::named(name).build()
}

/// Result of a brute-force Monte Carlo run on the high-fidelity model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McsReference {
    pub pf: f64,
    /// `None` when no failure was observed.
    pub cov: Option<f64>,
    pub n: usize,
    pub failures: usize,
    pub rejected: usize,
}

const MCS_CHUNK: usize = 1 << 16;

/// Level-0 Monte Carlo estimate from `n` independent draws.
///
/// Draws are split into fixed-size chunks, each with its own generator stream,
/// so the result does not depend on the number of threads.
pub fn mcs_reference(problem: &MultiFidelityProblem, n: usize, seed: u64) -> Result<McsReference> {
    if n == 0 {
        return Err(Error::domain("reference sample size must be at least 1"));
    }
    let chunks = n.div_ceil(MCS_CHUNK);
    let src = &problem.sources[0];
    let results = par::map_range(chunks, |c| -> Result<(usize, usize)> {
        let len = MCS_CHUNK.min(n - c * MCS_CHUNK);
        let mut rng = seeded_rng(seed);
        rng.set_stream(c as u64);
        let (xs, rejected) = iid_sample(&problem.rvs, len, &mut rng, problem.domain_check())?;
        let failures = xs.chunks_exact(problem.dim()).filter(|x| src.evaluate(x) <= 0.0).count();
        Ok((failures, rejected))
    });
    let mut failures = 0;
    let mut rejected = 0;
    for r in results {
        let (f, rj) = r?;
        failures += f;
        rejected += rj;
    }
    if rejected > 0 {
        log::warn!("{}: redrew {rejected} reference samples outside the domain", problem.name);
    }
    let pf = failures as f64 / n as f64;
    Ok(McsReference { pf, cov: cov_pf(pf, n)?, n, failures, rejected })
}
