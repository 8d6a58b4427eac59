//! Config-driven experiment runner: replicated ART runs, the true-score
//! baseline and the idealized harness, written out as CSV.

pub mod baseline;
pub mod idealized;
pub mod metrics;

use std::fs;
use std::path::{Path, PathBuf};

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::driver::{run_art, ArtConfig, RunResult, WeightedSample};
use crate::error::{ArtError, Result};
use crate::models::{ProblemSpec, PsiModel, ReferenceDistribution, StatePoint, TrueModel};
use crate::quadrature;
use crate::smc::stream;
use crate::surrogate::fmt17;

use baseline::{baseline_adaptive_smc, BaselineConfig, BaselineResult};
use metrics::{ks_distance, mean_and_se, relative_sq_error, EmpiricalCdf};

pub const METRICS_HEADER: [&str; 8] = [
    "estimator",
    "N",
    "expected_cost",
    "metric_name",
    "metric_value",
    "replicates",
    "mean_estimate",
    "std_error",
];

pub const REPLICATES_HEADER: [&str; 9] = [
    "estimator",
    "N",
    "replicate",
    "seed",
    "status",
    "estimate",
    "metric_value",
    "true_evals",
    "reduced_evals",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Art,
    Baseline,
    Idealized,
}

impl Mode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "art" => Ok(Mode::Art),
            "baseline" => Ok(Mode::Baseline),
            "idealized" => Ok(Mode::Idealized),
            other => Err(ArtError::Config(format!(
                "mode must be art, baseline or idealized (got {other})"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Art => "art",
            Mode::Baseline => "baseline",
            Mode::Idealized => "idealized",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProblemKind {
    RareEvent,
    Bayesian,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub problem: ProblemKind,
    pub level: f64,
    /// Defaults to 50 for rare events and 1 for the Bayesian problem.
    pub beta_infinity: Option<f64>,
    /// Explicit observations; generated from `x_star` when absent.
    pub observations: Option<Vec<f64>>,
    pub x_star: f64,
    pub n_obs: usize,
    pub obs_seed: u64,
    pub noise_variance: f64,
    pub ref_mean: f64,
    pub ref_stddev: f64,
    pub n: Vec<usize>,
    pub k: usize,
    pub c1: f64,
    pub c2: f64,
    pub epsilon_stop: f64,
    pub j0: usize,
    pub tau: f64,
    pub m: usize,
    pub r: usize,
    pub seed: u64,
    pub gain: f64,
    pub mode: Mode,
    pub out: PathBuf,
    pub initial_snapshots: usize,
    pub min_knot_gap: f64,
    pub bridge_grid: usize,
    pub target_accept: f64,
    pub rho: f64,
    pub ideal_h: usize,
    pub ideal_replicates: usize,
    pub reference_n: usize,
    pub reference_runs: usize,
    pub reference_seed: u64,
    /// Where the Bayesian reference sample is cached; defaults to
    /// `<out>/reference_sample.txt`.
    pub reference_cache: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let art = ArtConfig::default();
        Self {
            problem: ProblemKind::RareEvent,
            level: 90.0,
            beta_infinity: None,
            observations: None,
            x_star: 0.05,
            n_obs: 3,
            obs_seed: 7,
            noise_variance: 1e-2,
            ref_mean: 1.5,
            ref_stddev: 1.5,
            n: vec![art.n],
            k: art.k_budget,
            c1: art.c1,
            c2: art.c2,
            epsilon_stop: art.epsilon_stop,
            j0: art.j0,
            tau: art.tau,
            m: art.m,
            r: 20,
            seed: art.seed,
            gain: 0.01,
            mode: Mode::Art,
            out: PathBuf::from("out"),
            initial_snapshots: art.initial_snapshots,
            min_knot_gap: art.min_knot_gap,
            bridge_grid: art.bridge_grid,
            target_accept: art.target_accept,
            rho: art.rho,
            ideal_h: 40,
            ideal_replicates: 500,
            reference_n: 5000,
            reference_runs: 10,
            reference_seed: 1_000_003,
            reference_cache: None,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| ArtError::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(|v| parse_num(key, v.trim())).collect()
}

impl ExperimentConfig {
    /// Parse flat `key = value` text; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                ArtError::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "problem" => {
                    c.problem = match value {
                        "rare_event" => ProblemKind::RareEvent,
                        "bayesian" => ProblemKind::Bayesian,
                        other => {
                            return Err(ArtError::Config(format!(
                                "problem must be rare_event or bayesian (got {other})"
                            )))
                        }
                    }
                }
                "level" => c.level = parse_num(key, value)?,
                "beta_infinity" => c.beta_infinity = Some(parse_num(key, value)?),
                "observations" => c.observations = Some(parse_list(key, value)?),
                "x_star" => c.x_star = parse_num(key, value)?,
                "n_obs" => c.n_obs = parse_num(key, value)?,
                "obs_seed" => c.obs_seed = parse_num(key, value)?,
                "noise_variance" => c.noise_variance = parse_num(key, value)?,
                "ref_mean" => c.ref_mean = parse_num(key, value)?,
                "ref_stddev" => c.ref_stddev = parse_num(key, value)?,
                "n" => c.n = parse_list(key, value)?,
                "k" => c.k = parse_num(key, value)?,
                "c1" => c.c1 = parse_num(key, value)?,
                "c2" => c.c2 = parse_num(key, value)?,
                "epsilon_stop" => c.epsilon_stop = parse_num(key, value)?,
                "j0" => c.j0 = parse_num(key, value)?,
                "tau" => c.tau = parse_num(key, value)?,
                "m" => c.m = parse_num(key, value)?,
                "r" => c.r = parse_num(key, value)?,
                "seed" => c.seed = parse_num(key, value)?,
                "gain" => c.gain = parse_num(key, value)?,
                "mode" => c.mode = Mode::parse(value)?,
                "out" => c.out = PathBuf::from(value),
                "initial_snapshots" => c.initial_snapshots = parse_num(key, value)?,
                "min_knot_gap" => c.min_knot_gap = parse_num(key, value)?,
                "bridge_grid" => c.bridge_grid = parse_num(key, value)?,
                "target_accept" => c.target_accept = parse_num(key, value)?,
                "rho" => c.rho = parse_num(key, value)?,
                "ideal_h" => c.ideal_h = parse_num(key, value)?,
                "ideal_replicates" => c.ideal_replicates = parse_num(key, value)?,
                "reference_n" => c.reference_n = parse_num(key, value)?,
                "reference_runs" => c.reference_runs = parse_num(key, value)?,
                "reference_seed" => c.reference_seed = parse_num(key, value)?,
                "reference_cache" => c.reference_cache = Some(PathBuf::from(value)),
                other => return Err(ArtError::Config(format!("unknown key {other:?}"))),
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| ArtError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ArtError::Config(m.to_string()));
        if self.r < 1 {
            return bad("r must be >= 1");
        }
        if !(self.gain > 0.0 && self.gain <= 1.0) {
            return bad("gain must lie in (0, 1]");
        }
        if self.n.is_empty() || self.n.iter().any(|&n| n < 2) {
            return bad("n must list particle counts >= 2");
        }
        if !(self.level > 0.0) {
            return bad("level must be positive");
        }
        if !(self.noise_variance > 0.0) {
            return bad("noise_variance must be positive");
        }
        if !(self.x_star > 0.0) {
            return bad("x_star must be positive");
        }
        if self.ideal_h == 0 || self.ideal_replicates < 2 {
            return bad("ideal_h must be >= 1 and ideal_replicates >= 2");
        }
        if self.reference_n < 2 || self.reference_runs < 1 {
            return bad("reference_n must be >= 2 and reference_runs >= 1");
        }
        if !(self.c1 > 0.0 && self.c2 > 0.0 && self.epsilon_stop > 0.0) {
            return bad("c1, c2 and epsilon_stop must be positive");
        }
        for n in &self.n {
            let art = self.art_config(*n, self.seed);
            art.validate()
                .and_then(|_| art.budget(self.beta_infinity()).map(|_| ()))
                .map_err(|e| ArtError::Config(e.to_string()))?;
        }
        self.problem_spec()
            .map_err(|e| ArtError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn beta_infinity(&self) -> f64 {
        self.beta_infinity.unwrap_or(match self.problem {
            ProblemKind::RareEvent => 50.0,
            ProblemKind::Bayesian => 1.0,
        })
    }

    /// Observations `Psi*(x*) + sqrt(noise_variance) xi` unless given.
    pub fn observations(&self) -> Vec<f64> {
        if let Some(obs) = &self.observations {
            return obs.clone();
        }
        let psi = PsiModel::ModelS(Default::default()).eval_y(self.x_star.ln());
        let mut rng = stream(self.obs_seed, 0, 0);
        (0..self.n_obs)
            .map(|_| {
                let xi: f64 = StandardNormal.sample(&mut rng);
                psi + self.noise_variance.sqrt() * xi
            })
            .collect()
    }

    pub fn problem_spec(&self) -> Result<ProblemSpec> {
        let beta = self.beta_infinity();
        let mut spec = match self.problem {
            ProblemKind::RareEvent => ProblemSpec::model_s_rare_event(self.level, beta)?,
            ProblemKind::Bayesian => {
                ProblemSpec::model_s_bayesian(self.observations(), self.noise_variance, beta)?
            }
        };
        spec.reference = ReferenceDistribution::new(self.ref_mean, self.ref_stddev)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn art_config(&self, n: usize, seed: u64) -> ArtConfig {
        ArtConfig {
            n,
            k_budget: self.k,
            c1: self.c1,
            c2: self.c2,
            epsilon_stop: self.epsilon_stop,
            j0: self.j0,
            tau: self.tau,
            m: self.m,
            seed,
            initial_snapshots: self.initial_snapshots,
            min_knot_gap: self.min_knot_gap,
            bridge_grid: self.bridge_grid,
            target_accept: self.target_accept,
            rho: self.rho,
        }
    }

    pub fn baseline_config(&self, n: usize, seed: u64) -> BaselineConfig {
        BaselineConfig {
            n,
            c2: self.c2,
            m: self.m,
            seed,
            target_accept: self.target_accept,
            rho: self.rho,
        }
    }

    fn reference_cache_path(&self) -> PathBuf {
        self.reference_cache
            .clone()
            .unwrap_or_else(|| self.out.join("reference_sample.txt"))
    }
}

/// Quadrature truths for a problem: `Z*` at `beta_inf`, the shifted
/// normalization `p*_quad` and, for the toy rare event, `P(Psi* >= level)`.
pub fn oracle_values(spec: &ProblemSpec) -> Result<Vec<(String, f64)>> {
    let beta = spec.beta_infinity;
    let score = |y: f64| spec.score(spec.psi.eval_y(y));
    let z = spec.quadrature_z(score, beta)?;
    let max = spec.score_max();
    let shifted = spec.quadrature_z(|y| score(y) - max, beta)?;
    let mut out = vec![
        ("z_star".to_string(), z),
        ("log_z_star".to_string(), z.ln()),
        ("p_star_quad".to_string(), shifted),
    ];
    if let (PsiModel::ModelS(p), true) = (spec.psi, spec.is_rare_event()) {
        // Psi* reaches the plateau only on x <= 1/plateau
        let level_reached = match spec.flavor {
            crate::models::ProblemFlavor::RareEvent { level } => level <= p.plateau,
            _ => false,
        };
        let prob = if level_reached {
            let r = spec.reference;
            let edge = -p.plateau.ln();
            let lo = (r.mean - quadrature::WINDOW_SIGMAS * r.stddev).min(edge - r.stddev);
            quadrature::integrate_adaptive(|y| r.density(y), lo, edge, &[], quadrature::REL_TOL)?
        } else {
            0.0
        };
        out.push(("p_indicator".to_string(), prob));
    }
    Ok(out)
}

fn oracle(spec: &ProblemSpec, name: &str) -> Result<f64> {
    oracle_values(spec)?
        .into_iter()
        .find(|(n, _)| n == name)
        .map(|(_, v)| v)
        .ok_or_else(|| ArtError::InvalidArgument(format!("no oracle value {name}")))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub estimator: String,
    pub n: usize,
    pub expected_cost: f64,
    pub metric_name: String,
    pub metric_value: f64,
    pub replicates: usize,
    pub mean_estimate: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateRow {
    pub estimator: String,
    pub n: usize,
    pub replicate: usize,
    pub seed: u64,
    /// `ok`, or `failed: <reason>`.
    pub status: String,
    pub estimate: f64,
    pub metric_value: f64,
    pub true_evals: u64,
    pub reduced_evals: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSummary {
    pub out_dir: PathBuf,
    pub metrics: Vec<MetricsRow>,
    pub replicates: Vec<ReplicateRow>,
    pub failed: usize,
    pub total: usize,
}

impl ExperimentSummary {
    pub fn all_failed(&self) -> bool {
        self.total > 0 && self.failed == self.total
    }

    pub fn row(&self, estimator: &str, n: usize) -> Option<&MetricsRow> {
        self.metrics
            .iter()
            .find(|r| r.estimator == estimator && r.n == n)
    }
}

/// How a replicate is scored against the truth.
enum Scoring {
    /// Relative squared error of the shifted normalization.
    RelativeError { truth: f64 },
    /// KS distance of the `y`-marginal against a reference sample.
    Ks { reference: EmpiricalCdf },
}

impl Scoring {
    fn metric_name(&self) -> &'static str {
        match self {
            Scoring::RelativeError { .. } => "relative_sq_error",
            Scoring::Ks { .. } => "ks_distance",
        }
    }
}

/// One estimator's outcome on one replicate.
struct Outcome {
    estimate: f64,
    ks: Option<f64>,
}

fn score_sample(scoring: &Scoring, sample: &WeightedSample) -> Result<Option<f64>> {
    match scoring {
        Scoring::RelativeError { .. } => Ok(None),
        Scoring::Ks { reference } => ks_distance(sample, reference).map(Some),
    }
}

fn aggregate(
    estimator: &str,
    n: usize,
    expected_cost: f64,
    scoring: &Scoring,
    outcomes: &[Outcome],
) -> Result<MetricsRow> {
    let estimates: Vec<f64> = outcomes.iter().map(|o| o.estimate).collect();
    let (mean, se) = if estimates.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        mean_and_se(&estimates)
    };
    let metric_value = if outcomes.is_empty() {
        f64::NAN
    } else {
        match scoring {
            Scoring::RelativeError { truth } => relative_sq_error(&estimates, *truth)?,
            Scoring::Ks { .. } => {
                outcomes.iter().filter_map(|o| o.ks).sum::<f64>() / outcomes.len() as f64
            }
        }
    };
    Ok(MetricsRow {
        estimator: estimator.to_string(),
        n,
        expected_cost,
        metric_name: scoring.metric_name().to_string(),
        metric_value,
        replicates: outcomes.len(),
        mean_estimate: mean,
        std_error: se,
    })
}

fn replicate_metric(scoring: &Scoring, o: &Outcome) -> f64 {
    match scoring {
        Scoring::RelativeError { truth } => ((o.estimate - truth) / truth).powi(2),
        Scoring::Ks { .. } => o.ks.unwrap_or(f64::NAN),
    }
}

/// Pooled, equally weighted final clouds of `runs` baseline runs, cached at
/// `path` with a header naming the generating settings.
pub fn reference_sample(
    truth_spec: &ProblemSpec,
    config: &ExperimentConfig,
    path: &Path,
) -> Result<Vec<f64>> {
    let header = format!(
        "# reference seed={} runs={} n={} c2={} m={} obs={}",
        config.reference_seed,
        config.reference_runs,
        config.reference_n,
        fmt17(config.c2),
        config.m,
        truth_spec_key(truth_spec),
    );
    if let Ok(text) = fs::read_to_string(path) {
        let mut lines = text.lines();
        if lines.next() == Some(header.as_str()) {
            let values: std::result::Result<Vec<f64>, _> = lines.map(str::parse).collect();
            if let Ok(v) = values {
                if !v.is_empty() {
                    return Ok(v);
                }
            }
        }
    }
    let runs: Vec<BaselineResult> = (0..config.reference_runs)
        .into_par_iter()
        .map(|i| {
            let truth = TrueModel::new(truth_spec.clone());
            let cfg = config.baseline_config(config.reference_n, config.reference_seed + i as u64);
            baseline_adaptive_smc(&truth, &cfg)
        })
        .collect::<Result<_>>()?;
    let mut values: Vec<f64> = runs.into_iter().flat_map(|r| r.sample.values).collect();
    values.sort_by(f64::total_cmp);
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| ArtError::io(dir, e))?;
    }
    let mut text = header;
    text.push('\n');
    for v in &values {
        text.push_str(&fmt17(*v));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| ArtError::io(path, e))?;
    Ok(values)
}

fn truth_spec_key(spec: &ProblemSpec) -> String {
    match &spec.flavor {
        crate::models::ProblemFlavor::Bayesian {
            observations,
            noise_variance,
        } => {
            let obs: Vec<String> = observations.iter().map(|o| fmt17(*o)).collect();
            format!(
                "{};var={};beta={};ref={},{}",
                obs.join(","),
                fmt17(*noise_variance),
                fmt17(spec.beta_infinity),
                fmt17(spec.reference.mean),
                fmt17(spec.reference.stddev)
            )
        }
        crate::models::ProblemFlavor::RareEvent { level } => format!("level={}", fmt17(*level)),
    }
}

fn scoring_for(config: &ExperimentConfig, spec: &ProblemSpec) -> Result<Scoring> {
    if spec.is_rare_event() {
        Ok(Scoring::RelativeError {
            truth: oracle(spec, "p_star_quad")?,
        })
    } else {
        let values = reference_sample(spec, config, &config.reference_cache_path())?;
        Ok(Scoring::Ks {
            reference: EmpiricalCdf::from_values(values)?,
        })
    }
}

fn n_dir(out: &Path, n: usize, many: bool) -> PathBuf {
    if many {
        out.join(format!("N{n}"))
    } else {
        out.to_path_buf()
    }
}

fn shifted_estimate(log_z: f64, spec: &ProblemSpec) -> f64 {
    (log_z - spec.beta_infinity * spec.score_max()).exp()
}

fn failed_row(estimator: &str, n: usize, r: usize, seed: u64, e: &str) -> ReplicateRow {
    ReplicateRow {
        estimator: estimator.to_string(),
        n,
        replicate: r,
        seed,
        status: format!("failed: {e}"),
        estimate: f64::NAN,
        metric_value: f64::NAN,
        true_evals: 0,
        reduced_evals: 0,
    }
}

fn run_art_mode(
    config: &ExperimentConfig,
    spec: &ProblemSpec,
    scoring: &Scoring,
) -> Result<(Vec<MetricsRow>, Vec<ReplicateRow>, usize, usize)> {
    let jobs: Vec<(usize, usize)> = config
        .n
        .iter()
        .flat_map(|&n| (0..config.r).map(move |r| (n, r)))
        .collect();
    let results: Vec<Result<RunResult>> = jobs
        .par_iter()
        .map(|&(n, r)| {
            let truth = TrueModel::new(spec.clone());
            run_art(&truth, &config.art_config(n, config.seed ^ r as u64))
        })
        .collect();

    let many = config.n.len() > 1;
    let mut metrics = Vec::new();
    let mut rows = Vec::new();
    let mut failed = 0;
    for &n in &config.n {
        let dir = n_dir(&config.out, n, many);
        fs::create_dir_all(&dir).map_err(|e| ArtError::io(&dir, e))?;
        let mut is_out = Vec::new();
        let mut rsmc_out = Vec::new();
        let mut reduced = Vec::new();
        let mut true_evals = Vec::new();
        for (&(jn, r), res) in jobs.iter().zip(&results) {
            if jn != n {
                continue;
            }
            let seed = config.seed ^ r as u64;
            let run = match res {
                Ok(run) => run,
                Err(e) => {
                    failed += 1;
                    let e = e.to_string();
                    rows.push(failed_row("IS", n, r, seed, &e));
                    rows.push(failed_row("RSMC", n, r, seed, &e));
                    continue;
                }
            };
            let path = dir.join(format!("trace_r{r}.tsv"));
            fs::write(&path, run.trace_tsv()).map_err(|e| ArtError::io(&path, e))?;
            let estimates = (|| -> Result<_> {
                let (is_sample, rsmc_sample) = run.estimators.normalized_estimates()?;
                let is = Outcome {
                    estimate: run.estimators.log_is_estimate().exp(),
                    ks: score_sample(scoring, &is_sample)?,
                };
                let rsmc = Outcome {
                    estimate: run.estimators.log_rsmc_estimate().exp(),
                    ks: score_sample(scoring, &rsmc_sample)?,
                };
                Ok((is, rsmc))
            })();
            match estimates {
                Ok((is, rsmc)) => {
                    for (name, o) in [("IS", &is), ("RSMC", &rsmc)] {
                        rows.push(ReplicateRow {
                            estimator: name.into(),
                            n,
                            replicate: r,
                            seed,
                            status: "ok".into(),
                            estimate: o.estimate,
                            metric_value: replicate_metric(scoring, o),
                            true_evals: run.true_evals,
                            reduced_evals: run.reduced_evals,
                        });
                    }
                    reduced.push(run.reduced_evals);
                    true_evals.push(run.true_evals as f64);
                    is_out.push(is);
                    rsmc_out.push(rsmc);
                }
                Err(e) => {
                    failed += 1;
                    for name in ["IS", "RSMC"] {
                        let mut row = failed_row(name, n, r, seed, &e.to_string());
                        row.true_evals = run.true_evals;
                        row.reduced_evals = run.reduced_evals;
                        rows.push(row);
                    }
                }
            }
        }
        let k_cost = if true_evals.is_empty() {
            (config.k + config.initial_snapshots) as f64
        } else {
            true_evals.iter().sum::<f64>() / true_evals.len() as f64
        };
        let cost = metrics::expected_cost(k_cost, &reduced, config.gain);
        metrics.push(aggregate("IS", n, cost, scoring, &is_out)?);
        metrics.push(aggregate("RSMC", n, cost, scoring, &rsmc_out)?);
    }
    Ok((metrics, rows, failed, jobs.len()))
}

fn run_baseline_mode(
    config: &ExperimentConfig,
    spec: &ProblemSpec,
    scoring: &Scoring,
) -> Result<(Vec<MetricsRow>, Vec<ReplicateRow>, usize, usize)> {
    let jobs: Vec<(usize, usize)> = config
        .n
        .iter()
        .flat_map(|&n| (0..config.r).map(move |r| (n, r)))
        .collect();
    let results: Vec<Result<BaselineResult>> = jobs
        .par_iter()
        .map(|&(n, r)| {
            let truth = TrueModel::new(spec.clone());
            baseline_adaptive_smc(&truth, &config.baseline_config(n, config.seed ^ r as u64))
        })
        .collect();
    let mut metrics = Vec::new();
    let mut rows = Vec::new();
    let mut failed = 0;
    for &n in &config.n {
        let mut outs = Vec::new();
        let mut evals = Vec::new();
        for (&(jn, r), res) in jobs.iter().zip(&results) {
            if jn != n {
                continue;
            }
            let seed = config.seed ^ r as u64;
            let evaluated = res.as_ref().map_err(ToString::to_string).and_then(|run| {
                let ks = score_sample(scoring, &run.sample).map_err(|e| e.to_string())?;
                let estimate = shifted_estimate(run.log_z, spec);
                Ok((run, Outcome { estimate, ks }))
            });
            match evaluated {
                Ok((run, o)) => {
                    rows.push(ReplicateRow {
                        estimator: "baseline".into(),
                        n,
                        replicate: r,
                        seed,
                        status: "ok".into(),
                        estimate: o.estimate,
                        metric_value: replicate_metric(scoring, &o),
                        true_evals: run.true_evals,
                        reduced_evals: 0,
                    });
                    evals.push(run.true_evals as f64);
                    outs.push(o);
                }
                Err(e) => {
                    failed += 1;
                    rows.push(failed_row("baseline", n, r, seed, &e));
                }
            }
        }
        let cost = if evals.is_empty() {
            f64::NAN
        } else {
            evals.iter().sum::<f64>() / evals.len() as f64
        };
        metrics.push(aggregate("baseline", n, cost, scoring, &outs)?);
    }
    Ok((metrics, rows, failed, jobs.len()))
}

fn run_idealized_mode(config: &ExperimentConfig, spec: &ProblemSpec) -> Result<Vec<MetricsRow>> {
    let beta = spec.beta_infinity;
    let proposals = idealized::default_surrogates(spec, 5)?
        .into_iter()
        .map(|s| idealized::ideal_proposal(spec, s, beta))
        .collect::<Result<Vec<_>>>()?;
    let observables = idealized::default_observables(spec)?;
    let h = config.ideal_h;
    let mut prefixes = vec![(h / 4).max(1), (h / 2).max(1), h];
    prefixes.dedup();
    let report = idealized::idealized_unbiasedness_harness(
        spec,
        &proposals,
        &observables,
        h,
        &prefixes,
        config.ideal_replicates,
        config.seed,
    )?;
    let mut rows = Vec::new();
    for obs in &report.observables {
        for p in &obs.prefixes {
            rows.push(MetricsRow {
                estimator: format!("idealized_{}", obs.name),
                n: p.h,
                expected_cost: p.h as f64,
                metric_name: "relative_variance".into(),
                metric_value: p.variance / (obs.truth * obs.truth),
                replicates: report.replicates,
                mean_estimate: p.mean,
                std_error: p.std_error,
            });
        }
    }
    Ok(rows)
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    let file = fs::File::create(path).map_err(|e| ArtError::io(path, e))?;
    Ok(csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(file))
}

fn csv_err(path: &Path, e: csv::Error) -> ArtError {
    ArtError::io(path, std::io::Error::other(e))
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(METRICS_HEADER)
        .map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record([
            r.estimator.clone(),
            r.n.to_string(),
            fmt17(r.expected_cost),
            r.metric_name.clone(),
            fmt17(r.metric_value),
            r.replicates.to_string(),
            fmt17(r.mean_estimate),
            fmt17(r.std_error),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| ArtError::io(path, e))
}

pub fn write_replicates(path: &Path, rows: &[ReplicateRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(REPLICATES_HEADER)
        .map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record([
            r.estimator.clone(),
            r.n.to_string(),
            r.replicate.to_string(),
            r.seed.to_string(),
            r.status.clone(),
            fmt17(r.estimate),
            fmt17(r.metric_value),
            r.true_evals.to_string(),
            r.reduced_evals.to_string(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| ArtError::io(path, e))
}

/// Run the configured experiment and write `metrics.csv`, `replicates.csv`,
/// per-replicate traces (ART mode) and `run_info.txt` under `config.out`.
///
/// Replicate failures become flagged rows; only IO and setup errors abort.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentSummary> {
    config.validate()?;
    let spec = config.problem_spec()?;
    let out = config.out.clone();
    fs::create_dir_all(&out).map_err(|e| ArtError::io(&out, e))?;

    let (metrics, replicates, failed, total) = match config.mode {
        Mode::Art => run_art_mode(config, &spec, &scoring_for(config, &spec)?)?,
        Mode::Baseline => run_baseline_mode(config, &spec, &scoring_for(config, &spec)?)?,
        Mode::Idealized => (run_idealized_mode(config, &spec)?, Vec::new(), 0, 0),
    };

    write_metrics(&out.join("metrics.csv"), &metrics)?;
    if config.mode != Mode::Idealized {
        write_replicates(&out.join("replicates.csv"), &replicates)?;
    }
    let mut info = format!(
        "mode\t{}\nseed\t{}\ngain\t{}\nreplicates\t{}\n",
        config.mode.as_str(),
        config.seed,
        fmt17(config.gain),
        if config.mode == Mode::Idealized {
            config.ideal_replicates
        } else {
            config.r
        }
    );
    for (name, v) in oracle_values(&spec)? {
        info.push_str(&format!("{name}\t{}\n", fmt17(v)));
    }
    let info_path = out.join("run_info.txt");
    fs::write(&info_path, info).map_err(|e| ArtError::io(&info_path, e))?;

    Ok(ExperimentSummary {
        out_dir: out,
        metrics,
        replicates,
        failed,
        total,
    })
}

/// `Psi*` at a physical state; exposed for observation generation checks.
pub fn psi_at_x(spec: &ProblemSpec, x: f64) -> Result<f64> {
    Ok(spec.psi.eval_y(StatePoint::from_x(x)?.y))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_keys_comments_and_lists() {
        let c = ExperimentConfig::parse(
            "# sweep\nproblem = rare_event\nn = 100, 200\nk=10 # budget\ntau = inf\nmode = baseline\n",
        )
        .unwrap();
        assert_eq!(c.n, vec![100, 200]);
        assert_eq!(c.k, 10);
        assert!(c.tau.is_infinite());
        assert_eq!(c.mode, Mode::Baseline);
        assert_eq!(c.beta_infinity(), 50.0);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        for text in [
            "frobnicate = 1",
            "r = 0",
            "gain = 0",
            "gain = 2",
            "c2 = -1",
            "n = x",
            "k",
        ] {
            assert!(
                matches!(ExperimentConfig::parse(text), Err(ArtError::Config(_))),
                "{text}"
            );
        }
    }

    #[test]
    fn bayesian_observations_are_reproducible() {
        let c = ExperimentConfig::parse("problem = bayesian").unwrap();
        let a = c.observations();
        assert_eq!(a, c.observations());
        assert_eq!(a.len(), 3);
        let psi = psi_at_x(&c.problem_spec().unwrap(), 0.05).unwrap();
        assert!(a.iter().all(|o| (o - psi).abs() < 0.5));
        assert_eq!(c.beta_infinity(), 1.0);
    }

    #[test]
    fn rare_event_oracles() {
        let spec = ProblemSpec::model_s_rare_event(90.0, 50.0).unwrap();
        let values = oracle_values(&spec).unwrap();
        let get = |n: &str| values.iter().find(|(k, _)| k == n).unwrap().1;
        assert!((get("p_star_quad") / 3.361784703781468e-5 - 1.0).abs() < 1e-8);
        assert!((get("z_star") / (get("p_star_quad") * 50f64.exp()) - 1.0).abs() < 1e-12);
        // P(y <= -ln 90) under N(1.5, 1.5^2)
        assert!((get("p_indicator") / 3.168822e-5 - 1.0).abs() < 1e-5);
        assert!(get("p_indicator") < get("p_star_quad"));
    }
}
