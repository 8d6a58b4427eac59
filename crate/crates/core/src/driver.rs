//! The main loop: temper under the current surrogate up to the critical
//! temperature, draw a snapshot, refine the surrogate, bridge from a stored
//! proposal, and accumulate the importance-sampling and reduced-SMC
//! estimators.

use std::fmt::Write as _;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::Rng;

use crate::entropy::{self, BridgeAtoms, EntropyBudget};
use crate::error::{ArtError, Result};
use crate::models::{ProblemSpec, TrueModel};
use crate::smc::{self, MutationKernel, ParticleCloud};
use crate::surrogate::{fmt17, Snapshot, SplineSurrogate, DEFAULT_MIN_KNOT_GAP};

/// Seed lane used for the initial snapshot draws.
const INITIAL_SNAPSHOT_EPOCH: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Learning,
    Estimating,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Learning => "learning",
            Phase::Estimating => "estimating",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArtConfig {
    pub n: usize,
    /// Snapshot budget `K`.
    pub k_budget: usize,
    pub c1: f64,
    pub c2: f64,
    pub epsilon_stop: f64,
    pub j0: usize,
    /// Learning intensity; `f64::INFINITY` picks the largest-error particle.
    pub tau: f64,
    /// Metropolis sweeps per tempering step.
    pub m: usize,
    pub seed: u64,
    pub initial_snapshots: usize,
    pub min_knot_gap: f64,
    pub bridge_grid: usize,
    pub target_accept: f64,
    pub rho: f64,
}

impl Default for ArtConfig {
    fn default() -> Self {
        Self {
            n: 1000,
            k_budget: 200,
            c1: 1e-3,
            c2: 1e-3,
            epsilon_stop: 1e-6,
            j0: 5,
            tau: f64::INFINITY,
            m: 100,
            seed: 0,
            initial_snapshots: 5,
            min_knot_gap: DEFAULT_MIN_KNOT_GAP,
            bridge_grid: entropy::DEFAULT_BRIDGE_GRID,
            target_accept: 0.44,
            rho: 0.0,
        }
    }
}

impl ArtConfig {
    pub fn budget(&self, beta_infinity: f64) -> Result<EntropyBudget> {
        let b = EntropyBudget {
            c1: self.c1,
            c2: self.c2,
            epsilon_stop: self.epsilon_stop,
            beta_infinity,
            bridge_grid: self.bridge_grid,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 || self.k_budget == 0 || self.m == 0 || self.j0 == 0 {
            return Err(ArtError::InvalidArgument(
                "need n >= 2, k >= 1, m >= 1 and j0 >= 1".into(),
            ));
        }
        if self.initial_snapshots < 2 {
            return Err(ArtError::InvalidArgument(
                "at least 2 initial snapshots are needed to fit a spline".into(),
            ));
        }
        if !(self.tau >= 0.0) {
            return Err(ArtError::InvalidArgument(format!(
                "tau must be >= 0, got {}",
                self.tau
            )));
        }
        if !(self.min_knot_gap > 0.0) {
            return Err(ArtError::InvalidArgument("min_knot_gap must be > 0".into()));
        }
        Ok(())
    }
}

/// Surrogate evaluation with cost accounting.
///
/// Reduced-score evaluations are what the gain-weighted cost counts; error
/// evaluations go through the model's separately tallied oracle.
#[derive(Debug)]
pub struct Evaluator<'a> {
    pub truth: &'a TrueModel,
    reduced_evals: AtomicU64,
}

impl<'a> Evaluator<'a> {
    pub fn new(truth: &'a TrueModel) -> Self {
        Self {
            truth,
            reduced_evals: AtomicU64::new(0),
        }
    }

    pub fn spec(&self) -> &ProblemSpec {
        self.truth.spec()
    }

    pub fn score(&self, s: &SplineSurrogate, y: f64) -> f64 {
        self.reduced_evals.fetch_add(1, Ordering::Relaxed);
        self.spec().score(s.eval(y))
    }

    pub fn error(&self, s: &SplineSurrogate, y: f64) -> f64 {
        let psi = s.eval(y);
        let err = (psi - self.truth.psi_for_error(y)).abs();
        self.spec().score_error(psi, err)
    }

    pub fn scores(&self, s: &SplineSurrogate, ys: &[f64]) -> Vec<f64> {
        ys.iter().map(|&y| self.score(s, y)).collect()
    }

    pub fn errors(&self, s: &SplineSurrogate, ys: &[f64]) -> Vec<f64> {
        ys.iter().map(|&y| self.error(s, y)).collect()
    }

    pub fn reduced_evals(&self) -> u64 {
        self.reduced_evals.load(Ordering::Relaxed)
    }

    pub fn count_reduced(&self, n: u64) {
        self.reduced_evals.fetch_add(n, Ordering::Relaxed);
    }
}

/// Frozen cloud at a critical temperature, kept for bridging.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalRecord {
    pub k: usize,
    pub beta_k: f64,
    pub states: Vec<f64>,
    /// Scores of `states` under the surrogate the record was tempered with.
    pub scores: Vec<f64>,
    pub log_z: f64,
    pub surrogate_version: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunState {
    /// Iterations whose critical temperature reached `beta_infinity`.
    pub j: usize,
    /// IS sample count.
    pub h: usize,
    pub k_remaining: usize,
    pub trigger_j0: usize,
    pub phase: Phase,
    pub frozen: bool,
}

impl RunState {
    pub fn new(k_budget: usize, j0: usize) -> Self {
        Self {
            j: 0,
            h: 0,
            k_remaining: k_budget,
            trigger_j0: j0,
            phase: Phase::Learning,
            frozen: false,
        }
    }

    /// Count a critical temperature and update the phase.
    pub fn record_critical(&mut self, beta_k: f64, beta_infinity: f64) {
        if beta_k == beta_infinity {
            self.j += 1;
        }
        self.phase = if self.j >= self.trigger_j0 {
            Phase::Estimating
        } else {
            Phase::Learning
        };
    }

    /// Whether the current snapshot enters the estimators.
    pub fn accumulates(&self) -> bool {
        self.j > self.trigger_j0
    }
}

/// Atoms with log weights; expectations are weight-normalized.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightedSample {
    pub values: Vec<f64>,
    pub log_weights: Vec<f64>,
}

impl WeightedSample {
    pub fn uniform(values: Vec<f64>) -> Self {
        let log_weights = vec![0.0; values.len()];
        Self {
            values,
            log_weights,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn push(&mut self, value: f64, log_weight: f64) {
        self.values.push(value);
        self.log_weights.push(log_weight);
    }

    /// Normalized weights; fails when every weight is zero.
    pub fn normalized_weights(&self) -> Result<Vec<f64>> {
        let max = self
            .log_weights
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(ArtError::ZeroWeights);
        }
        let w: Vec<f64> = self.log_weights.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = w.iter().sum();
        Ok(w.into_iter().map(|v| v / total).collect())
    }

    pub fn expectation<F: Fn(f64) -> f64>(&self, f: F) -> Result<f64> {
        let w = self.normalized_weights()?;
        Ok(self.values.iter().zip(&w).map(|(v, w)| w * f(*v)).sum())
    }

    /// `ln((1/count) sum_i exp(log_weight_i))`.
    pub fn log_mean_weight(&self, count: usize) -> f64 {
        let max = self
            .log_weights
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() || count == 0 {
            return f64::NEG_INFINITY;
        }
        max + (self
            .log_weights
            .iter()
            .map(|l| (l - max).exp())
            .sum::<f64>()
            / count as f64)
            .ln()
    }
}

/// Running IS and RSMC estimators of `gamma(phi) = pi(exp(beta_inf S*) phi)`,
/// reported with the score shifted by its maximum.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorAccumulators {
    pub beta_infinity: f64,
    /// Subtracted from every log weight: `beta_infinity * score_max`.
    pub log_shift: f64,
    pub is_sample: WeightedSample,
    pub rsmc_sample: WeightedSample,
    /// Number of RSMC iterations accumulated (equals the IS count).
    pub rsmc_terms: usize,
}

impl EstimatorAccumulators {
    pub fn new(beta_infinity: f64, score_max: f64) -> Self {
        Self {
            beta_infinity,
            log_shift: beta_infinity * score_max,
            is_sample: WeightedSample::default(),
            rsmc_sample: WeightedSample::default(),
            rsmc_terms: 0,
        }
    }

    pub fn h(&self) -> usize {
        self.is_sample.len()
    }

    /// Adds `Z_k exp(beta_inf S*(X) - beta_k S_k(X)) delta_X`.
    pub fn accumulate_is(&mut self, log_z: f64, beta_k: f64, y: f64, s_star: f64, s_reduced: f64) {
        let lw = log_z + self.beta_infinity * s_star - beta_k * s_reduced - self.log_shift;
        self.is_sample.push(y, lw);
    }

    /// Adds `(Z_k / N) sum_i exp((beta_inf - beta_k) S_k(xi_i)) delta_xi_i`.
    pub fn accumulate_rsmc(&mut self, log_z: f64, beta_k: f64, states: &[f64], scores: &[f64]) {
        let ln_n = (states.len() as f64).ln();
        for (y, s) in states.iter().zip(scores) {
            let lw = log_z + (self.beta_infinity - beta_k) * s - ln_n - self.log_shift;
            self.rsmc_sample.push(*y, lw);
        }
        self.rsmc_terms += 1;
    }

    /// `ln gamma_IS(1)`, shifted.
    pub fn log_is_estimate(&self) -> f64 {
        self.is_sample.log_mean_weight(self.h())
    }

    /// `ln gamma_RSMC(1)`, shifted.
    pub fn log_rsmc_estimate(&self) -> f64 {
        self.rsmc_sample.log_mean_weight(self.rsmc_terms)
    }

    pub fn is_gamma<F: Fn(f64) -> f64>(&self, f: F) -> f64 {
        let h = self.h() as f64;
        self.is_sample
            .values
            .iter()
            .zip(&self.is_sample.log_weights)
            .map(|(v, l)| l.exp() * f(*v))
            .sum::<f64>()
            / h
    }

    /// Self-normalized IS and RSMC samples.
    pub fn normalized_estimates(&self) -> Result<(WeightedSample, WeightedSample)> {
        if self.h() == 0 {
            return Err(ArtError::InsufficientData(
                "no estimator terms accumulated".into(),
            ));
        }
        self.is_sample.normalized_weights()?;
        self.rsmc_sample.normalized_weights()?;
        Ok((self.is_sample.clone(), self.rsmc_sample.clone()))
    }
}

/// Snapshot index: largest error (lowest index on ties) for infinite `tau`,
/// a draw from `exp(tau E)` weights for finite `tau`, uniform when estimating.
pub fn draw_snapshot<R: Rng + ?Sized>(
    errors: &[f64],
    phase: Phase,
    tau: f64,
    rng: &mut R,
) -> usize {
    match phase {
        Phase::Estimating => rng.random_range(0..errors.len()),
        Phase::Learning if tau == f64::INFINITY => {
            let mut best = 0;
            for (i, e) in errors.iter().enumerate() {
                if *e > errors[best] {
                    best = i;
                }
            }
            best
        }
        Phase::Learning => {
            let lw: Vec<f64> = errors.iter().map(|e| tau * e).collect();
            let w = smc::Potentials::from_log(&lw).values;
            let total: f64 = w.iter().sum();
            let u = rng.random::<f64>() * total;
            let mut acc = 0.0;
            for (i, wi) in w.iter().enumerate() {
                acc += wi;
                if u < acc {
                    return i;
                }
            }
            w.len() - 1
        }
    }
}

/// Stop refining once the surrogate target is within `epsilon_stop` of the
/// proposal at `beta_infinity`.
pub fn stopping_check(scores: &[f64], errors: &[f64], beta_k: f64, budget: &EntropyBudget) -> bool {
    beta_k == budget.beta_infinity
        && entropy::ent_surrogate_target(scores, errors, beta_k, 0.0) <= budget.epsilon_stop
}

/// Outcome of one tempering pass.
#[derive(Debug, Clone, PartialEq)]
pub struct TemperOutcome {
    pub beta_k: f64,
    /// Accepted temperatures, starting with the initial one.
    pub betas: Vec<f64>,
    /// Step entropies of the accepted steps.
    pub step_entropies: Vec<f64>,
    /// Scores and errors on the final cloud.
    pub scores: Vec<f64>,
    pub errors: Vec<f64>,
}

/// Log target `ln pi(y) + beta S(y)` for the Metropolis kernel.
fn log_target<'b>(
    eval: &'b Evaluator<'_>,
    s: &'b SplineSurrogate,
    beta: f64,
) -> impl Fn(f64) -> f64 + Sync + 'b {
    let reference = eval.spec().reference;
    move |y| reference.ln_density(y) + beta * eval.score(s, y)
}

/// Temper the cloud under `surrogate` until the next step would exceed the
/// worst-case log cost, or `beta_infinity` is reached.
pub fn temper_to_critical(
    cloud: &mut ParticleCloud,
    eval: &Evaluator<'_>,
    surrogate: &SplineSurrogate,
    budget: &EntropyBudget,
    kernel: &mut MutationKernel,
    m: usize,
) -> Result<TemperOutcome> {
    let mut betas = vec![cloud.beta];
    let mut step_entropies = Vec::new();
    let mut scores = eval.scores(surrogate, &cloud.states);
    let mut errors = eval.errors(surrogate, &cloud.states);
    while cloud.beta < budget.beta_infinity {
        let next = entropy::solve_next_beta(&scores, cloud.beta, budget)?;
        let delta = next - cloud.beta;
        if !entropy::critical_accept(&scores, &errors, cloud.beta, delta, budget) {
            break;
        }
        step_entropies.push(entropy::ent_temper_step(&scores, delta));
        let log_g: Vec<f64> = scores.iter().map(|s| delta * s).collect();
        cloud.reweight_resample(&log_g)?;
        cloud.beta = next;
        smc::mh_mutate(cloud, log_target(eval, surrogate, next), m, kernel)?;
        betas.push(next);
        scores = eval.scores(surrogate, &cloud.states);
        errors = eval.errors(surrogate, &cloud.states);
    }
    Ok(TemperOutcome {
        beta_k: cloud.beta,
        betas,
        step_entropies,
        scores,
        errors,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub k: usize,
    pub beta_k: f64,
    pub log_z: f64,
    pub ent_surrogate: f64,
    pub phase: Phase,
    pub snapshot_y: f64,
    pub true_score: f64,
    pub k_bridge: usize,
    pub beta_bridge: f64,
    pub tempering_steps: usize,
    pub surrogate_version: usize,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub trace: Vec<TraceRow>,
    pub estimators: EstimatorAccumulators,
    pub iterations: usize,
    pub initial_snapshots: usize,
    pub true_evals: u64,
    pub reduced_evals: u64,
    /// Reduced evaluations made during each iteration.
    pub reduced_evals_per_iteration: Vec<u64>,
    pub error_oracle_evals: u64,
    pub target_reached: bool,
    /// Iteration at which the surrogate stopped being refined.
    pub frozen_at: Option<usize>,
    pub surrogate: Arc<SplineSurrogate>,
    /// All accepted temperatures, per iteration.
    pub beta_paths: Vec<Vec<f64>>,
    pub step_entropies: Vec<Vec<f64>>,
}

impl RunResult {
    pub const TRACE_HEADER: &'static str =
        "k\tbeta_k\tlog_z\tent_surrogate\tphase\tsnapshot_y\ttrue_score\tk_bridge\tbeta_bridge";

    /// Tab-separated per-iteration trace with a header line.
    pub fn trace_tsv(&self) -> String {
        let mut out = String::from(Self::TRACE_HEADER);
        out.push('\n');
        for r in &self.trace {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.k,
                fmt17(r.beta_k),
                fmt17(r.log_z),
                fmt17(r.ent_surrogate),
                r.phase.as_str(),
                fmt17(r.snapshot_y),
                fmt17(r.true_score),
                r.k_bridge,
                fmt17(r.beta_bridge)
            );
        }
        out
    }

    pub fn h(&self) -> usize {
        self.estimators.h()
    }
}

/// Run the full algorithm on `truth`'s problem.
pub fn run_art(truth: &TrueModel, config: &ArtConfig) -> Result<RunResult> {
    config.validate()?;
    let spec = truth.spec().clone();
    spec.validate()?;
    let budget = config.budget(spec.beta_infinity)?;
    let eval = Evaluator::new(truth);
    let beta_inf = spec.beta_infinity;

    let mut init_rng = smc::stream(config.seed, INITIAL_SNAPSHOT_EPOCH, 0);
    let initial: Vec<Snapshot> = (0..config.initial_snapshots)
        .map(|_| {
            let y = spec.reference.sample(&mut init_rng);
            Snapshot {
                y,
                psi_star: truth.psi(y),
                iteration: 0,
            }
        })
        .collect();
    let mut surrogates = vec![Arc::new(SplineSurrogate::fit(
        &initial,
        config.min_knot_gap,
    )?)];

    let mut cloud = ParticleCloud::init(config.n, &spec.reference, config.seed)?;
    let mut kernel = MutationKernel {
        log_step: spec.reference.stddev.ln(),
        target_accept: config.target_accept,
        adapt_rate_constant: 1.0,
        rho: config.rho,
    };
    kernel.validate()?;

    let mut records = vec![ProposalRecord {
        k: 0,
        beta_k: 0.0,
        states: cloud.states.clone(),
        scores: eval.scores(&surrogates[0], &cloud.states),
        log_z: 0.0,
        surrogate_version: 0,
    }];
    let mut state = RunState::new(config.k_budget, config.j0);
    let mut acc = EstimatorAccumulators::new(beta_inf, spec.score_max());
    let mut trace = Vec::with_capacity(config.k_budget);
    let mut per_iteration = Vec::with_capacity(config.k_budget);
    let mut beta_paths = Vec::with_capacity(config.k_budget);
    let mut step_entropies = Vec::with_capacity(config.k_budget);
    let mut frozen_at = None;
    let mut k = 0;

    while state.k_remaining > 0 {
        k += 1;
        let evals_before = eval.reduced_evals();
        let version = surrogates.len() - 1;
        let surrogate = Arc::clone(&surrogates[version]);
        cloud.surrogate_version = version;

        let outcome = temper_to_critical(
            &mut cloud,
            &eval,
            &surrogate,
            &budget,
            &mut kernel,
            config.m,
        )?;
        let beta_k = outcome.beta_k;
        records.push(ProposalRecord {
            k,
            beta_k,
            states: cloud.states.clone(),
            scores: outcome.scores.clone(),
            log_z: cloud.log_z,
            surrogate_version: version,
        });
        state.record_critical(beta_k, beta_inf);

        let idx = draw_snapshot(
            &outcome.errors,
            state.phase,
            config.tau,
            &mut cloud.cloud_rng(),
        );
        let y = cloud.states[idx];
        let psi_star = truth.psi(y);
        let s_star = spec.score(psi_star);
        let ent_surrogate =
            entropy::ent_surrogate_target(&outcome.scores, &outcome.errors, beta_k, 0.0);

        if !state.frozen && stopping_check(&outcome.scores, &outcome.errors, beta_k, &budget) {
            state.frozen = true;
            frozen_at = Some(k);
        }
        if !state.frozen {
            let updated = surrogate.update(Snapshot {
                y,
                psi_star,
                iteration: k,
            })?;
            surrogates.push(Arc::new(updated));
        }

        if state.accumulates() {
            state.h += 1;
            acc.accumulate_is(cloud.log_z, beta_k, y, s_star, outcome.scores[idx]);
            acc.accumulate_rsmc(cloud.log_z, beta_k, &cloud.states, &outcome.scores);
        }
        state.k_remaining -= 1;

        let new_version = surrogates.len() - 1;
        let new_surrogate = Arc::clone(&surrogates[new_version]);
        let (k_bridge, beta_bridge) = if state.frozen {
            (k, beta_k)
        } else {
            entropy::solve_bridge(
                records.len(),
                |kp| {
                    let r = &records[kp];
                    Ok(BridgeAtoms {
                        beta_old: r.beta_k,
                        old_scores: r.scores.clone(),
                        new_scores: eval.scores(&new_surrogate, &r.states),
                        new_errors: eval.errors(&new_surrogate, &r.states),
                    })
                },
                &budget,
            )?
        };

        trace.push(TraceRow {
            k,
            beta_k,
            log_z: cloud.log_z,
            ent_surrogate,
            phase: state.phase,
            snapshot_y: y,
            true_score: s_star,
            k_bridge,
            beta_bridge,
            tempering_steps: outcome.betas.len() - 1,
            surrogate_version: version,
        });
        beta_paths.push(outcome.betas);
        step_entropies.push(outcome.step_entropies);

        if state.k_remaining > 0 {
            let record = &records[k_bridge];
            let new_scores = eval.scores(&new_surrogate, &record.states);
            let log_g: Vec<f64> = new_scores
                .iter()
                .zip(&record.scores)
                .map(|(n, o)| beta_bridge * n - record.beta_k * o)
                .collect();
            let mut next = ParticleCloud::from_states(
                record.states.clone(),
                record.beta_k,
                record.log_z,
                cloud.seed(),
                cloud.epoch(),
            );
            next.reweight_resample(&log_g)?;
            next.beta = beta_bridge;
            next.surrogate_version = new_version;
            smc::mh_mutate(
                &mut next,
                log_target(&eval, &new_surrogate, beta_bridge),
                config.m,
                &mut kernel,
            )?;
            cloud = next;
        }
        per_iteration.push(eval.reduced_evals() - evals_before);
    }

    Ok(RunResult {
        trace,
        estimators: acc,
        iterations: k,
        initial_snapshots: config.initial_snapshots,
        true_evals: truth.true_evals(),
        reduced_evals: eval.reduced_evals(),
        reduced_evals_per_iteration: per_iteration,
        error_oracle_evals: truth.error_oracle_evals(),
        target_reached: state.j > 0,
        frozen_at,
        surrogate: Arc::clone(surrogates.last().expect("at least one surrogate")),
        beta_paths,
        step_entropies,
    })
}
