//! Adaptive SMC tempering with the true score everywhere: the reference
//! method ART is compared against.

use crate::driver::WeightedSample;
use crate::entropy::{self, EntropyBudget};
use crate::error::Result;
use crate::models::{ReferenceDistribution, TrueModel};
use crate::smc::{self, MutationKernel, ParticleCloud};

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineResult {
    /// `ln pi(exp(beta_inf S*))`, unshifted.
    pub log_z: f64,
    /// Final cloud, equally weighted.
    pub sample: WeightedSample,
    pub true_evals: u64,
    pub steps: usize,
    pub betas: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaselineConfig {
    pub n: usize,
    pub c2: f64,
    pub m: usize,
    pub seed: u64,
    pub target_accept: f64,
    pub rho: f64,
}

/// Temper from the reference to `beta_infinity` with the `c2` step rule,
/// evaluating the true score (and paying for it) at every particle operation.
pub fn baseline_adaptive_smc(truth: &TrueModel, config: &BaselineConfig) -> Result<BaselineResult> {
    let spec = truth.spec();
    let start = truth.true_evals();
    let mut out = adaptive_tempering(
        &spec.reference,
        |y| truth.score(y),
        spec.beta_infinity,
        config,
    )?;
    out.true_evals = truth.true_evals() - start;
    Ok(out)
}

/// Adaptive SMC tempering of `exp(beta score) reference` from `beta = 0` to
/// `beta_infinity`. `true_evals` counts calls to `score`.
pub fn adaptive_tempering<F>(
    reference: &ReferenceDistribution,
    score: F,
    beta_infinity: f64,
    config: &BaselineConfig,
) -> Result<BaselineResult>
where
    F: Fn(f64) -> f64 + Sync,
{
    let reference = *reference;
    let budget = EntropyBudget {
        c1: f64::INFINITY,
        c2: config.c2,
        epsilon_stop: 1.0,
        beta_infinity,
        bridge_grid: 2,
    };
    let mut cloud = ParticleCloud::init(config.n, &reference, config.seed)?;
    let mut kernel = MutationKernel {
        log_step: reference.stddev.ln(),
        target_accept: config.target_accept,
        adapt_rate_constant: 1.0,
        rho: config.rho,
    };
    kernel.validate()?;
    let n = config.n as u64;
    let mut evals = n;
    let mut betas = vec![0.0];
    let mut scores: Vec<f64> = cloud.states.iter().map(|&y| score(y)).collect();
    while cloud.beta < beta_infinity {
        let next = entropy::solve_next_beta(&scores, cloud.beta, &budget)?;
        let delta = next - cloud.beta;
        let log_g: Vec<f64> = scores.iter().map(|s| delta * s).collect();
        cloud.reweight_resample(&log_g)?;
        cloud.beta = next;
        let stats = smc::mh_mutate(
            &mut cloud,
            |y| reference.ln_density(y) + next * score(y),
            config.m,
            &mut kernel,
        )?;
        betas.push(next);
        scores = cloud.states.iter().map(|&y| score(y)).collect();
        evals += stats.evaluations + n;
    }
    Ok(BaselineResult {
        log_z: cloud.log_z,
        sample: WeightedSample::uniform(cloud.states.clone()),
        true_evals: evals,
        steps: betas.len() - 1,
        betas,
    })
}
