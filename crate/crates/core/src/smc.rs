//! Particle cloud mechanics: reweighting, systematic resampling, adaptive
//! random-walk Metropolis mutation and the running normalization estimate.
//!
//! Every random draw comes from a stream keyed by `(seed, epoch, lane)`,
//! where the epoch advances with each randomized operation on a cloud and
//! the lane is the particle index (or a reserved lane for cloud-level draws).
//! Results therefore do not depend on how particles are split across threads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{ArtError, Result};
use crate::models::ReferenceDistribution;

const CLOUD_LANE: u64 = u64::MAX;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic random stream for `(seed, epoch, lane)`.
pub fn stream(seed: u64, epoch: u64, lane: u64) -> ChaCha8Rng {
    let key = splitmix64(splitmix64(splitmix64(seed) ^ epoch) ^ lane);
    ChaCha8Rng::seed_from_u64(key)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParticleCloud {
    /// Particle positions in the log coordinate.
    pub states: Vec<f64>,
    pub beta: f64,
    /// Running estimate of `ln Z` at `beta`.
    pub log_z: f64,
    pub surrogate_version: usize,
    seed: u64,
    epoch: u64,
}

impl ParticleCloud {
    /// `n` i.i.d. draws from the reference at `beta = 0`.
    pub fn init(n: usize, reference: &ReferenceDistribution, seed: u64) -> Result<Self> {
        if n < 2 {
            return Err(ArtError::InvalidArgument(format!(
                "a cloud needs at least 2 particles, got {n}"
            )));
        }
        let states = (0..n as u64)
            .map(|i| reference.sample(&mut stream(seed, 0, i)))
            .collect();
        Ok(Self {
            states,
            beta: 0.0,
            log_z: 0.0,
            surrogate_version: 0,
            seed,
            epoch: 1,
        })
    }

    /// Cloud with given states; used when restarting from a stored record.
    pub fn from_states(states: Vec<f64>, beta: f64, log_z: f64, seed: u64, epoch: u64) -> Self {
        Self {
            states,
            beta,
            log_z,
            surrogate_version: 0,
            seed,
            epoch,
        }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn mean(&self) -> f64 {
        self.states.iter().sum::<f64>() / self.states.len() as f64
    }

    fn next_epoch(&mut self) -> u64 {
        let e = self.epoch;
        self.epoch += 1;
        e
    }

    /// Random stream for one cloud-level draw (resampling offset, snapshot pick).
    pub fn cloud_rng(&mut self) -> ChaCha8Rng {
        let e = self.next_epoch();
        stream(self.seed, e, CLOUD_LANE)
    }

    /// Potentials `G = exp(log_g)`, then log-normalization update, then
    /// systematic resampling. Returns the ancestor indices.
    pub fn reweight_resample(&mut self, log_g: &[f64]) -> Result<Vec<usize>> {
        let pot = Potentials::from_log(log_g);
        self.update_log_z(&pot);
        let u: f64 = self.cloud_rng().random();
        let ancestors = systematic_resample(&pot.values, u)?;
        self.states = ancestors.iter().map(|&a| self.states[a]).collect();
        Ok(ancestors)
    }

    /// `log_z += ln((1/N) sum G)`, compensating the potentials' max-shift.
    pub fn update_log_z(&mut self, pot: &Potentials) {
        self.log_z += pot.log_mean();
    }
}

/// Potentials stored as `exp(log_g - shift)` with the shift kept aside.
#[derive(Debug, Clone, PartialEq)]
pub struct Potentials {
    pub values: Vec<f64>,
    pub log_shift: f64,
}

impl Potentials {
    pub fn from_log(log_g: &[f64]) -> Self {
        let shift = log_g.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let shift = if shift.is_finite() { shift } else { 0.0 };
        Self {
            values: log_g.iter().map(|l| (l - shift).exp()).collect(),
            log_shift: shift,
        }
    }

    /// `ln((1/N) sum_i G_i)`.
    pub fn log_mean(&self) -> f64 {
        let n = self.values.len() as f64;
        self.log_shift + (self.values.iter().sum::<f64>() / n).ln()
    }
}

/// Incremental tempering potentials `G_i = exp(delta_beta * S_i)`.
pub fn potential(scores: &[f64], delta_beta: f64) -> Result<Potentials> {
    if !(delta_beta >= 0.0) {
        return Err(ArtError::InvalidArgument(format!(
            "delta_beta must be >= 0, got {delta_beta}"
        )));
    }
    let log_g: Vec<f64> = scores.iter().map(|s| delta_beta * s).collect();
    Ok(Potentials::from_log(&log_g))
}

/// Systematic resampling: positions `(u + j) / N` inverted through the
/// cumulative normalized weights.
pub fn systematic_resample(weights: &[f64], u: f64) -> Result<Vec<usize>> {
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(ArtError::InvalidArgument(
            "weights must be finite and non-negative".into(),
        ));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(ArtError::ZeroWeights);
    }
    if !(0.0..1.0).contains(&u) {
        return Err(ArtError::InvalidArgument(format!(
            "u must lie in [0,1), got {u}"
        )));
    }
    let n = weights.len();
    let mut out = Vec::with_capacity(n);
    let mut cumulative = 0.0;
    let mut i = 0;
    for j in 0..n {
        let pos = (u + j as f64) / n as f64 * total;
        while i < n - 1 && cumulative + weights[i] <= pos {
            cumulative += weights[i];
            i += 1;
        }
        out.push(i);
    }
    Ok(out)
}

/// Adaptive Metropolis kernel on the log coordinate.
///
/// Proposal `y' = y - rho (y - ybar) + exp(log_step) xi`, with `ybar` the
/// cloud mean frozen for the sweep. `rho = 0` is a symmetric random walk.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MutationKernel {
    pub log_step: f64,
    pub target_accept: f64,
    /// Robbins–Monro gain; the sweep-`n` step is `adapt_rate_constant / sqrt(n)`.
    pub adapt_rate_constant: f64,
    pub rho: f64,
}

impl Default for MutationKernel {
    fn default() -> Self {
        Self {
            log_step: 0.0,
            target_accept: 0.44,
            adapt_rate_constant: 1.0,
            rho: 0.0,
        }
    }
}

impl MutationKernel {
    pub fn validate(&self) -> Result<()> {
        let ok = self.target_accept > 0.0
            && self.target_accept < 1.0
            && self.log_step.exp() > 0.0
            && self.log_step.exp().is_finite()
            && (0.0..1.0).contains(&self.rho);
        if ok {
            Ok(())
        } else {
            Err(ArtError::InvalidArgument(format!(
                "invalid mutation kernel {self:?}"
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MutationStats {
    /// Acceptance rate of each sweep.
    pub acceptance: Vec<f64>,
    /// Number of log-target evaluations.
    pub evaluations: u64,
}

/// `m` Metropolis sweeps over the cloud, each particle on its own stream,
/// adapting `log_step` after every sweep from the cloud-wide acceptance.
pub fn mh_mutate<F>(
    cloud: &mut ParticleCloud,
    log_target: F,
    m: usize,
    kernel: &mut MutationKernel,
) -> Result<MutationStats>
where
    F: Fn(f64) -> f64 + Sync,
{
    if m == 0 {
        return Err(ArtError::InvalidArgument("m must be >= 1".into()));
    }
    kernel.validate()?;
    let epoch = cloud.next_epoch();
    let seed = cloud.seed;
    let n = cloud.states.len();
    let mut rngs: Vec<ChaCha8Rng> = (0..n as u64).map(|i| stream(seed, epoch, i)).collect();
    let mut current: Vec<f64> = cloud.states.par_iter().map(|&y| log_target(y)).collect();
    let mut acceptance = Vec::with_capacity(m);
    let rho = kernel.rho;

    for sweep in 1..=m {
        let step = kernel.log_step.exp();
        let ybar = cloud.mean();
        let accepted: usize = cloud
            .states
            .par_iter_mut()
            .zip(current.par_iter_mut())
            .zip(rngs.par_iter_mut())
            .with_min_len(256)
            .map(|((y, lp), rng)| {
                let xi: f64 = rng.sample(StandardNormal);
                let proposal = *y - rho * (*y - ybar) + step * xi;
                let lp_new = log_target(proposal);
                let mut log_ratio = lp_new - *lp;
                if rho > 0.0 {
                    // q(y | y') / q(y' | y) for the mean-reverting proposal
                    let fwd = proposal - (*y - rho * (*y - ybar));
                    let bwd = *y - (proposal - rho * (proposal - ybar));
                    log_ratio += (fwd * fwd - bwd * bwd) / (2.0 * step * step);
                }
                let u: f64 = rng.random();
                if log_ratio >= 0.0 || u.ln() < log_ratio {
                    *y = proposal;
                    *lp = lp_new;
                    1
                } else {
                    0
                }
            })
            .sum();
        let rate = accepted as f64 / n as f64;
        acceptance.push(rate);
        kernel.log_step +=
            kernel.adapt_rate_constant / (sweep as f64).sqrt() * (rate - kernel.target_accept);
    }
    Ok(MutationStats {
        acceptance,
        evaluations: (n * (m + 1)) as u64,
    })
}

/// Weights for [`weighted_empirical_mean`].
#[derive(Debug, Clone, Copy)]
pub enum Weights<'a> {
    Linear(&'a [f64]),
    Log(&'a [f64]),
}

/// `sum_i wbar_i f_i` with normalized weights.
pub fn weighted_empirical_mean(values: &[f64], weights: Weights<'_>) -> Result<f64> {
    let w: Vec<f64> = match weights {
        Weights::Linear(w) => w.to_vec(),
        Weights::Log(lw) => Potentials::from_log(lw).values,
    };
    if w.len() != values.len() {
        return Err(ArtError::InvalidArgument(
            "weights and values differ in length".into(),
        ));
    }
    let total: f64 = w.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(ArtError::ZeroWeights);
    }
    Ok(values.iter().zip(&w).map(|(v, w)| v * w).sum::<f64>() / total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn init_validates_and_is_deterministic() {
        let r = ReferenceDistribution::default();
        assert!(ParticleCloud::init(1, &r, 0).is_err());
        let a = ParticleCloud::init(1000, &r, 42).unwrap();
        let b = ParticleCloud::init(1000, &r, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.beta, 0.0);
        assert_eq!(a.log_z, 0.0);
        let band = 4.0 * r.stddev / (1000f64).sqrt();
        assert!((a.mean() - r.mean).abs() < band);
    }

    #[test]
    fn potentials_examples() {
        let p = potential(&[0.3, -2.0, 5.0], 0.0).unwrap();
        assert!(p.values.iter().all(|v| *v == 1.0));
        let c = potential(&[2.0; 4], 0.7).unwrap();
        assert!(c.values.iter().all(|v| *v == c.values[0]));
        assert!((c.log_mean() - 1.4).abs() < 1e-15);
        let two = potential(&[0.0, 1.0], 2f64.ln()).unwrap();
        assert!((two.values[1] / two.values[0] - 2.0).abs() < 1e-15);
        assert!(potential(&[1.0], -0.1).is_err());
    }

    #[test]
    fn log_z_updates() {
        let r = ReferenceDistribution::default();
        let mut cloud = ParticleCloud::init(10, &r, 1).unwrap();
        cloud.update_log_z(&potential(&[0.3; 10], 0.0).unwrap());
        assert_eq!(cloud.log_z, 0.0);
        cloud.update_log_z(&potential(&[-3.0; 10], 0.25).unwrap());
        assert!((cloud.log_z + 0.75).abs() < 1e-15);
    }

    #[test]
    fn resample_examples() {
        for u in [0.0, 0.3, 0.999] {
            let idx = systematic_resample(&[1.0; 7], u).unwrap();
            assert_eq!(idx, (0..7).collect::<Vec<_>>());
        }
        let mut w = vec![0.0; 5];
        w[0] = 1.0;
        assert_eq!(systematic_resample(&w, 0.6).unwrap(), vec![0; 5]);
        assert_eq!(
            systematic_resample(&[0.5, 0.5, 0.0, 0.0], 0.1).unwrap(),
            vec![0, 0, 1, 1]
        );
        assert!(matches!(
            systematic_resample(&[0.0, 0.0], 0.5),
            Err(ArtError::ZeroWeights)
        ));
        assert!(systematic_resample(&[1.0, -0.1], 0.5).is_err());
    }

    #[test]
    fn resampling_is_unbiased_over_u() {
        let w = [0.05, 0.3, 0.0, 0.17, 0.48];
        let n = w.len();
        let grid = 10_000;
        let mut counts = vec![0.0; n];
        for g in 0..grid {
            let u = (g as f64 + 0.5) / grid as f64;
            for a in systematic_resample(&w, u).unwrap() {
                counts[a] += 1.0 / grid as f64;
            }
        }
        for (c, wi) in counts.iter().zip(&w) {
            assert!((c - n as f64 * wi).abs() < 1e-3, "{c} vs {}", n as f64 * wi);
        }
    }

    #[test]
    fn mutation_rejects_zero_sweeps() {
        let r = ReferenceDistribution::default();
        let mut cloud = ParticleCloud::init(10, &r, 1).unwrap();
        let mut k = MutationKernel::default();
        assert!(mh_mutate(&mut cloud, |y| r.ln_density(y), 0, &mut k).is_err());
    }

    #[test]
    fn mutation_preserves_reference() {
        let r = ReferenceDistribution::default();
        let mut cloud = ParticleCloud::init(4000, &r, 5).unwrap();
        let mut k = MutationKernel::default();
        mh_mutate(&mut cloud, |y| r.ln_density(y), 50, &mut k).unwrap();
        let n = cloud.len() as f64;
        let mean = cloud.mean();
        let var = cloud.states.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n;
        // particles are independent across the cloud
        assert!((mean - r.mean).abs() < 4.0 * r.stddev / n.sqrt());
        assert!((var / (r.stddev * r.stddev) - 1.0).abs() < 4.0 * (2.0 / n).sqrt());
    }

    #[test]
    fn mean_reverting_proposal_preserves_reference() {
        let r = ReferenceDistribution::default();
        let mut cloud = ParticleCloud::init(4000, &r, 6).unwrap();
        let mut k = MutationKernel {
            rho: 0.5,
            ..MutationKernel::default()
        };
        mh_mutate(&mut cloud, |y| r.ln_density(y), 50, &mut k).unwrap();
        let n = cloud.len() as f64;
        let mean = cloud.mean();
        let var = cloud.states.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n;
        assert!((mean - r.mean).abs() < 4.0 * r.stddev / n.sqrt());
        assert!((var / (r.stddev * r.stddev) - 1.0).abs() < 4.0 * (2.0 / n).sqrt());
    }

    #[test]
    fn step_adaptation_reaches_target_rate() {
        let r = ReferenceDistribution::default();
        let mut rates = Vec::new();
        for seed in 0..5 {
            let mut cloud = ParticleCloud::init(500, &r, seed).unwrap();
            let mut k = MutationKernel {
                log_step: r.stddev.ln() + 3.0,
                ..MutationKernel::default()
            };
            let stats = mh_mutate(&mut cloud, |y| r.ln_density(y), 200, &mut k).unwrap();
            let tail = &stats.acceptance[180..];
            rates.push(tail.iter().sum::<f64>() / tail.len() as f64);
        }
        let avg = rates.iter().sum::<f64>() / rates.len() as f64;
        assert!((avg - 0.44).abs() < 0.1, "acceptance {avg}");
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let r = ReferenceDistribution::default();
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            pool.install(|| {
                let mut cloud = ParticleCloud::init(300, &r, 9).unwrap();
                let mut k = MutationKernel::default();
                mh_mutate(&mut cloud, |y| r.ln_density(y) + 0.3 * y, 20, &mut k).unwrap();
                cloud.reweight_resample(&cloud.states.clone()).unwrap();
                (cloud, k)
            })
        };
        let (a, ka) = run(1);
        let (b, kb) = run(4);
        assert_eq!(a, b);
        assert_eq!(ka, kb);
    }

    #[test]
    fn weighted_means() {
        assert_eq!(
            weighted_empirical_mean(&[1.0, 1.0, 1.0], Weights::Linear(&[0.2, 3.0, 1.0])).unwrap(),
            1.0
        );
        assert_eq!(
            weighted_empirical_mean(&[2.0, 5.0], Weights::Linear(&[1.0, 1.0])).unwrap(),
            3.5
        );
        assert_eq!(
            weighted_empirical_mean(&[0.0, 4.0], Weights::Linear(&[1.0, 3.0])).unwrap(),
            3.0
        );
        let lw = [1000.0, 1000.0 + 3f64.ln()];
        assert!(
            (weighted_empirical_mean(&[0.0, 4.0], Weights::Log(&lw)).unwrap() - 3.0).abs() < 1e-12
        );
        assert!(matches!(
            weighted_empirical_mean(&[1.0], Weights::Linear(&[0.0])),
            Err(ArtError::ZeroWeights)
        ));
    }

    proptest! {
        #[test]
        fn resample_counts_are_floor_or_ceil(
            w in prop::collection::vec(0.0f64..1.0, 2..40),
            u in 0.0f64..1.0,
        ) {
            let total: f64 = w.iter().sum();
            prop_assume!(total > 1e-6);
            let n = w.len();
            let idx = systematic_resample(&w, u).unwrap();
            prop_assert_eq!(idx.len(), n);
            let mut counts = vec![0usize; n];
            for i in idx { counts[i] += 1; }
            for (c, wi) in counts.iter().zip(&w) {
                let expected = n as f64 * wi / total;
                prop_assert!(
                    (*c as f64) >= expected.floor() - 1e-9 && (*c as f64) <= expected.ceil() + 1e-9
                    || (expected - expected.round()).abs() < 1e-9 && (*c as f64 - expected).abs() <= 1.0,
                    "count {} expected {}", c, expected
                );
            }
        }
    }
}
