//! Snapshot importance sampling with exact proposals and exact
//! normalizations, used to check unbiasedness and the `1/H` variance decay.
//!
//! Proposals are `exp(beta S_p) pi` for a fixed cycle of reduced scores
//! `S_p`, sampled by inverse CDF on a fine grid; `Z_p` comes from quadrature.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{ArtError, Result};
use crate::models::{ProblemSpec, ReferenceDistribution};
use crate::quadrature::{self, gauss_legendre, WINDOW_SIGMAS};
use crate::smc::stream;
use crate::surrogate::{Snapshot, SplineSurrogate};

const GRID_CELLS: usize = 1 << 16;
const CELL_NODES: usize = 5;

/// Exact sampler for a density known up to normalization on a window.
#[derive(Debug, Clone)]
pub struct GridSampler {
    lo: f64,
    width: f64,
    /// Unnormalized density at cell edges.
    edge_density: Vec<f64>,
    /// Cumulative normalized cell masses, one per cell.
    cumulative: Vec<f64>,
}

impl GridSampler {
    pub fn new<F: Fn(f64) -> f64>(density: F, lo: f64, hi: f64) -> Result<Self> {
        let width = (hi - lo) / GRID_CELLS as f64;
        let (nodes, weights) = gauss_legendre(CELL_NODES);
        let edge_density: Vec<f64> = (0..=GRID_CELLS)
            .map(|i| density(lo + width * i as f64))
            .collect();
        let mut cumulative = Vec::with_capacity(GRID_CELLS);
        let mut total = 0.0;
        for i in 0..GRID_CELLS {
            let mid = lo + width * (i as f64 + 0.5);
            let mass: f64 = nodes
                .iter()
                .zip(&weights)
                .map(|(x, w)| w * density(mid + 0.5 * width * x))
                .sum::<f64>()
                * 0.5
                * width;
            total += mass;
            cumulative.push(total);
        }
        if !(total > 0.0) || !total.is_finite() {
            return Err(ArtError::ZeroWeights);
        }
        for c in &mut cumulative {
            *c /= total;
        }
        Ok(Self {
            lo,
            width,
            edge_density,
            cumulative,
        })
    }

    /// Pick a cell by its exact mass, then invert the linear density
    /// interpolation inside it.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        let cell = self
            .cumulative
            .partition_point(|&c| c < u)
            .min(GRID_CELLS - 1);
        let (a, b) = (self.edge_density[cell], self.edge_density[cell + 1]);
        let v: f64 = rng.random();
        let t = if (b - a).abs() <= 1e-12 * (a + b) {
            v
        } else {
            // solve a t + (b - a) t^2 / 2 = v (a + b) / 2 for t in [0, 1]
            let disc = a * a + v * (b * b - a * a);
            (disc.max(0.0).sqrt() - a) / (b - a)
        };
        self.lo + self.width * (cell as f64 + t.clamp(0.0, 1.0))
    }
}

/// Reduced score used in the idealized schedule.
pub type ScoreFn = Box<dyn Fn(f64) -> f64 + Send + Sync>;

pub struct IdealProposal {
    pub score: ScoreFn,
    pub z: f64,
    sampler: GridSampler,
}

/// Exact proposal `exp(beta S) pi` and its normalization.
pub fn ideal_proposal(spec: &ProblemSpec, score: ScoreFn, beta: f64) -> Result<IdealProposal> {
    let r = spec.reference;
    let bp = spec.psi.breakpoints();
    let z = quadrature::quadrature_z(&r, &score, beta, &bp)?;
    let lo = r.mean - WINDOW_SIGMAS * r.stddev;
    let hi = r.mean + WINDOW_SIGMAS * r.stddev;
    let sampler = GridSampler::new(|y| (beta * score(y) + r.ln_density(y)).exp(), lo, hi)?;
    Ok(IdealProposal { score, z, sampler })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrefixStats {
    pub h: usize,
    pub mean: f64,
    pub variance: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObservableReport {
    pub name: String,
    pub truth: f64,
    pub prefixes: Vec<PrefixStats>,
}

impl ObservableReport {
    pub fn at(&self, h: usize) -> Option<&PrefixStats> {
        self.prefixes.iter().find(|p| p.h == h)
    }

    /// `Var(H = long) / Var(H = short)`.
    pub fn variance_ratio(&self, short: usize, long: usize) -> Option<f64> {
        Some(self.at(long)?.variance / self.at(short)?.variance)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdealizedReport {
    pub replicates: usize,
    pub h: usize,
    pub observables: Vec<ObservableReport>,
}

/// Observable with its exact target value `gamma*(phi)` (shifted).
pub struct Observable {
    pub name: String,
    pub phi: Box<dyn Fn(f64) -> f64 + Send + Sync>,
    pub truth: f64,
}

/// Replicated snapshot-IS estimates `gamma_H(phi)` with `H` snapshots per
/// replicate, snapshot `k` drawn from proposal `k mod P`. Statistics are
/// reported for every prefix length in `prefixes`.
pub fn idealized_unbiasedness_harness(
    spec: &ProblemSpec,
    proposals: &[IdealProposal],
    observables: &[Observable],
    h: usize,
    prefixes: &[usize],
    replicates: usize,
    seed: u64,
) -> Result<IdealizedReport> {
    if proposals.is_empty() || h == 0 || replicates < 2 {
        return Err(ArtError::InvalidArgument(
            "need proposals, h >= 1 and at least 2 replicates".into(),
        ));
    }
    if prefixes.iter().any(|&p| p == 0 || p > h) {
        return Err(ArtError::InvalidArgument(format!(
            "prefixes must lie in 1..={h}"
        )));
    }
    let beta = spec.beta_infinity;
    let shift = beta * spec.score_max();
    let true_score = |y: f64| spec.score(spec.psi.eval_y(y));

    // per replicate, per observable, running sums at each prefix
    let runs: Vec<Vec<Vec<f64>>> = (0..replicates)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream(seed ^ r as u64, 0, 0);
            let mut sums = vec![0.0; observables.len()];
            let mut at_prefix = vec![Vec::with_capacity(prefixes.len()); observables.len()];
            for k in 0..h {
                let p = &proposals[k % proposals.len()];
                let y = p.sampler.sample(&mut rng);
                let w = p.z * (beta * true_score(y) - beta * (p.score)(y) - shift).exp();
                for (o, obs) in observables.iter().enumerate() {
                    sums[o] += w * (obs.phi)(y);
                    if prefixes.contains(&(k + 1)) {
                        at_prefix[o].push(sums[o] / (k + 1) as f64);
                    }
                }
            }
            at_prefix
        })
        .collect();

    let observables = observables
        .iter()
        .enumerate()
        .map(|(o, obs)| {
            let prefixes = prefixes
                .iter()
                .enumerate()
                .map(|(pi, &len)| {
                    let vals: Vec<f64> = runs.iter().map(|run| run[o][pi]).collect();
                    let n = vals.len() as f64;
                    let mean = vals.iter().sum::<f64>() / n;
                    let variance = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
                    PrefixStats {
                        h: len,
                        mean,
                        variance,
                        std_error: (variance / n).sqrt(),
                    }
                })
                .collect();
            ObservableReport {
                name: obs.name.clone(),
                truth: obs.truth,
                prefixes,
            }
        })
        .collect();
    Ok(IdealizedReport {
        replicates,
        h,
        observables,
    })
}

/// Default schedule: `count` splines of `Psi*` on nested deterministic knot
/// sets, coarse to fine, all crossing the plateau edge.
pub fn default_surrogates(spec: &ProblemSpec, count: usize) -> Result<Vec<ScoreFn>> {
    let r: ReferenceDistribution = spec.reference;
    (0..count)
        .map(|p| {
            let knots = 6 + 3 * p;
            let lo = r.mean - 5.0 * r.stddev;
            let hi = r.mean + 3.0 * r.stddev;
            let snaps: Vec<Snapshot> = (0..knots)
                .map(|i| {
                    let y = lo + (hi - lo) * i as f64 / (knots - 1) as f64;
                    Snapshot {
                        y,
                        psi_star: spec.psi.eval_y(y),
                        iteration: 0,
                    }
                })
                .collect();
            let s = SplineSurrogate::fit(&snaps, 1e-9)?;
            let spec = spec.clone();
            let f: ScoreFn = Box::new(move |y| spec.score(s.eval(y)));
            Ok(f)
        })
        .collect()
}

/// The two standard observables: `1` and `1{y > reference mean}`.
pub fn default_observables(spec: &ProblemSpec) -> Result<Vec<Observable>> {
    let beta = spec.beta_infinity;
    let shift = beta * spec.score_max();
    let m = spec.reference.mean;
    let spec_a = spec.clone();
    let total = spec.quadrature_z(
        |y| spec_a.score(spec_a.psi.eval_y(y)) - spec_a.score_max(),
        beta,
    )?;
    let spec_b = spec.clone();
    let mut bp = spec.psi.breakpoints();
    bp.push(m);
    let upper = quadrature::quadrature_z(
        &spec.reference,
        |y| {
            if y > m {
                spec_b.score(spec_b.psi.eval_y(y)) - shift / beta
            } else {
                f64::NEG_INFINITY
            }
        },
        beta,
        &bp,
    )?;
    Ok(vec![
        Observable {
            name: "one".into(),
            phi: Box::new(|_| 1.0),
            truth: total,
        },
        Observable {
            name: "above_median".into(),
            phi: Box::new(move |y| if y > m { 1.0 } else { 0.0 }),
            truth: upper,
        },
    ])
}
