//! Empirical relative-entropy criteria on a particle cloud and the 1-D
//! solvers built on them.
//!
//! Every estimator is the exact KL divergence between two tilts of the
//! empirical measure, computed by [`tilted_kl`]. This makes all of them
//! non-negative and invariant to adding constants to the score.

use crate::error::{ArtError, Result};

/// Absolute tolerance on the entropy when solving for the next temperature.
pub const ENTROPY_TOL: f64 = 1e-10;
/// Secondary stop on the width of the temperature bracket.
pub const BETA_TOL: f64 = 1e-12;
pub const DEFAULT_BRIDGE_GRID: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntropyBudget {
    /// Worst-case log-cost threshold.
    pub c1: f64,
    /// Tempering step threshold.
    pub c2: f64,
    pub epsilon_stop: f64,
    pub beta_infinity: f64,
    pub bridge_grid: usize,
}

impl EntropyBudget {
    pub fn new(c1: f64, c2: f64, epsilon_stop: f64, beta_infinity: f64) -> Result<Self> {
        let b = Self {
            c1,
            c2,
            epsilon_stop,
            beta_infinity,
            bridge_grid: DEFAULT_BRIDGE_GRID,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.c1 >= 0.0
            && self.c2 >= 0.0
            && self.epsilon_stop > 0.0
            && self.beta_infinity > 0.0
            && self.beta_infinity.is_finite()
            && self.bridge_grid >= 2;
        if ok {
            Ok(())
        } else {
            Err(ArtError::InvalidArgument(format!(
                "invalid entropy budget {self:?}"
            )))
        }
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `KL(P_b || P_a)` where `P_a ∝ exp(a_i)` and `P_b ∝ exp(b_i)` on the same atoms.
pub fn tilted_kl(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    // KL is unchanged by shifting b; centering b - a keeps constant tilts exact.
    let shift = a.iter().zip(b).map(|(a, b)| b - a).sum::<f64>() / a.len() as f64;
    let b: Vec<f64> = b.iter().map(|v| v - shift).collect();
    let b_max = b.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (mut total, mut weighted) = (0.0, 0.0);
    for (ai, bi) in a.iter().zip(&b) {
        let w = (bi - b_max).exp();
        total += w;
        weighted += w * (bi - ai);
    }
    let lb = b_max + total.ln();
    let la = if a.iter().all(|&v| v == a[0]) {
        a[0] + (a.len() as f64).ln()
    } else {
        log_sum_exp(a)
    };
    (weighted / total - (lb - la)).max(0.0)
}

/// Tempering-step criterion: entropy of `exp(delta_beta * S) mu` relative to `mu`.
pub fn ent_temper_step(scores: &[f64], delta_beta: f64) -> f64 {
    if delta_beta == 0.0 {
        return 0.0;
    }
    let a = vec![0.0; scores.len()];
    let b: Vec<f64> = scores.iter().map(|s| delta_beta * s).collect();
    tilted_kl(&a, &b)
}

/// Worst-case log cost at `beta = beta_i + delta_beta`: entropy of the
/// error-penalized tilt `exp(delta_beta S - beta E) mu` relative to
/// `exp(delta_beta S) mu`.
pub fn ent_surrogate_target(scores: &[f64], errors: &[f64], beta_i: f64, delta_beta: f64) -> f64 {
    let beta = beta_i + delta_beta;
    let a: Vec<f64> = scores.iter().map(|s| delta_beta * s).collect();
    let b: Vec<f64> = a.iter().zip(errors).map(|(a, e)| a - beta * e).collect();
    tilted_kl(&a, &b)
}

/// Next inverse temperature: the root of `ent_temper_step = c2` above
/// `beta_i`, or `beta_infinity` when the criterion is not reached there.
pub fn solve_next_beta(scores: &[f64], beta_i: f64, budget: &EntropyBudget) -> Result<f64> {
    let span = budget.beta_infinity - beta_i;
    if !(span > 0.0) {
        return Err(ArtError::InvalidArgument(format!(
            "beta_i = {beta_i} is not below beta_infinity = {}",
            budget.beta_infinity
        )));
    }
    let f = |d: f64| ent_temper_step(scores, d) - budget.c2;
    if f(span) <= 0.0 {
        return Ok(budget.beta_infinity);
    }
    let (mut lo, mut hi) = (0.0, span);
    loop {
        let mid = 0.5 * (lo + hi);
        let v = f(mid);
        if v.abs() <= ENTROPY_TOL || hi - lo <= BETA_TOL {
            return Ok(beta_i + mid);
        }
        if v > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
}

/// Accept the step to `beta_i + delta_beta` when the worst-case log cost is at most `c1`.
pub fn critical_accept(
    scores: &[f64],
    errors: &[f64],
    beta_i: f64,
    delta_beta: f64,
    budget: &EntropyBudget,
) -> bool {
    ent_surrogate_target(scores, errors, beta_i, delta_beta) <= budget.c1
}

/// A stored proposal cloud seen through a newer surrogate.
#[derive(Debug, Clone, PartialEq)]
pub struct BridgeAtoms {
    /// Temperature of the stored proposal.
    pub beta_old: f64,
    /// Stored proposal's surrogate score on its atoms.
    pub old_scores: Vec<f64>,
    /// New surrogate score on the same atoms.
    pub new_scores: Vec<f64>,
    /// New surrogate error on the same atoms.
    pub new_errors: Vec<f64>,
}

impl BridgeAtoms {
    /// Log potential `phi = beta S_new - beta_old S_old` on the atoms.
    pub fn phi(&self, beta: f64) -> Vec<f64> {
        self.new_scores
            .iter()
            .zip(&self.old_scores)
            .map(|(n, o)| beta * n - self.beta_old * o)
            .collect()
    }
}

/// Entropic step criterion for moving the stored proposal to `beta`.
pub fn ent_bridge_move(atoms: &BridgeAtoms, beta: f64) -> f64 {
    let phi = atoms.phi(beta);
    tilted_kl(&vec![0.0; phi.len()], &phi)
}

/// Worst-case log cost of the bridged law at `beta` under the new surrogate.
pub fn ent_bridge_cost(atoms: &BridgeAtoms, beta: f64) -> f64 {
    let phi = atoms.phi(beta);
    let b: Vec<f64> = phi
        .iter()
        .zip(&atoms.new_errors)
        .map(|(p, e)| p - beta * e)
        .collect();
    tilted_kl(&phi, &b)
}

fn bridge_feasible(atoms: &BridgeAtoms, beta: f64, budget: &EntropyBudget) -> bool {
    ent_bridge_move(atoms, beta) <= budget.c2 && ent_bridge_cost(atoms, beta) <= budget.c1
}

/// Largest feasible temperature for one stored proposal, if any.
///
/// Scans a uniform grid on `[beta_old, beta_infinity]` from the top; the
/// first feasible point is pushed up by bisection toward its infeasible
/// upper neighbour.
pub fn bridge_beta(atoms: &BridgeAtoms, budget: &EntropyBudget) -> Option<f64> {
    let lo = atoms.beta_old;
    let hi = budget.beta_infinity;
    if lo >= hi {
        return bridge_feasible(atoms, hi, budget).then_some(hi);
    }
    let n = budget.bridge_grid;
    let grid = |i: usize| {
        if i == n - 1 {
            hi
        } else {
            lo + (hi - lo) * i as f64 / (n - 1) as f64
        }
    };
    for i in (0..n).rev() {
        let b = grid(i);
        if !bridge_feasible(atoms, b, budget) {
            continue;
        }
        if i == n - 1 {
            return Some(hi);
        }
        let (mut ok, mut bad) = (b, grid(i + 1));
        while bad - ok > BETA_TOL * (1.0 + bad.abs()) {
            let mid = 0.5 * (ok + bad);
            if bridge_feasible(atoms, mid, budget) {
                ok = mid;
            } else {
                bad = mid;
            }
        }
        return Some(ok);
    }
    None
}

/// Bridging pair `(k, beta)`: the newest stored proposal admitting a
/// feasible temperature, and its largest feasible temperature.
///
/// `atoms_for(k)` supplies record `k` seen through the new surrogate; it is
/// called newest first and only as far back as needed. Record 0 is the
/// reference at `beta = 0`, which is always feasible at `0`.
pub fn solve_bridge<F>(
    n_records: usize,
    mut atoms_for: F,
    budget: &EntropyBudget,
) -> Result<(usize, f64)>
where
    F: FnMut(usize) -> Result<BridgeAtoms>,
{
    if n_records == 0 {
        return Err(ArtError::InvalidArgument(
            "bridging needs the k = 0 record".into(),
        ));
    }
    for k in (0..n_records).rev() {
        let atoms = atoms_for(k)?;
        if let Some(beta) = bridge_beta(&atoms, budget) {
            return Ok((k, beta));
        }
        if k == 0 {
            return Ok((0, 0.0));
        }
    }
    unreachable!("the loop returns at k = 0")
}
