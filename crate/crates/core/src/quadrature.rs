//! Adaptive composite Gauss–Legendre quadrature, used as the ground-truth
//! oracle for normalizations `pi(exp(beta * S))` of one-dimensional problems.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::f64::consts::PI;

use crate::error::{ArtError, Result};
use crate::models::ReferenceDistribution;

pub const REL_TOL: f64 = 1e-10;
pub const MAX_PANELS: usize = 1 << 20;
/// Half-width of the default integration window, in reference standard deviations.
pub const WINDOW_SIGMAS: f64 = 12.0;

const ORDER: usize = 20;
const INITIAL_PANELS: usize = 64;

/// Nodes and weights of the `n`-point Gauss–Legendre rule on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre_with_derivative(n, x);
        if d != 0.0 {
            dp = d;
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let k = k as f64;
        let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

struct Rule {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl Rule {
    fn new() -> Self {
        let (nodes, weights) = gauss_legendre(ORDER);
        Self { nodes, weights }
    }

    fn apply<F: Fn(f64) -> f64>(&self, f: &F, a: f64, b: f64) -> f64 {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(x, w)| w * f(mid + half * x))
            .sum::<f64>()
            * half
    }
}

struct Panel {
    a: f64,
    b: f64,
    value: f64,
    error: f64,
}

impl Panel {
    fn new<F: Fn(f64) -> f64>(rule: &Rule, f: &F, a: f64, b: f64) -> Self {
        let coarse = rule.apply(f, a, b);
        let m = 0.5 * (a + b);
        let fine = rule.apply(f, a, m) + rule.apply(f, m, b);
        Self {
            a,
            b,
            value: fine,
            error: (fine - coarse).abs(),
        }
    }
}

impl PartialEq for Panel {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Panel {}
impl PartialOrd for Panel {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Panel {
    fn cmp(&self, other: &Self) -> Ordering {
        self.error.total_cmp(&other.error)
    }
}

/// Integrate `f` over `[a, b]`, bisecting the panel with the largest
/// coarse/fine discrepancy until the summed discrepancy is below
/// `rel_tol * |integral|`. Interior `breakpoints` become panel edges.
pub fn integrate_adaptive<F: Fn(f64) -> f64>(
    f: F,
    a: f64,
    b: f64,
    breakpoints: &[f64],
    rel_tol: f64,
) -> Result<f64> {
    if !(a < b) {
        return Err(ArtError::InvalidArgument(format!(
            "empty interval [{a}, {b}]"
        )));
    }
    let rule = Rule::new();
    let mut edges: Vec<f64> = (0..=INITIAL_PANELS)
        .map(|i| a + (b - a) * i as f64 / INITIAL_PANELS as f64)
        .collect();
    edges.extend(breakpoints.iter().copied().filter(|&p| p > a && p < b));
    edges.sort_by(f64::total_cmp);
    edges.dedup();

    let mut heap: BinaryHeap<Panel> = edges
        .windows(2)
        .map(|w| Panel::new(&rule, &f, w[0], w[1]))
        .collect();

    loop {
        let (total, error) = heap
            .iter()
            .fold((0.0, 0.0), |(v, e), p| (v + p.value, e + p.error));
        if error <= rel_tol * total.abs() || error == 0.0 {
            return Ok(total);
        }
        if heap.len() >= MAX_PANELS {
            return Err(ArtError::QuadratureNonConvergence {
                panels: heap.len(),
                estimate: total,
                error,
            });
        }
        // Split a batch of the worst panels before re-summing.
        let batch = (heap.len() / 16).max(1);
        for _ in 0..batch {
            let worst = match heap.pop() {
                Some(p) => p,
                None => break,
            };
            let m = 0.5 * (worst.a + worst.b);
            if !(m > worst.a && m < worst.b) {
                // Cannot split further in floating point; freeze its error.
                heap.push(Panel {
                    error: 0.0,
                    ..worst
                });
                continue;
            }
            heap.push(Panel::new(&rule, &f, worst.a, m));
            heap.push(Panel::new(&rule, &f, m, worst.b));
        }
    }
}

/// `Z_beta = pi(exp(beta * score))` for a Gaussian reference on `y`, with
/// `score` given as a function of the log coordinate.
///
/// The window is `mean ± 12 stddev`, widened in steps of 6 stddev while the
/// integrand at an edge is not negligible against its peak (tilted laws whose
/// mass has moved away from the reference).
pub fn quadrature_z<F: Fn(f64) -> f64>(
    reference: &ReferenceDistribution,
    score: F,
    beta: f64,
    breakpoints: &[f64],
) -> Result<f64> {
    let integrand = |y: f64| {
        let s = score(y);
        if beta == 0.0 {
            reference.density(y)
        } else {
            (beta * s + reference.ln_density(y)).exp()
        }
    };

    let s = reference.stddev;
    let mut lo = reference.mean - WINDOW_SIGMAS * s;
    let mut hi = reference.mean + WINDOW_SIGMAS * s;
    for _ in 0..20 {
        let peak = (0..=512)
            .map(|i| integrand(lo + (hi - lo) * i as f64 / 512.0))
            .fold(0.0, f64::max);
        let negligible = |v: f64| v <= 1e-25 * peak;
        let grow_lo = !negligible(integrand(lo));
        let grow_hi = !negligible(integrand(hi));
        if !grow_lo && !grow_hi {
            break;
        }
        if grow_lo {
            lo -= 6.0 * s;
        }
        if grow_hi {
            hi += 6.0 * s;
        }
    }
    // seed panels around the peak so narrow posteriors are not stepped over
    const PEAK_GRID: usize = 1 << 14;
    let cell = (hi - lo) / PEAK_GRID as f64;
    let peak_at = (0..=PEAK_GRID)
        .map(|i| lo + cell * i as f64)
        .max_by(|a, b| integrand(*a).total_cmp(&integrand(*b)))
        .unwrap_or(reference.mean);
    let mut bp = breakpoints.to_vec();
    bp.extend([peak_at - cell, peak_at + cell]);
    integrate_adaptive(integrand, lo, hi, &bp, REL_TOL)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn legendre_rule_integrates_polynomials() {
        let (x, w) = gauss_legendre(ORDER);
        assert!((w.iter().sum::<f64>() - 2.0).abs() < 1e-14);
        // exact up to degree 2n-1
        let v: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(38)).sum();
        assert!((v - 2.0 / 39.0).abs() < 1e-14);
    }

    #[test]
    fn constant_scores() {
        let r = ReferenceDistribution::default();
        for c in [-1.0, 0.0, 2.0] {
            for beta in [0.5, 3.0] {
                let z = quadrature_z(&r, |_| c, beta, &[]).unwrap();
                let want = (beta * c).exp();
                assert!(((z - want) / want).abs() < 1e-10, "c={c} beta={beta}: {z}");
            }
        }
        assert!((quadrature_z(&r, |_| 0.0, 7.0, &[]).unwrap() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn linear_score_matches_lognormal_moment() {
        let r = ReferenceDistribution::default();
        for beta in [0.1, 1.0, 2.0, 5.0] {
            let z = quadrature_z(&r, |y| y, beta, &[]).unwrap();
            let want = (beta * r.mean + beta * beta * r.stddev * r.stddev / 2.0).exp();
            assert!(
                ((z - want) / want).abs() < 1e-8,
                "beta={beta}: {z} vs {want}"
            );
        }
    }

    #[test]
    fn indicator_integrand_converges() {
        let r = ReferenceDistribution::default();
        // P(y <= mean) = 1/2; discontinuous integrand, no breakpoint hint
        let v = integrate_adaptive(
            |y| if y <= 1.5 + 1e-3 { r.density(y) } else { 0.0 },
            -16.5,
            19.5,
            &[],
            1e-10,
        )
        .unwrap();
        assert!((v - 0.5).abs() < 1e-3 * 0.5);
    }

    #[test]
    fn empty_interval_rejected() {
        assert!(integrate_adaptive(|_| 1.0, 1.0, 1.0, &[], 1e-10).is_err());
    }
}
