//! Snapshot-driven reduced model: a natural cubic spline of `Psi*` in the
//! log coordinate, with a pointwise error estimate that vanishes on snapshots.

use std::fmt::Write as _;

use crate::error::{ArtError, Result};
use crate::models::{ProblemSpec, StatePoint};

pub const DEFAULT_MIN_KNOT_GAP: f64 = 1e-9;

/// One expensive evaluation of the true model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Snapshot {
    pub y: f64,
    pub psi_star: f64,
    pub iteration: usize,
}

/// Natural cubic spline through deduplicated snapshots, extended by its
/// boundary tangents outside the knot range.
#[derive(Debug, Clone, PartialEq)]
pub struct SplineSurrogate {
    snapshots: Vec<Snapshot>,
    knots: Vec<f64>,
    values: Vec<f64>,
    second_derivatives: Vec<f64>,
    min_knot_gap: f64,
}

impl SplineSurrogate {
    /// Fit through `snapshots`. A snapshot closer than `min_knot_gap` to
    /// existing knots replaces them; input order decides which is later.
    pub fn fit(snapshots: &[Snapshot], min_knot_gap: f64) -> Result<Self> {
        let mut kept: Vec<Snapshot> = Vec::with_capacity(snapshots.len());
        for snap in snapshots {
            insert_dedup(&mut kept, *snap, min_knot_gap);
        }
        Self::from_sorted(kept, min_knot_gap)
    }

    /// Refit with `snap` added. Equivalent to fitting the augmented sequence.
    pub fn update(&self, snap: Snapshot) -> Result<Self> {
        let mut kept = self.snapshots.clone();
        insert_dedup(&mut kept, snap, self.min_knot_gap);
        Self::from_sorted(kept, self.min_knot_gap)
    }

    fn from_sorted(snapshots: Vec<Snapshot>, min_knot_gap: f64) -> Result<Self> {
        if snapshots.len() < 2 {
            return Err(ArtError::InsufficientData(format!(
                "a spline needs at least 2 distinct knots, got {}",
                snapshots.len()
            )));
        }
        let knots: Vec<f64> = snapshots.iter().map(|s| s.y).collect();
        let values: Vec<f64> = snapshots.iter().map(|s| s.psi_star).collect();
        let second_derivatives = natural_second_derivatives(&knots, &values);
        Ok(Self {
            snapshots,
            knots,
            values,
            second_derivatives,
            min_knot_gap,
        })
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn second_derivatives(&self) -> &[f64] {
        &self.second_derivatives
    }

    pub fn snapshots(&self) -> &[Snapshot] {
        &self.snapshots
    }

    pub fn min_knot_gap(&self) -> f64 {
        self.min_knot_gap
    }

    /// Spline value `Psi(y)`.
    pub fn eval(&self, y: f64) -> f64 {
        let n = self.knots.len();
        let idx = self.knots.partition_point(|&k| k < y);
        if idx < n && self.knots[idx] == y {
            return self.values[idx];
        }
        if idx == 0 {
            return self.values[0] + self.boundary_slope(false) * (y - self.knots[0]);
        }
        if idx == n {
            return self.values[n - 1] + self.boundary_slope(true) * (y - self.knots[n - 1]);
        }
        let (i, j) = (idx - 1, idx);
        let h = self.knots[j] - self.knots[i];
        let a = self.knots[j] - y;
        let b = y - self.knots[i];
        let (mi, mj) = (self.second_derivatives[i], self.second_derivatives[j]);
        mi * a * a * a / (6.0 * h)
            + mj * b * b * b / (6.0 * h)
            + (self.values[i] / h - mi * h / 6.0) * a
            + (self.values[j] / h - mj * h / 6.0) * b
    }

    fn boundary_slope(&self, right: bool) -> f64 {
        let n = self.knots.len();
        let m = &self.second_derivatives;
        if right {
            let h = self.knots[n - 1] - self.knots[n - 2];
            (self.values[n - 1] - self.values[n - 2]) / h + h * (m[n - 2] + 2.0 * m[n - 1]) / 6.0
        } else {
            let h = self.knots[1] - self.knots[0];
            (self.values[1] - self.values[0]) / h - h * (2.0 * m[0] + m[1]) / 6.0
        }
    }

    /// Reduced score `S(y) = score(Psi(y))`.
    pub fn eval_score(&self, spec: &ProblemSpec, p: StatePoint) -> f64 {
        spec.score(self.eval(p.y))
    }

    /// Score error estimate at `p`, from `|Psi - Psi*|` obtained through
    /// `psi_oracle`. Exactly zero at knots.
    pub fn eval_error<F: Fn(f64) -> f64>(
        &self,
        spec: &ProblemSpec,
        p: StatePoint,
        psi_oracle: F,
    ) -> f64 {
        let psi = self.eval(p.y);
        let err_psi = (psi - psi_oracle(p.y)).abs();
        spec.score_error(psi, err_psi)
    }

    /// Plain-text table: `knot\tvalue\tsecond_derivative` per line.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        for ((k, v), m) in self
            .knots
            .iter()
            .zip(&self.values)
            .zip(&self.second_derivatives)
        {
            let _ = writeln!(out, "{}\t{}\t{}", fmt17(*k), fmt17(*v), fmt17(*m));
        }
        out
    }
}

/// Decimal float with 17 significant digits.
pub fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

fn insert_dedup(kept: &mut Vec<Snapshot>, snap: Snapshot, gap: f64) {
    kept.retain(|s| (s.y - snap.y).abs() >= gap);
    let pos = kept.partition_point(|s| s.y < snap.y);
    kept.insert(pos, snap);
}

// Tridiagonal solve for the natural spline's second derivatives.
fn natural_second_derivatives(x: &[f64], v: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut m = vec![0.0; n];
    if n < 3 {
        return m;
    }
    let inner = n - 2;
    let mut diag = vec![0.0; inner];
    let mut upper = vec![0.0; inner];
    let mut rhs = vec![0.0; inner];
    for r in 0..inner {
        let i = r + 1;
        let h0 = x[i] - x[i - 1];
        let h1 = x[i + 1] - x[i];
        diag[r] = (h0 + h1) / 3.0;
        upper[r] = h1 / 6.0;
        rhs[r] = (v[i + 1] - v[i]) / h1 - (v[i] - v[i - 1]) / h0;
    }
    // forward elimination; sub-diagonal entry of row r is h0/6 = upper[r-1]
    for r in 1..inner {
        let w = upper[r - 1] / diag[r - 1];
        diag[r] -= w * upper[r - 1];
        rhs[r] -= w * rhs[r - 1];
    }
    m[inner] = rhs[inner - 1] / diag[inner - 1];
    for r in (0..inner - 1).rev() {
        m[r + 1] = (rhs[r] - upper[r] * m[r + 2]) / diag[r];
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::PsiModel;
    use proptest::prelude::*;

    fn snaps(points: &[(f64, f64)]) -> Vec<Snapshot> {
        points
            .iter()
            .enumerate()
            .map(|(i, &(y, psi_star))| Snapshot {
                y,
                psi_star,
                iteration: i,
            })
            .collect()
    }

    fn re90() -> ProblemSpec {
        ProblemSpec::model_s_rare_event(90.0, 50.0).unwrap()
    }

    #[test]
    fn reproduces_affine_data() {
        let s = SplineSurrogate::fit(
            &snaps(&[(0.0, 1.0), (1.0, 3.0), (2.0, 5.0), (3.0, 7.0)]),
            DEFAULT_MIN_KNOT_GAP,
        )
        .unwrap();
        assert!((s.eval(1.5) - 4.0).abs() < 1e-14);
        // tangent extrapolation keeps the line
        assert!((s.eval(-2.0) + 3.0).abs() < 1e-13);
        assert!((s.eval(10.0) - 21.0).abs() < 1e-13);
    }

    #[test]
    fn single_snapshot_is_insufficient() {
        let err = SplineSurrogate::fit(&snaps(&[(0.0, 1.0)]), DEFAULT_MIN_KNOT_GAP);
        assert!(matches!(err, Err(ArtError::InsufficientData(_))));
        let dup = SplineSurrogate::fit(&snaps(&[(0.0, 1.0), (1e-12, 2.0)]), 1e-9);
        assert!(matches!(dup, Err(ArtError::InsufficientData(_))));
    }

    #[test]
    fn close_knots_are_replaced_by_the_later_one() {
        let s =
            SplineSurrogate::fit(&snaps(&[(0.0, 1.0), (1e-12, 2.0), (1.0, 3.0)]), 1e-9).unwrap();
        assert_eq!(s.knots(), &[1e-12, 1.0]);
        assert_eq!(s.values(), &[2.0, 3.0]);
    }

    #[test]
    fn knots_interpolate_exactly_and_have_zero_error() {
        let spec = re90();
        let oracle = |y: f64| spec.psi.eval_y(y);
        let pts: Vec<(f64, f64)> = [-5.0, -4.4, -3.0, -0.5, 0.3, 1.7, 2.9]
            .iter()
            .map(|&y| (y, oracle(y)))
            .collect();
        let s = SplineSurrogate::fit(&snaps(&pts), DEFAULT_MIN_KNOT_GAP).unwrap();
        for &(y, v) in &pts {
            let p = StatePoint::new(y).unwrap();
            assert_eq!(s.eval(y), v);
            assert_eq!(s.eval_error(&spec, p, oracle), 0.0);
            assert_eq!(s.eval_score(&spec, p), crate::models::true_score(&spec, p));
        }
    }

    #[test]
    fn score_transform_and_flat_extrapolation() {
        let spec = re90();
        let s = SplineSurrogate::fit(&snaps(&[(-6.0, 90.0), (-5.0, 90.0)]), 1e-9).unwrap();
        let beyond = StatePoint::new(3.0).unwrap();
        assert_eq!(s.eval_score(&spec, beyond), 1.0);
        assert_eq!(s.eval(3.0), 90.0);
    }

    #[test]
    fn bayesian_error_plug_in() {
        let spec = ProblemSpec::model_s_bayesian(vec![4.0], 1.0, 1.0).unwrap();
        let s = SplineSurrogate::fit(&snaps(&[(0.0, 4.2), (1.0, 4.2)]), 1e-9).unwrap();
        let e = s.eval_error(&spec, StatePoint::new(0.5).unwrap(), |_| 4.1);
        assert!((e - 0.05).abs() < 1e-14);
    }

    #[test]
    fn affine_truth_has_negligible_error() {
        let spec = ProblemSpec {
            psi: PsiModel::Affine {
                slope: -2.0,
                intercept: 30.0,
            },
            ..re90()
        };
        let oracle = |y: f64| spec.psi.eval_y(y);
        let pts: Vec<(f64, f64)> = [-3.0, 0.0, 4.0].iter().map(|&y| (y, oracle(y))).collect();
        let s = SplineSurrogate::fit(&snaps(&pts), 1e-9).unwrap();
        for i in 0..1000 {
            let y = -3.0 + 7.0 * i as f64 / 999.0;
            assert!((s.eval(y) - oracle(y)).abs() < 1e-9);
        }
    }

    #[test]
    fn update_paths() {
        let base =
            SplineSurrogate::fit(&snaps(&[(0.0, 0.0), (1.0, 1.0), (2.0, 0.0)]), 1e-9).unwrap();
        let inside = base
            .update(Snapshot {
                y: 0.5,
                psi_star: 2.0,
                iteration: 9,
            })
            .unwrap();
        for (k, v) in base.knots().iter().zip(base.values()) {
            assert_eq!(inside.eval(*k), *v);
        }
        let dup = base
            .update(Snapshot {
                y: 1.0,
                psi_star: 5.0,
                iteration: 9,
            })
            .unwrap();
        assert_eq!(dup.knots().len(), 3);
        assert_eq!(dup.eval(1.0), 5.0);
        let outside = base
            .update(Snapshot {
                y: 3.0,
                psi_star: 1.0,
                iteration: 9,
            })
            .unwrap();
        assert_eq!(outside.knots().last(), Some(&3.0));
        assert_eq!(outside.eval(3.0), 1.0);
    }

    #[test]
    fn table_format() {
        let s = SplineSurrogate::fit(&snaps(&[(0.0, 1.0), (1.0, 3.0)]), 1e-9).unwrap();
        let table = s.to_table();
        let first = table.lines().next().unwrap();
        let fields: Vec<&str> = first.split('\t').collect();
        assert_eq!(fields.len(), 3);
        assert_eq!(fields[1], "1.0000000000000000e0");
        assert_eq!(fields[1].parse::<f64>().unwrap(), 1.0);
    }

    fn knot_sets() -> impl Strategy<Value = Vec<(f64, f64)>> {
        prop::collection::vec((-5.0f64..5.0, -10.0f64..10.0), 3..20)
    }

    proptest! {
        #[test]
        fn interpolation_is_exact(points in knot_sets()) {
            let s = SplineSurrogate::fit(&snaps(&points), 1e-3).unwrap_or_else(|_| {
                SplineSurrogate::fit(&snaps(&[(-9.0, 0.0), (9.0, 0.0)]), 1e-3).unwrap()
            });
            for (k, v) in s.knots().iter().zip(s.values()) {
                prop_assert_eq!(s.eval(*k), *v);
            }
        }

        #[test]
        fn second_derivative_is_continuous(points in knot_sets()) {
            let Ok(s) = SplineSurrogate::fit(&snaps(&points), 1e-2) else { return Ok(()); };
            let k = s.knots();
            let m = s.second_derivatives();
            for i in 1..k.len() - 1 {
                // central differences are exact for f'' of a cubic; f'' is
                // linear on each piece, so extrapolate each side to the knot
                let h = 0.05 * (k[i] - k[i - 1]).min(k[i + 1] - k[i]);
                let d2 = |c: f64| (s.eval(c + h) - 2.0 * s.eval(c) + s.eval(c - h)) / (h * h);
                let left = 2.0 * d2(k[i] - 2.0 * h) - d2(k[i] - 4.0 * h);
                let right = 2.0 * d2(k[i] + 2.0 * h) - d2(k[i] + 4.0 * h);
                let scale = 1.0 + m[i].abs();
                prop_assert!((left - right).abs() / scale < 1e-6,
                    "jump at {}: {} vs {}", k[i], left, right);
                prop_assert!((left - m[i]).abs() / scale < 1e-6);
            }
        }

        #[test]
        fn update_matches_fit_of_union(points in knot_sets(), y in -6.0f64..6.0, v in -5.0f64..5.0) {
            let all = snaps(&points);
            let Ok(base) = SplineSurrogate::fit(&all, 1e-3) else { return Ok(()); };
            let extra = Snapshot { y, psi_star: v, iteration: 99 };
            let updated = base.update(extra).unwrap();
            let mut union = all.clone();
            union.push(extra);
            let scratch = SplineSurrogate::fit(&union, 1e-3).unwrap();
            prop_assert_eq!(&updated, &scratch);
            for i in 0..50 {
                let t = -7.0 + 14.0 * i as f64 / 49.0;
                prop_assert_eq!(updated.eval(t), scratch.eval(t));
            }
        }
    }
}
