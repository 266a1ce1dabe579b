//! Compactly supported test functions for the weak-form certificate.
//!
//! The spatial part is the standard smooth bump of radius `R` centered at
//! `c`:
//!
//! ```text
//! phi(x) = exp(-1 / (1 - |(x - c)/R|^2))   for |(x - c)/R| < 1, else 0
//! ```
//!
//! which is nonnegative, C-infinity, and supported strictly inside the
//! ball. The temporal part is a polynomial in `t` that must stay
//! nonnegative on the horizon. Gradients and the time derivative are
//! analytic; a unit test pins them against central differences at
//! second order.

use crate::error::{Error, Result};
use crate::grid::SpaceGrid;

#[derive(Debug, Clone)]
pub struct TestFunction {
    pub center: Vec<f64>,
    pub radius: f64,
    /// Polynomial coefficients of psi(t) = c0 + c1 t + c2 t^2 + ...
    pub temporal: Vec<f64>,
    pub label: String,
}

impl TestFunction {
    pub fn new(center: Vec<f64>, radius: f64, temporal: Vec<f64>, label: impl Into<String>) -> Self {
        Self {
            center,
            radius,
            temporal,
            label: label.into(),
        }
    }

    /// Bump with constant temporal part 1.
    pub fn bump(center: Vec<f64>, radius: f64) -> Self {
        let label = format!("bump(c={center:?},R={radius})");
        Self::new(center, radius, vec![1.0], label)
    }

    /// Bump with temporal part `(T - t) / T`.
    pub fn bump_decaying(center: Vec<f64>, radius: f64, horizon: f64) -> Self {
        let label = format!("bump-decay(c={center:?},R={radius})");
        Self::new(center, radius, vec![1.0, -1.0 / horizon], label)
    }

    fn s(&self, x: &[f64]) -> f64 {
        x.iter()
            .zip(&self.center)
            .map(|(xi, ci)| ((xi - ci) / self.radius).powi(2))
            .sum()
    }

    /// Spatial bump value.
    pub fn spatial(&self, x: &[f64]) -> f64 {
        let s = self.s(x);
        if s >= 1.0 {
            0.0
        } else {
            (-1.0 / (1.0 - s)).exp()
        }
    }

    /// Analytic spatial gradient.
    pub fn spatial_grad(&self, x: &[f64], out: &mut [f64]) {
        let s = self.s(x);
        if s >= 1.0 {
            out.fill(0.0);
            return;
        }
        let phi = (-1.0 / (1.0 - s)).exp();
        let denom = (1.0 - s).powi(2);
        for (i, o) in out.iter_mut().enumerate() {
            let u = (x[i] - self.center[i]) / self.radius;
            *o = phi * (-2.0 * u) / (self.radius * denom);
        }
    }

    pub fn temporal_value(&self, t: f64) -> f64 {
        let mut acc = 0.0;
        let mut pw = 1.0;
        for &c in &self.temporal {
            acc += c * pw;
            pw *= t;
        }
        acc
    }

    pub fn temporal_dt(&self, t: f64) -> f64 {
        let mut acc = 0.0;
        let mut pw = 1.0;
        for (k, &c) in self.temporal.iter().enumerate().skip(1) {
            acc += c * k as f64 * pw;
            pw *= t;
        }
        let _ = pw;
        acc
    }

    /// phi(t, x) = psi(t) bump(x).
    pub fn value(&self, t: f64, x: &[f64]) -> f64 {
        self.temporal_value(t) * self.spatial(x)
    }

    /// d/dt phi(t, x).
    pub fn dt(&self, t: f64, x: &[f64]) -> f64 {
        self.temporal_dt(t) * self.spatial(x)
    }

    /// grad_x phi(t, x).
    pub fn grad(&self, t: f64, x: &[f64], out: &mut [f64]) {
        self.spatial_grad(x, out);
        let psi = self.temporal_value(t);
        for o in out.iter_mut() {
            *o *= psi;
        }
    }

    /// Err when the support ball is not strictly inside the grid box, or
    /// when the temporal part goes negative on `[t0, horizon]`.
    pub fn validate(&self, grid: &SpaceGrid, t0: f64, horizon: f64) -> Result<()> {
        if self.center.len() != grid.dim() {
            return Err(Error::DimensionMismatch(
                "test-function center dimension mismatch".into(),
            ));
        }
        for (ax, a) in grid.axes().iter().enumerate() {
            if self.center[ax] - self.radius <= a.lo || self.center[ax] + self.radius >= a.hi {
                return Err(Error::SupportTouchesBoundary {
                    center: self.center.clone(),
                    radius: self.radius,
                });
            }
        }
        let samples = 64;
        for k in 0..=samples {
            let t = t0 + (horizon - t0) * k as f64 / samples as f64;
            if self.temporal_value(t) < 0.0 {
                return Err(Error::Precondition(format!(
                    "temporal part of '{}' is negative at t = {t}",
                    self.label
                )));
            }
        }
        Ok(())
    }
}

/// The default battery: bumps of radius `radius` at centers
/// `{-2, -1, 0, 1, 2} * radius / 2` on the first axis, each with temporal
/// parts 1 and `(T - t)/T`.
pub fn default_battery(dim: usize, radius: f64, horizon: f64) -> Vec<TestFunction> {
    let mut battery = Vec::new();
    for k in -2i32..=2 {
        let mut center = vec![0.0; dim];
        center[0] = k as f64 * radius / 2.0;
        battery.push(TestFunction::bump(center.clone(), radius));
        battery.push(TestFunction::bump_decaying(center, radius, horizon));
    }
    battery
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bump_is_nonnegative_and_compactly_supported() {
        let f = TestFunction::bump(vec![0.5], 1.0);
        assert_eq!(f.spatial(&[1.5]), 0.0);
        assert_eq!(f.spatial(&[-0.5]), 0.0);
        assert_eq!(f.spatial(&[2.0]), 0.0);
        for k in 0..100 {
            let x = -0.49 + 1.98 * k as f64 / 99.0;
            assert!(f.spatial(&[x]) >= 0.0);
        }
        assert!((f.spatial(&[0.5]) - (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn analytic_gradient_matches_central_differences_at_second_order() {
        let f = TestFunction::bump(vec![0.2, -0.3], 1.2);
        let points = [[0.1, 0.0], [0.5, -0.6], [-0.4, 0.1]];
        for x in &points {
            let mut g = [0.0; 2];
            f.spatial_grad(x, &mut g);
            for ax in 0..2 {
                let mut errs = Vec::new();
                for &h in &[1e-3, 5e-4] {
                    let mut xp = *x;
                    let mut xm = *x;
                    xp[ax] += h;
                    xm[ax] -= h;
                    let fd = (f.spatial(&xp) - f.spatial(&xm)) / (2.0 * h);
                    errs.push((fd - g[ax]).abs());
                }
                // halving the step should shrink the error ~4x (allow slack)
                assert!(errs[0] < 1e-5, "error {} too large", errs[0]);
                if errs[0] > 1e-12 {
                    assert!(errs[1] < errs[0] * 0.4, "not O(h^2): {errs:?}");
                }
            }
        }
    }

    #[test]
    fn temporal_polynomial_and_derivative() {
        let f = TestFunction::new(vec![0.0], 1.0, vec![1.0, -0.5, 0.25], "t");
        let t = 0.7;
        assert!((f.temporal_value(t) - (1.0 - 0.5 * t + 0.25 * t * t)).abs() < 1e-15);
        assert!((f.temporal_dt(t) - (-0.5 + 0.5 * t)).abs() < 1e-15);
    }

    #[test]
    fn validate_rejects_support_touching_boundary() {
        let grid = SpaceGrid::symmetric_1d(2.0, 21).unwrap();
        assert!(TestFunction::bump(vec![0.0], 1.0).validate(&grid, 0.0, 1.0).is_ok());
        assert!(TestFunction::bump(vec![1.5], 1.0).validate(&grid, 0.0, 1.0).is_err());
        assert!(TestFunction::bump(vec![0.0], 2.0).validate(&grid, 0.0, 1.0).is_err());
    }

    #[test]
    fn default_battery_has_ten_members_inside_radius_three() {
        let battery = default_battery(1, 1.0, 1.0);
        assert_eq!(battery.len(), 10);
        let grid = SpaceGrid::symmetric_1d(3.0, 61).unwrap();
        for f in &battery {
            f.validate(&grid, 0.0, 1.0).unwrap();
        }
    }
}
