//! The weight function for the weighted Sobolev spaces.
//!
//! The default is the standard Gaussian density, which satisfies both
//! integral conditions (unit mass and finite second moment) analytically;
//! the certificate re-checks them by quadrature on the truncated domain.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::grid::SpaceGrid;

#[derive(Clone)]
pub struct WeightFunction {
    pub name: String,
    rho: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>,
    /// Truncation radius per axis for quadrature certificates.
    pub truncation_radius: f64,
}

impl std::fmt::Debug for WeightFunction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("WeightFunction")
            .field("name", &self.name)
            .field("truncation_radius", &self.truncation_radius)
            .finish()
    }
}

/// Quadrature values backing the weight invariants.
#[derive(Debug, Clone)]
pub struct WeightCertificate {
    pub mass: f64,
    pub second_moment: f64,
    pub min_on_grid: f64,
    pub pass: bool,
}

impl WeightFunction {
    pub fn new(
        name: impl Into<String>,
        rho: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>,
        truncation_radius: f64,
    ) -> Self {
        Self {
            name: name.into(),
            rho,
            truncation_radius,
        }
    }

    /// Standard Gaussian weight (2 pi)^(-n/2) exp(-|x|^2 / 2), truncated at
    /// radius 6 per axis.
    pub fn gaussian(dim: usize) -> Self {
        let norm = (2.0 * std::f64::consts::PI).powf(-(dim as f64) / 2.0);
        Self::new(
            "gaussian",
            Arc::new(move |x: &[f64]| {
                let sq: f64 = x.iter().map(|a| a * a).sum();
                norm * (-0.5 * sq).exp()
            }),
            6.0,
        )
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        (self.rho)(x)
    }

    /// Check positivity, unit mass, and finite second moment by trapezoid
    /// quadrature on `grid` (which should cover the truncated domain).
    pub fn certify(&self, grid: &SpaceGrid, mass_tol: f64) -> Result<WeightCertificate> {
        let mut mass = 0.0;
        let mut second = 0.0;
        let mut min_on_grid = f64::INFINITY;
        let mut x = vec![0.0; grid.dim()];
        for node in 0..grid.node_count() {
            grid.node_into(node, &mut x);
            let r = self.value(&x);
            if !r.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("weight '{}'", self.name),
                    step: node,
                });
            }
            min_on_grid = min_on_grid.min(r);
            let w = grid.quad_weight(node);
            mass += w * r;
            second += w * r * x.iter().map(|a| a * a).sum::<f64>();
        }
        let pass =
            min_on_grid > 0.0 && (mass - 1.0).abs() <= mass_tol && second.is_finite();
        Ok(WeightCertificate {
            mass,
            second_moment: second,
            min_on_grid,
            pass,
        })
    }

    /// Default certification grid: truncation box with 241 points per axis.
    pub fn default_grid(&self, dim: usize) -> Result<SpaceGrid> {
        let axes = (0..dim)
            .map(|_| crate::grid::Axis {
                lo: -self.truncation_radius,
                hi: self.truncation_radius,
                count: 241,
            })
            .collect();
        SpaceGrid::new(axes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_gaussian_passes_both_quadrature_invariants() {
        let w = WeightFunction::gaussian(1);
        let grid = w.default_grid(1).unwrap();
        let cert = w.certify(&grid, 1e-6).unwrap();
        assert!(cert.pass, "certificate: {cert:?}");
        assert!((cert.mass - 1.0).abs() < 1e-6);
        assert!((cert.second_moment - 1.0).abs() < 1e-4);
        assert!(cert.min_on_grid > 0.0);
    }

    #[test]
    fn gaussian_2d_mass_is_one() {
        let w = WeightFunction::gaussian(2);
        let grid = SpaceGrid::new(vec![
            crate::grid::Axis {
                lo: -6.0,
                hi: 6.0,
                count: 121,
            };
            2
        ])
        .unwrap();
        let cert = w.certify(&grid, 1e-4).unwrap();
        assert!(cert.pass, "certificate: {cert:?}");
    }
}
