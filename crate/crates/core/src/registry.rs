//! Built-in named models.
//!
//! Coefficients are registry entries with numeric overrides rather than
//! user-supplied code, so the Lipschitz validation stays sound. All models
//! are scalar (n = d = l = k = 1).
//!
//! - `zero`: everything zero.
//! - `linear-bdsde`: `f = a y`, `g = b y`, frozen state (`sigma = 0`),
//!   terminal `1 + x`; admits the exponential closed form driven by the
//!   realized B-path.
//! - `martingale`: `h(x) = x`, unit diffusion, no drivers.
//! - `transport-control`: `f = v`, no dynamics; value `T - t`, best
//!   control 1.
//! - `controlled-drift-lq`: `b = v`, constant diffusion, `h = -x^2`.
//! - `degenerate-sigma`: `b = v` with a diffusion that vanishes on
//!   `|x| <= 0.5`, the degenerate case the weak formulation targets.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::coeffs::{CoefficientSet, Coefficients, ModelDims};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Zero,
    LinearBdsde,
    Martingale,
    TransportControl,
    ControlledDriftLq,
    DegenerateSigma,
}

#[derive(Debug, Clone)]
struct RegistryCoeffs {
    kind: Kind,
    /// `a` and `b` for linear-bdsde, `sigma` for the diffusive models.
    a: f64,
    b: f64,
    sigma: f64,
}

impl Coefficients for RegistryCoeffs {
    fn dims(&self) -> ModelDims {
        ModelDims::scalar()
    }

    fn drift(&self, _t: f64, _x: &[f64], v: &[f64], out: &mut [f64]) {
        out[0] = match self.kind {
            Kind::ControlledDriftLq | Kind::DegenerateSigma => v[0],
            _ => 0.0,
        };
    }

    fn diffusion(&self, _t: f64, x: &[f64], _v: &[f64], out: &mut [f64]) {
        out[0] = match self.kind {
            Kind::Martingale | Kind::ControlledDriftLq => self.sigma,
            Kind::DegenerateSigma => self.sigma * (x[0].abs() - 0.5).clamp(0.0, 1.0),
            _ => 0.0,
        };
    }

    fn driver_f(&self, _t: f64, _x: &[f64], y: f64, _z: &[f64], v: &[f64]) -> f64 {
        match self.kind {
            Kind::LinearBdsde => self.a * y,
            Kind::TransportControl => v[0],
            _ => 0.0,
        }
    }

    fn driver_g(&self, _t: f64, _x: &[f64], y: f64, _z: &[f64], out: &mut [f64]) {
        out[0] = match self.kind {
            Kind::LinearBdsde => self.b * y,
            _ => 0.0,
        };
    }

    fn terminal(&self, x: &[f64]) -> f64 {
        match self.kind {
            Kind::Zero | Kind::TransportControl => 0.0,
            Kind::LinearBdsde => 1.0 + x[0],
            Kind::Martingale => x[0],
            Kind::ControlledDriftLq | Kind::DegenerateSigma => -x[0] * x[0],
        }
    }
}

/// Names of the built-in models, in registry order.
pub const MODEL_NAMES: [&str; 6] = [
    "zero",
    "linear-bdsde",
    "martingale",
    "transport-control",
    "controlled-drift-lq",
    "degenerate-sigma",
];

pub fn model_names_joined() -> String {
    MODEL_NAMES.join(", ")
}

/// Build a registry model with numeric parameter overrides.
///
/// Recognized parameters: `a` and `b` (linear-bdsde), `sigma` (martingale,
/// controlled-drift-lq, degenerate-sigma).
pub fn build_model(name: &str, overrides: &BTreeMap<String, f64>) -> Result<CoefficientSet> {
    let kind = match name {
        "zero" => Kind::Zero,
        "linear-bdsde" => Kind::LinearBdsde,
        "martingale" => Kind::Martingale,
        "transport-control" => Kind::TransportControl,
        "controlled-drift-lq" => Kind::ControlledDriftLq,
        "degenerate-sigma" => Kind::DegenerateSigma,
        _ => {
            return Err(Error::UnknownModel {
                name: name.into(),
                valid: model_names_joined(),
            })
        }
    };
    let mut coeffs = RegistryCoeffs {
        kind,
        a: 0.5,
        b: 0.5,
        sigma: match kind {
            Kind::Martingale => 1.0,
            Kind::ControlledDriftLq => 0.3,
            Kind::DegenerateSigma => 0.5,
            _ => 0.0,
        },
    };
    for (key, &val) in overrides {
        match key.as_str() {
            "a" => coeffs.a = val,
            "b" => coeffs.b = val,
            "sigma" => coeffs.sigma = val,
            other => {
                return Err(Error::Config(format!(
                    "unknown model parameter '{other}' (expected a, b, sigma)"
                )))
            }
        }
    }
    // declared constants cover the truncated sampling domain used by
    // validation (|x| <= 3 makes the quadratic terminal ratio <= 6)
    let lip = match kind {
        Kind::ControlledDriftLq | Kind::DegenerateSigma => 8.0,
        _ => (1.0_f64).max(coeffs.a.abs()).max(coeffs.b.abs()),
    };
    CoefficientSet::new(name, Arc::new(coeffs), lip, 0.5)
}

/// Closed-form value of the linear-bdsde model at the window start for a
/// realized backward path: `h(x0) exp(a (T - t0) + b dB - b^2 (T - t0)/2)`
/// with `dB = B_T - B_{t0}`.
pub fn linear_bdsde_closed_form(
    a: f64,
    b: f64,
    h_at_start: f64,
    horizon: f64,
    t0: f64,
    b_increment_sum: f64,
) -> f64 {
    let tau = horizon - t0;
    h_at_start * (a * tau + b * b_increment_sum - 0.5 * b * b * tau).exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeffs::{validate_model, ValidationOptions};

    #[test]
    fn all_registry_models_pass_validation() {
        for name in MODEL_NAMES {
            let model = build_model(name, &BTreeMap::new()).unwrap();
            let report = validate_model(&model, &ValidationOptions::default()).unwrap();
            assert!(report.pass, "model {name} failed validation: {report:?}");
        }
    }

    #[test]
    fn unknown_model_lists_valid_names() {
        let err = build_model("nope", &BTreeMap::new()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("nope"));
        for name in MODEL_NAMES {
            assert!(msg.contains(name), "{msg} missing {name}");
        }
    }

    #[test]
    fn overrides_change_parameters() {
        let mut ov = BTreeMap::new();
        ov.insert("sigma".to_string(), 0.7);
        let model = build_model("controlled-drift-lq", &ov).unwrap();
        let mut out = [0.0];
        model.coeffs.diffusion(0.0, &[1.0], &[0.0], &mut out);
        assert_eq!(out[0], 0.7);
        assert!(build_model("zero", &{
            let mut m = BTreeMap::new();
            m.insert("nonsense".to_string(), 1.0);
            m
        })
        .is_err());
    }

    #[test]
    fn degenerate_sigma_vanishes_on_the_core_region() {
        let model = build_model("degenerate-sigma", &BTreeMap::new()).unwrap();
        let mut out = [0.0];
        for &x in &[-0.5, -0.25, 0.0, 0.3, 0.5] {
            model.coeffs.diffusion(0.0, &[x], &[1.0], &mut out);
            assert_eq!(out[0], 0.0, "sigma({x}) should vanish");
        }
        model.coeffs.diffusion(0.0, &[1.5], &[1.0], &mut out);
        assert_eq!(out[0], 0.5);
        model.coeffs.diffusion(0.0, &[9.0], &[1.0], &mut out);
        assert_eq!(out[0], 0.5, "slope saturates at distance 1");
    }
}
