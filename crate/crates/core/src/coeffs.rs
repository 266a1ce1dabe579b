//! Model coefficients and empirical validation of the standing assumptions.
//!
//! A [`CoefficientSet`] is the single home for the model functions: the
//! drift `b(t, x, v)`, diffusion `sigma(t, x, v)`, scalar driver
//! `f(t, x, y, z, v)`, backward driver `g(t, x, y, z)` (a 1 x l row; `g`
//! takes no control argument), and the terminal payoff `h(x)`, together
//! with the declared Lipschitz constant `L` and the contraction constant
//! `alpha` of `g` in `z`.
//!
//! Lipschitz continuity is not decidable from a black box, so validation is
//! statistical: sampled finite-difference ratios must not exceed the
//! declared constants times a slack factor.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{stream, SeedDomain};

/// Dimensions of the model: state n, forward noise d, backward noise l,
/// control k.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub state: usize,
    pub noise_w: usize,
    pub noise_b: usize,
    pub control: usize,
}

impl ModelDims {
    pub fn scalar() -> Self {
        Self {
            state: 1,
            noise_w: 1,
            noise_b: 1,
            control: 1,
        }
    }
}

/// The model functions, written into caller-provided buffers on the hot
/// paths.
pub trait Coefficients: Send + Sync {
    fn dims(&self) -> ModelDims;

    /// Drift b(t, x, v) into `out` (length n).
    fn drift(&self, t: f64, x: &[f64], v: &[f64], out: &mut [f64]);

    /// Diffusion sigma(t, x, v) into `out` (row-major n x d).
    fn diffusion(&self, t: f64, x: &[f64], v: &[f64], out: &mut [f64]);

    /// Scalar driver f(t, x, y, z, v).
    fn driver_f(&self, t: f64, x: &[f64], y: f64, z: &[f64], v: &[f64]) -> f64;

    /// Backward driver g(t, x, y, z) into `out` (length l).
    fn driver_g(&self, t: f64, x: &[f64], y: f64, z: &[f64], out: &mut [f64]);

    /// Terminal payoff h(x).
    fn terminal(&self, x: &[f64]) -> f64;
}

/// A model plus its declared regularity constants.
#[derive(Clone)]
pub struct CoefficientSet {
    pub name: String,
    pub coeffs: Arc<dyn Coefficients>,
    /// Declared joint Lipschitz constant L (> 0).
    pub lip_l: f64,
    /// Declared contraction constant of g in z (0 < alpha < 1).
    pub alpha: f64,
}

impl std::fmt::Debug for CoefficientSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CoefficientSet")
            .field("name", &self.name)
            .field("lip_l", &self.lip_l)
            .field("alpha", &self.alpha)
            .finish()
    }
}

impl CoefficientSet {
    pub fn new(
        name: impl Into<String>,
        coeffs: Arc<dyn Coefficients>,
        lip_l: f64,
        alpha: f64,
    ) -> Result<Self> {
        if !(lip_l > 0.0 && lip_l.is_finite()) {
            return Err(Error::InvalidModel(format!("lip_l = {lip_l} must be > 0")));
        }
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::InvalidModel(format!(
                "alpha = {alpha} must lie in (0, 1)"
            )));
        }
        Ok(Self {
            name: name.into(),
            coeffs,
            lip_l,
            alpha,
        })
    }

    pub fn dims(&self) -> ModelDims {
        self.coeffs.dims()
    }
}

/// How validation samples the argument space.
#[derive(Debug, Clone)]
pub struct ValidationOptions {
    /// Number of finite-difference sample pairs per function.
    pub sample_budget: usize,
    /// Box half-width for x, y, z samples.
    pub range: f64,
    /// Box half-width for control samples.
    pub control_range: f64,
    /// Declared constants are accepted up to this multiplicative slack.
    pub slack: f64,
    pub seed: u64,
}

impl Default for ValidationOptions {
    fn default() -> Self {
        Self {
            sample_budget: 4096,
            range: 3.0,
            control_range: 1.0,
            slack: 1.05,
            seed: 0x5eed,
        }
    }
}

/// Empirical Lipschitz ratios for one function.
#[derive(Debug, Clone)]
pub struct RatioCheck {
    pub label: &'static str,
    pub max_ratio: f64,
    pub bound: f64,
    pub pass: bool,
}

/// Result of [`validate_model`].
#[derive(Debug, Clone)]
pub struct ValidationReport {
    pub model: String,
    pub checks: Vec<RatioCheck>,
    pub pass: bool,
}

impl ValidationReport {
    pub fn check(&self, label: &str) -> Option<&RatioCheck> {
        self.checks.iter().find(|c| c.label == label)
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn sample_point(rng: &mut impl Rng, len: usize, half_width: f64, out: &mut Vec<f64>) {
    out.clear();
    for _ in 0..len {
        out.push(rng.random_range(-half_width..half_width));
    }
}

/// Check the declared constants against sampled finite-difference ratios.
///
/// `b`, `sigma`, `f`, and `h` are checked jointly in all their continuous
/// arguments against `L`; `g` is checked split: its (x, y)-ratio against
/// `L` and its z-ratio against `alpha`. Non-finite outputs at any sampled
/// point fail the report.
pub fn validate_model(model: &CoefficientSet, opts: &ValidationOptions) -> Result<ValidationReport> {
    let dims = model.dims();
    let mut rng = stream(opts.seed, SeedDomain::Validation, &[]);
    let horizon_samples = [0.0, 0.25, 0.5, 0.75, 1.0];

    let mut max_b: f64 = 0.0;
    let mut max_sigma: f64 = 0.0;
    let mut max_f: f64 = 0.0;
    let mut max_g_xy: f64 = 0.0;
    let mut max_g_z: f64 = 0.0;
    let mut max_h: f64 = 0.0;
    let mut finite = true;

    let mut x = Vec::new();
    let mut x2 = Vec::new();
    let mut z = Vec::new();
    let mut z2 = Vec::new();
    let mut v = Vec::new();
    let mut v2 = Vec::new();
    let mut buf_a = vec![0.0; dims.state.max(1) * dims.noise_w.max(1)];
    let mut buf_b = vec![0.0; dims.state.max(1) * dims.noise_w.max(1)];
    let mut gbuf_a = vec![0.0; dims.noise_b];
    let mut gbuf_b = vec![0.0; dims.noise_b];

    for i in 0..opts.sample_budget {
        let t = horizon_samples[i % horizon_samples.len()];
        sample_point(&mut rng, dims.state, opts.range, &mut x);
        sample_point(&mut rng, dims.state, opts.range, &mut x2);
        sample_point(&mut rng, dims.noise_w, opts.range, &mut z);
        sample_point(&mut rng, dims.noise_w, opts.range, &mut z2);
        sample_point(&mut rng, dims.control, opts.control_range, &mut v);
        sample_point(&mut rng, dims.control, opts.control_range, &mut v2);
        let y: f64 = rng.random_range(-opts.range..opts.range);
        let y2: f64 = rng.random_range(-opts.range..opts.range);

        let dx = x.iter().zip(&x2).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        let dz = z.iter().zip(&z2).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        let dv = v.iter().zip(&v2).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        let dxy = (dx + (y - y2).powi(2)).sqrt();
        let dall = (dx + (y - y2).powi(2) + dz + dv).sqrt();
        let dxv = (dx + dv).sqrt();

        // b and sigma: joint in (x, v)
        if dxv > 1e-12 {
            model.coeffs.drift(t, &x, &v, &mut buf_a[..dims.state]);
            model.coeffs.drift(t, &x2, &v2, &mut buf_b[..dims.state]);
            finite &= buf_a[..dims.state].iter().all(|a| a.is_finite());
            let diff = buf_a[..dims.state]
                .iter()
                .zip(&buf_b[..dims.state])
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            max_b = max_b.max(diff / dxv);

            let nd = dims.state * dims.noise_w;
            model.coeffs.diffusion(t, &x, &v, &mut buf_a[..nd]);
            model.coeffs.diffusion(t, &x2, &v2, &mut buf_b[..nd]);
            finite &= buf_a[..nd].iter().all(|a| a.is_finite());
            let diff = buf_a[..nd]
                .iter()
                .zip(&buf_b[..nd])
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            max_sigma = max_sigma.max(diff / dxv);
        }

        // f: joint in (x, y, z, v)
        if dall > 1e-12 {
            let fa = model.coeffs.driver_f(t, &x, y, &z, &v);
            let fb = model.coeffs.driver_f(t, &x2, y2, &z2, &v2);
            finite &= fa.is_finite() && fb.is_finite();
            max_f = max_f.max((fa - fb).abs() / dall);
        }

        // g split: (x, y) against L with z held fixed, z against alpha with
        // (x, y) held fixed.
        if dxy > 1e-12 {
            model.coeffs.driver_g(t, &x, y, &z, &mut gbuf_a);
            model.coeffs.driver_g(t, &x2, y2, &z, &mut gbuf_b);
            finite &= gbuf_a.iter().all(|a| a.is_finite());
            let diff: f64 = gbuf_a
                .iter()
                .zip(&gbuf_b)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            max_g_xy = max_g_xy.max(diff / dxy);
        }
        if dz > 1e-24 {
            model.coeffs.driver_g(t, &x, y, &z, &mut gbuf_a);
            model.coeffs.driver_g(t, &x, y, &z2, &mut gbuf_b);
            let diff: f64 = gbuf_a
                .iter()
                .zip(&gbuf_b)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            max_g_z = max_g_z.max(diff / dz.sqrt());
        }

        // terminal h in x
        if dx > 1e-24 {
            let ha = model.coeffs.terminal(&x);
            let hb = model.coeffs.terminal(&x2);
            finite &= ha.is_finite() && hb.is_finite();
            max_h = max_h.max((ha - hb).abs() / dx.sqrt());
        }
        let _ = norm(&x); // keep clippy quiet about unused helper in no-sample edge cases
    }

    let l_bound = model.lip_l * opts.slack;
    let a_bound = model.alpha * opts.slack;
    let checks = vec![
        RatioCheck {
            label: "b",
            max_ratio: max_b,
            bound: l_bound,
            pass: max_b <= l_bound,
        },
        RatioCheck {
            label: "sigma",
            max_ratio: max_sigma,
            bound: l_bound,
            pass: max_sigma <= l_bound,
        },
        RatioCheck {
            label: "f",
            max_ratio: max_f,
            bound: l_bound,
            pass: max_f <= l_bound,
        },
        RatioCheck {
            label: "g_xy",
            max_ratio: max_g_xy,
            bound: l_bound,
            pass: max_g_xy <= l_bound,
        },
        RatioCheck {
            label: "g_z",
            max_ratio: max_g_z,
            bound: a_bound,
            pass: max_g_z <= a_bound,
        },
        RatioCheck {
            label: "h",
            max_ratio: max_h,
            bound: l_bound,
            pass: max_h <= l_bound,
        },
    ];
    let pass = finite && checks.iter().all(|c| c.pass);
    if !finite {
        return Err(Error::NonFinite {
            context: format!("model '{}' output during validation", model.name),
            step: 0,
        });
    }
    Ok(ValidationReport {
        model: model.name.clone(),
        checks,
        pass,
    })
}

/// A coefficient set assembled from closures; used in tests and for
/// ad-hoc models.
pub struct ClosureCoefficients {
    pub model_dims: ModelDims,
    pub b: Box<dyn Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync>,
    pub sigma: Box<dyn Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync>,
    pub f: Box<dyn Fn(f64, &[f64], f64, &[f64], &[f64]) -> f64 + Send + Sync>,
    pub g: Box<dyn Fn(f64, &[f64], f64, &[f64], &mut [f64]) + Send + Sync>,
    pub h: Box<dyn Fn(&[f64]) -> f64 + Send + Sync>,
}

impl Coefficients for ClosureCoefficients {
    fn dims(&self) -> ModelDims {
        self.model_dims
    }
    fn drift(&self, t: f64, x: &[f64], v: &[f64], out: &mut [f64]) {
        (self.b)(t, x, v, out)
    }
    fn diffusion(&self, t: f64, x: &[f64], v: &[f64], out: &mut [f64]) {
        (self.sigma)(t, x, v, out)
    }
    fn driver_f(&self, t: f64, x: &[f64], y: f64, z: &[f64], v: &[f64]) -> f64 {
        (self.f)(t, x, y, z, v)
    }
    fn driver_g(&self, t: f64, x: &[f64], y: f64, z: &[f64], out: &mut [f64]) {
        (self.g)(t, x, y, z, out)
    }
    fn terminal(&self, x: &[f64]) -> f64 {
        (self.h)(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn closure_model(
        f: impl Fn(f64, &[f64], f64, &[f64], &[f64]) -> f64 + Send + Sync + 'static,
        g: impl Fn(f64, &[f64], f64, &[f64], &mut [f64]) + Send + Sync + 'static,
        lip_l: f64,
        alpha: f64,
    ) -> CoefficientSet {
        let coeffs = ClosureCoefficients {
            model_dims: ModelDims::scalar(),
            b: Box::new(|_, _, _, out| out.fill(0.0)),
            sigma: Box::new(|_, _, _, out| out.fill(0.0)),
            f: Box::new(f),
            g: Box::new(g),
            h: Box::new(|_| 0.0),
        };
        CoefficientSet::new("test", Arc::new(coeffs), lip_l, alpha).unwrap()
    }

    #[test]
    fn rejects_alpha_outside_unit_interval() {
        let coeffs = ClosureCoefficients {
            model_dims: ModelDims::scalar(),
            b: Box::new(|_, _, _, out| out.fill(0.0)),
            sigma: Box::new(|_, _, _, out| out.fill(0.0)),
            f: Box::new(|_, _, _, _, _| 0.0),
            g: Box::new(|_, _, _, _, out| out.fill(0.0)),
            h: Box::new(|_| 0.0),
        };
        assert!(CoefficientSet::new("bad", Arc::new(coeffs), 1.0, 1.5).is_err());
    }

    #[test]
    fn zero_driver_passes_with_zero_ratios() {
        let m = closure_model(|_, _, _, _, _| 0.0, |_, _, _, _, out| out.fill(0.0), 1.0, 0.5);
        let rep = validate_model(&m, &ValidationOptions::default()).unwrap();
        assert!(rep.pass);
        assert_eq!(rep.check("f").unwrap().max_ratio, 0.0);
    }

    #[test]
    fn linear_g_ratio_equals_slope() {
        // g(t, x, y, z) = 0.5 z with declared alpha = 0.5: the z-ratio is the
        // slope and must pass.
        let m = closure_model(
            |_, _, _, _, _| 0.0,
            |_, _, _, z, out| out[0] = 0.5 * z[0],
            1.0,
            0.5,
        );
        let rep = validate_model(&m, &ValidationOptions::default()).unwrap();
        let gz = rep.check("g_z").unwrap();
        assert!(gz.max_ratio <= 0.5 + 1e-9, "ratio {}", gz.max_ratio);
        assert!(gz.max_ratio > 0.49, "ratio {}", gz.max_ratio);
        assert!(rep.pass);
    }

    #[test]
    fn sin_driver_exceeds_declared_constant() {
        // f = sin(5y) has true Lipschitz constant 5; declaring L = 1 must
        // fail. A dense 1-D sweep approaches the analytic derivative bound.
        let m = closure_model(
            |_, _, y, _, _| (5.0 * y).sin(),
            |_, _, _, _, out| out.fill(0.0),
            1.0,
            0.5,
        );
        let opts = ValidationOptions {
            sample_budget: 20_000,
            ..Default::default()
        };
        let rep = validate_model(&m, &opts).unwrap();
        let f = rep.check("f").unwrap();
        assert!(!f.pass);
        assert!(f.max_ratio > 3.0, "sampled ratio {}", f.max_ratio);

        // dense sweep oracle: |d/dy sin(5y)| <= 5, attained near cos = 1
        let mut max_ratio: f64 = 0.0;
        let n = 40_000;
        for i in 0..n {
            let y = -3.0 + 6.0 * i as f64 / n as f64;
            let y2 = y + 1e-4;
            max_ratio = max_ratio.max(((5.0 * y).sin() - (5.0 * y2).sin()).abs() / 1e-4);
        }
        assert!((max_ratio - 5.0).abs() < 0.01, "oracle {}", max_ratio);
    }
}
