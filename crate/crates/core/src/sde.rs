//! Forward controlled SDE: explicit Euler-Maruyama over the shared
//! environment, plus the empirical moment checks backing the a-priori
//! estimates on the state process.
//!
//! The update per path is
//!
//! ```text
//! X_{i+1} = X_i + b(t_i, X_i, v_i) dt + sigma(t_i, X_i, v_i) dW_i
//! ```
//!
//! Paths are simulated independently (write-once per path slot), so results
//! do not depend on scheduling order.

use ndarray::{Array3, Axis as NdAxis};
use rayon::prelude::*;

use crate::coeffs::CoefficientSet;
use crate::env::BrownianEnvironment;
use crate::error::{Error, Result};
use crate::grid::ControlSet;
use crate::policy::ControlPolicy;
use crate::stats::{loglog_slope, mean};

/// States exceeding this magnitude abort the simulation (model blow-up).
pub const BLOW_UP_GUARD: f64 = 1e6;

/// Simulated states `X` for every path over a window of the time grid.
#[derive(Debug, Clone)]
pub struct PathEnsemble {
    /// `m_paths x (window_steps + 1) x n`; row 0 is the start state.
    pub values: Array3<f64>,
    /// Index of the window's first time point on the environment grid.
    pub start_step: usize,
    pub start_x: Vec<f64>,
    pub policy_tag: String,
    pub master_seed: u64,
    pub b_seed: u64,
}

impl PathEnsemble {
    pub fn m_paths(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn window_steps(&self) -> usize {
        self.values.shape()[1] - 1
    }

    pub fn dim(&self) -> usize {
        self.values.shape()[2]
    }

    /// State of path `p` at window row `i` (0-based from the window start).
    pub fn state(&self, p: usize, i: usize) -> &[f64] {
        self.values
            .slice(ndarray::s![p, i, ..])
            .to_slice()
            .expect("contiguous")
    }

    pub fn terminal_states(&self) -> Vec<&[f64]> {
        let last = self.window_steps();
        (0..self.m_paths()).map(|p| self.state(p, last)).collect()
    }
}

/// Simulate from `(start_step, x)` to the end of the grid.
pub fn simulate_forward(
    model: &CoefficientSet,
    env: &BrownianEnvironment,
    start: (usize, &[f64]),
    controls: &ControlSet,
    policy: &ControlPolicy,
) -> Result<PathEnsemble> {
    let steps = env.grid().n_steps() - start.0;
    simulate_forward_window(model, env, start, steps, controls, policy)
}

/// Simulate `window_steps` steps from `(start_step, x)`, using the
/// environment's noise rows for those steps.
pub fn simulate_forward_window(
    model: &CoefficientSet,
    env: &BrownianEnvironment,
    start: (usize, &[f64]),
    window_steps: usize,
    controls: &ControlSet,
    policy: &ControlPolicy,
) -> Result<PathEnsemble> {
    let (start_step, x0) = start;
    let dims = model.dims();
    if x0.len() != dims.state {
        return Err(Error::DimensionMismatch(format!(
            "start state has dim {}, model expects {}",
            x0.len(),
            dims.state
        )));
    }
    if start_step + window_steps > env.grid().n_steps() {
        return Err(Error::ProbeOutsideGrid(format!(
            "window [{start_step}, {}] exceeds grid with {} steps",
            start_step + window_steps,
            env.grid().n_steps()
        )));
    }
    if env.dim_w() != dims.noise_w {
        return Err(Error::DimensionMismatch(format!(
            "environment W dim {} vs model d = {}",
            env.dim_w(),
            dims.noise_w
        )));
    }
    policy.validate(controls, env.grid().n_steps())?;

    let m = env.m_paths();
    let n = dims.state;
    let d = dims.noise_w;
    let dt = env.grid().dt();
    let mut values = Array3::zeros((m, window_steps + 1, n));

    let failures: Vec<Option<Error>> = values
        .axis_iter_mut(NdAxis(0))
        .into_par_iter()
        .enumerate()
        .map(|(p, mut row)| {
            let mut x = x0.to_vec();
            let mut bbuf = vec![0.0; n];
            let mut sbuf = vec![0.0; n * d];
            for c in 0..n {
                row[[0, c]] = x[c];
            }
            for w in 0..window_steps {
                let i = start_step + w;
                let t = env.grid().point(i);
                let v = policy.control_at(controls, i, &x);
                model.coeffs.drift(t, &x, v, &mut bbuf);
                model.coeffs.diffusion(t, &x, v, &mut sbuf);
                let dw = env.w_increment(p, i);
                for c in 0..n {
                    let mut dx = bbuf[c] * dt;
                    for j in 0..d {
                        dx += sbuf[c * d + j] * dw[j];
                    }
                    x[c] += dx;
                }
                let mag = x.iter().map(|a| a * a).sum::<f64>().sqrt();
                if !mag.is_finite() || mag > BLOW_UP_GUARD {
                    return Some(Error::BlowUp {
                        path: p,
                        step: i,
                        magnitude: mag,
                    });
                }
                for c in 0..n {
                    row[[w + 1, c]] = x[c];
                }
            }
            None
        })
        .collect();

    if let Some(err) = failures.into_iter().flatten().next() {
        return Err(err);
    }

    Ok(PathEnsemble {
        values,
        start_step,
        start_x: x0.to_vec(),
        policy_tag: policy.tag(),
        master_seed: env.master_seed(),
        b_seed: env.b_seed(),
    })
}

/// Report of the moment checks on one ensemble.
#[derive(Debug, Clone)]
pub struct MomentReport {
    pub p: u32,
    /// `E[sup_s |X_s|^p] / (1 + |x|^p)`.
    pub sup_ratio: f64,
    /// Per delta in the ladder (snapped to whole steps):
    /// `E[sup_{t<=s<=t+delta} |X_s - x|^p] / delta^{p/2}`.
    pub increment_ratios: Vec<(f64, f64)>,
    /// Largest ratio increase walking the ladder toward smaller deltas
    /// (<= 1 when the ratios are flat or shrinking). The moment bound is
    /// one-sided: drift contributes an extra `delta^{p/2}` factor that
    /// makes ratios *shrink* with delta, which is consistent with it.
    pub growth_factor: f64,
    pub pass: bool,
}

/// Empirical check of the sup-moment bound and the `delta^{p/2}` increment
/// modulus across a ladder of deltas. Passes when the ratios show no growth
/// trend beyond `max_growth` as delta shrinks.
pub fn check_moment_bounds(
    ensemble: &PathEnsemble,
    dt: f64,
    p: u32,
    deltas: &[f64],
    max_growth: f64,
) -> Result<MomentReport> {
    if ensemble.m_paths() == 0 {
        return Err(Error::EmptyEnsemble);
    }
    if !(p == 2 || p == 4) {
        return Err(Error::Precondition(format!("p = {p} must be 2 or 4")));
    }
    let m = ensemble.m_paths();
    let x0 = &ensemble.start_x;
    let x0_norm_p = x0
        .iter()
        .map(|a| a * a)
        .sum::<f64>()
        .sqrt()
        .powi(p as i32);

    let sup_p: Vec<f64> = (0..m)
        .map(|pth| {
            let mut sup = 0.0_f64;
            for i in 0..=ensemble.window_steps() {
                let s = ensemble.state(pth, i);
                let nrm = s.iter().map(|a| a * a).sum::<f64>().sqrt();
                sup = sup.max(nrm);
            }
            sup.powi(p as i32)
        })
        .collect();
    let sup_ratio = mean(&sup_p) / (1.0 + x0_norm_p);

    // snap deltas to whole steps and sort them descending
    let mut ks: Vec<usize> = deltas
        .iter()
        .map(|&delta| ((delta / dt).round() as usize).max(1))
        .collect();
    ks.sort_unstable();
    ks.dedup();
    ks.reverse();
    let mut increment_ratios = Vec::with_capacity(ks.len());
    for &k in &ks {
        if k > ensemble.window_steps() {
            return Err(Error::DegenerateLadder(
                "delta exceeds the simulated window".into(),
            ));
        }
        let delta_eff = k as f64 * dt;
        let sup_inc_p: Vec<f64> = (0..m)
            .map(|pth| {
                let mut sup = 0.0_f64;
                for i in 0..=k {
                    let s = ensemble.state(pth, i);
                    let nrm = s
                        .iter()
                        .zip(x0)
                        .map(|(a, b)| (a - b).powi(2))
                        .sum::<f64>()
                        .sqrt();
                    sup = sup.max(nrm);
                }
                sup.powi(p as i32)
            })
            .collect();
        increment_ratios.push((delta_eff, mean(&sup_inc_p) / delta_eff.powf(p as f64 / 2.0)));
    }

    // growth only counts toward smaller deltas (the list is descending)
    let mut growth_factor: f64 = 1.0;
    for i in 0..increment_ratios.len() {
        for j in (i + 1)..increment_ratios.len() {
            let (ri, rj) = (increment_ratios[i].1, increment_ratios[j].1);
            if ri > 0.0 {
                growth_factor = growth_factor.max(rj / ri);
            }
        }
    }
    let pass = sup_ratio.is_finite() && growth_factor <= max_growth;

    Ok(MomentReport {
        p,
        sup_ratio,
        increment_ratios,
        growth_factor,
        pass,
    })
}

/// Flow-stability report: scaling of `E[sup_s |X^x - X^x'|^2]` in the
/// start-point offset under shared noise.
#[derive(Debug, Clone)]
pub struct FlowStabilityReport {
    /// (offset, E[sup |dX|^2]) per ladder point.
    pub ladder: Vec<(f64, f64)>,
    /// Fitted slope of log E[sup |dX|^2] against log offset; 2 for a
    /// Lipschitz flow.
    pub exponent: f64,
    pub pass: bool,
}

/// Simulate pairs of ensembles from `x0` and `x0 + offset * e1` with shared
/// noise and fit the scaling exponent over the offset ladder. Passes when
/// the exponent is within `rel_tol` of 2.
pub fn check_flow_stability(
    model: &CoefficientSet,
    env: &BrownianEnvironment,
    start_step: usize,
    x0: &[f64],
    offsets: &[f64],
    controls: &ControlSet,
    policy: &ControlPolicy,
    rel_tol: f64,
) -> Result<FlowStabilityReport> {
    if offsets.len() < 2 {
        return Err(Error::DegenerateLadder(
            "need at least two offsets".into(),
        ));
    }
    let base = simulate_forward(model, env, (start_step, x0), controls, policy)?;
    let mut ladder = Vec::with_capacity(offsets.len());
    for &eps in offsets {
        if eps <= 0.0 {
            return Err(Error::DegenerateLadder("offsets must be positive".into()));
        }
        let mut shifted = x0.to_vec();
        shifted[0] += eps;
        let other = simulate_forward(model, env, (start_step, &shifted), controls, policy)?;
        let m = base.m_paths();
        let sup_sq: Vec<f64> = (0..m)
            .map(|p| {
                let mut sup = 0.0_f64;
                for i in 0..=base.window_steps() {
                    let a = base.state(p, i);
                    let b = other.state(p, i);
                    let d = a
                        .iter()
                        .zip(b)
                        .map(|(u, v)| (u - v).powi(2))
                        .sum::<f64>();
                    sup = sup.max(d);
                }
                sup
            })
            .collect();
        ladder.push((eps, mean(&sup_sq)));
    }
    let xs: Vec<f64> = ladder.iter().map(|&(e, _)| e).collect();
    let ys: Vec<f64> = ladder.iter().map(|&(_, s)| s).collect();
    let exponent = loglog_slope(&xs, &ys);
    let pass = (exponent - 2.0).abs() <= rel_tol * 2.0;
    Ok(FlowStabilityReport {
        ladder,
        exponent,
        pass,
    })
}

/// Stability of the flow in the control under shared noise: fitted
/// constants of `E[sup_s |X^v - X^v'|^2]` against the control distance
/// `int |v - v'|^2 ds` across an offset ladder.
#[derive(Debug, Clone)]
pub struct ControlStabilityReport {
    /// Per ladder point: (int |dv|^2 dt, E[sup |dX|^2]).
    pub ladder: Vec<(f64, f64)>,
    pub c_values: Vec<f64>,
    pub c_variation: f64,
    pub pass: bool,
}

/// Simulate constant-control pairs `v` and `v + offset e1` with shared
/// noise and check that the fitted constants stay within
/// `max_c_variation` across the ladder.
#[allow(clippy::too_many_arguments)]
pub fn check_control_stability(
    model: &CoefficientSet,
    env: &BrownianEnvironment,
    start: (usize, &[f64]),
    base_control: &[f64],
    offsets: &[f64],
    max_c_variation: f64,
) -> Result<ControlStabilityReport> {
    if offsets.len() < 2 {
        return Err(Error::DegenerateLadder("need at least two offsets".into()));
    }
    let horizon = env.grid().horizon() - env.grid().point(start.0);
    let mut points = Vec::with_capacity(offsets.len());
    for &eps in offsets {
        if eps <= 0.0 {
            return Err(Error::DegenerateLadder("offsets must be positive".into()));
        }
        let mut shifted = base_control.to_vec();
        shifted[0] += eps;
        let pair = ControlSet::new(vec![base_control.to_vec(), shifted])?;
        let base = simulate_forward(model, env, start, &pair, &ControlPolicy::Constant(0))?;
        let other = simulate_forward(model, env, start, &pair, &ControlPolicy::Constant(1))?;
        let m = base.m_paths();
        let sup_sq: Vec<f64> = (0..m)
            .map(|p| {
                let mut sup = 0.0_f64;
                for i in 0..=base.window_steps() {
                    let d: f64 = base
                        .state(p, i)
                        .iter()
                        .zip(other.state(p, i))
                        .map(|(a, b)| (a - b).powi(2))
                        .sum();
                    sup = sup.max(d);
                }
                sup
            })
            .collect();
        points.push((eps * eps * horizon, mean(&sup_sq)));
    }
    let c_values: Vec<f64> = points.iter().map(|&(d, s)| s / d.max(1e-300)).collect();
    let cmax = c_values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let cmin = c_values.iter().cloned().fold(f64::INFINITY, f64::min);
    let c_variation = if cmin > 0.0 { cmax / cmin } else { 1.0 };
    Ok(ControlStabilityReport {
        ladder: points,
        c_values,
        c_variation,
        pass: c_variation <= max_c_variation,
    })
}
