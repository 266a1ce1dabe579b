//! The dynamic-programming value field and its consistency checks.
//!
//! The value field is the random field `u(t, x)` obtained by maximizing the
//! recursive cost over the finite control set, tabulated on a time x space
//! grid and tagged with the B-seed it conditions on. The backward recursion
//! applies the one-step backward semigroup to the next time row and
//! maximizes over controls:
//!
//! ```text
//! u(t_i, x) = max_v  G^{x,v}_{t_i, t_{i+1}}[ u(t_{i+1}, .) ]
//! ```
//!
//! Two backends compute the one-step semigroup:
//!
//! - grid-DP: Gauss-Hermite quadrature for the W-expectation with the
//!   realized `dB_i` plugged in. No Monte Carlo noise; the oracle backend.
//!   Refused for state dimension > 2.
//! - regression-MC: a fresh one-step sub-ensemble per node, sharing the
//!   draws across controls so the argmax does not chase noise.
//!
//! Ties in the argmax go to the lowest control index. Between nodes the
//! field is evaluated by multilinear interpolation.

use ndarray::Array2;
use rayon::prelude::*;

use crate::bdsde::{solve_bdsde, solve_bdsde_with_terminal};
use crate::coeffs::CoefficientSet;
use crate::env::BrownianEnvironment;
use crate::error::{Error, Result};
use crate::grid::{ControlSet, SpaceGrid, TimeGrid};
use crate::policy::{ControlPolicy, FeedbackTable};
use crate::regression::RegressionBasis;
use crate::rng::{derive_seed, stream, SeedDomain};
use crate::sde::simulate_forward_window;
use crate::stats::{loglog_slope, mean};

/// Backend used to evaluate the one-step semigroup in the recursion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Backend {
    GridDp { gh_nodes: usize },
    RegressionMc { m_sub: usize },
}

impl Backend {
    pub fn tag(&self) -> String {
        match self {
            Backend::GridDp { gh_nodes } => format!("grid-dp[gh={gh_nodes}]"),
            Backend::RegressionMc { m_sub } => format!("regression-mc[m={m_sub}]"),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ValueDiagnostics {
    /// Root sum of squared per-step worst-node standard errors
    /// (zero for the quadrature backend).
    pub accumulated_se: f64,
}

/// Tabulated value field with its argmax controls.
#[derive(Debug, Clone)]
pub struct ValueField {
    pub time: TimeGrid,
    pub space: SpaceGrid,
    /// `(n_steps + 1) x node_count`.
    pub values: Array2<f64>,
    /// `(n_steps + 1) x node_count` indices into the control set; the
    /// terminal row is 0 by convention (no decision is taken at T).
    pub argmax: Array2<u16>,
    pub b_seed: u64,
    pub backend: String,
    pub diagnostics: ValueDiagnostics,
}

impl ValueField {
    /// Interpolated field value at time step `i`.
    pub fn value_at(&self, step: usize, x: &[f64]) -> f64 {
        let row = self.values.row(step);
        self.space
            .interpolate(row.to_slice().expect("contiguous"), x)
    }

    /// The greedy feedback policy reading the argmax table.
    pub fn feedback_policy(&self) -> ControlPolicy {
        ControlPolicy::Feedback(FeedbackTable {
            grid: self.space.clone(),
            table: self.argmax.clone(),
        })
    }

    pub fn row(&self, step: usize) -> &[f64] {
        self.values.row(step).to_slice().expect("contiguous")
    }
}

/// Central-difference gradient of nodal `values` at `node` (one-sided at
/// the domain boundary).
pub fn nodal_gradient(space: &SpaceGrid, values: &[f64], node: usize) -> Vec<f64> {
    let dim = space.dim();
    let multi = space.multi_index(node);
    let mut grad = vec![0.0; dim];
    for ax in 0..dim {
        let h = space.axes()[ax].spacing();
        let count = space.axes()[ax].count;
        let mut lo = multi.clone();
        let mut hi = multi.clone();
        if multi[ax] == 0 {
            hi[ax] = 1;
            grad[ax] = (values[space.flat_index(&hi)] - values[node]) / h;
        } else if multi[ax] == count - 1 {
            lo[ax] = count - 2;
            grad[ax] = (values[node] - values[space.flat_index(&lo)]) / h;
        } else {
            lo[ax] = multi[ax] - 1;
            hi[ax] = multi[ax] + 1;
            grad[ax] =
                (values[space.flat_index(&hi)] - values[space.flat_index(&lo)]) / (2.0 * h);
        }
    }
    grad
}

/// Gauss-Hermite nodes/weights for E[f(xi)] with xi standard normal,
/// via Golub-Welsch on the probabilists' Hermite recurrence.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1, "need at least one quadrature node");
    use nalgebra::{DMatrix, SymmetricEigen};
    let mut jac = DMatrix::<f64>::zeros(n, n);
    for i in 1..n {
        let b = (i as f64).sqrt();
        jac[(i - 1, i)] = b;
        jac[(i, i - 1)] = b;
    }
    let eig = SymmetricEigen::new(jac);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|k| {
            let node = eig.eigenvalues[k];
            let w = eig.eigenvectors[(0, k)].powi(2);
            (node, w)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    (
        pairs.iter().map(|p| p.0).collect(),
        pairs.iter().map(|p| p.1 / total).collect(),
    )
}

/// Weighted samples of the one-step W-increment: quadrature abscissas for
/// grid-DP, Monte Carlo draws for regression-MC.
fn dw_samples(backend: Backend, dim_w: usize, dt: f64, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let sqrt_dt = dt.sqrt();
    match backend {
        Backend::GridDp { gh_nodes } => {
            let (nodes, weights) = gauss_hermite(gh_nodes);
            let total = gh_nodes.pow(dim_w as u32);
            let mut dws = Vec::with_capacity(total * dim_w);
            let mut ws = Vec::with_capacity(total);
            for q in 0..total {
                let mut rem = q;
                let mut w = 1.0;
                for _ in 0..dim_w {
                    let k = rem % gh_nodes;
                    rem /= gh_nodes;
                    dws.push(sqrt_dt * nodes[k]);
                    w *= weights[k];
                }
                ws.push(w);
            }
            (ws, dws)
        }
        Backend::RegressionMc { m_sub } => {
            let mut rng = stream(seed, SeedDomain::ValueNode, &[]);
            let mut dws = Vec::with_capacity(m_sub * dim_w);
            for _ in 0..m_sub * dim_w {
                let g: f64 = rand::Rng::sample(&mut rng, rand_distr::StandardNormal);
                dws.push(sqrt_dt * g);
            }
            let w = 1.0 / m_sub as f64;
            (vec![w; m_sub], dws)
        }
    }
}

struct OneStepOut {
    value: f64,
    z: Vec<f64>,
    /// standard error of the value estimate (0 for quadrature)
    se: f64,
}

/// One-step semigroup at state `x` under control `v`, against the weighted
/// increment samples. Mirrors the path solver: a Z estimate with one
/// fixed-point refinement on the g argument, then the Y expectation with
/// the realized `dB_i` known. The centered u inside the Z estimator is a
/// control variate for the Monte Carlo route and a no-op for quadrature.
#[allow(clippy::too_many_arguments)]
fn one_step(
    model: &CoefficientSet,
    t: f64,
    dt: f64,
    x: &[f64],
    v: &[f64],
    db: &[f64],
    weights: &[f64],
    dws: &[f64],
    u_next: &dyn Fn(&[f64]) -> f64,
    z_tilde_init: &[f64],
    mc: bool,
) -> OneStepOut {
    let dims = model.dims();
    let n = dims.state;
    let d = dims.noise_w;
    let q_count = weights.len();

    let mut bbuf = vec![0.0; n];
    let mut sbuf = vec![0.0; n * d];
    model.coeffs.drift(t, x, v, &mut bbuf);
    model.coeffs.diffusion(t, x, v, &mut sbuf);

    let mut xq = vec![0.0; n];
    let mut u_vals = vec![0.0; q_count];
    for q in 0..q_count {
        let dw = &dws[q * d..(q + 1) * d];
        for c in 0..n {
            let mut xi = x[c] + bbuf[c] * dt;
            for j in 0..d {
                xi += sbuf[c * d + j] * dw[j];
            }
            xq[c] = xi;
        }
        u_vals[q] = u_next(&xq);
    }
    let u_mean: f64 = weights.iter().zip(&u_vals).map(|(w, u)| w * u).sum();

    let mut z = z_tilde_init.to_vec();
    let mut gbuf = vec![0.0; dims.noise_b];
    for _ in 0..2 {
        let mut z_new = vec![0.0; d];
        for q in 0..q_count {
            model.coeffs.driver_g(t, x, u_vals[q], &z, &mut gbuf);
            let gdb: f64 = gbuf.iter().zip(db).map(|(a, b)| a * b).sum();
            let core = u_vals[q] - u_mean + gdb;
            let dw = &dws[q * d..(q + 1) * d];
            for c in 0..d {
                z_new[c] += weights[q] * core * dw[c] / dt;
            }
        }
        z = z_new;
    }

    let mut value = 0.0;
    let mut sq = 0.0;
    for q in 0..q_count {
        let fv = model.coeffs.driver_f(t, x, u_vals[q], &z, v);
        model.coeffs.driver_g(t, x, u_vals[q], &z, &mut gbuf);
        let gdb: f64 = gbuf.iter().zip(db).map(|(a, b)| a * b).sum();
        let target = u_vals[q] + fv * dt + gdb;
        value += weights[q] * target;
        sq += weights[q] * target * target;
    }
    let se = if mc {
        let var = (sq - value * value).max(0.0);
        (var / q_count as f64).sqrt()
    } else {
        0.0
    };
    OneStepOut { value, z, se }
}

/// Solve the value field by backward recursion over the grid.
pub fn solve_value_function(
    model: &CoefficientSet,
    env: &BrownianEnvironment,
    space: &SpaceGrid,
    controls: &ControlSet,
    backend: Backend,
) -> Result<ValueField> {
    let dims = model.dims();
    if space.dim() != dims.state {
        return Err(Error::DimensionMismatch(format!(
            "space grid dim {} vs model state dim {}",
            space.dim(),
            dims.state
        )));
    }
    if let Backend::GridDp { .. } = backend {
        if dims.state > 2 {
            return Err(Error::Precondition(
                "grid-DP backend refused for state dimension > 2".into(),
            ));
        }
    }
    if env.dim_b() != dims.noise_b {
        return Err(Error::DimensionMismatch(
            "environment B dim mismatch".into(),
        ));
    }

    let time = env.grid().clone();
    let n_steps = time.n_steps();
    let nodes = space.node_count();
    let dt = time.dt();
    let d = dims.noise_w;

    let mut values = Array2::zeros((n_steps + 1, nodes));
    let mut argmax = Array2::zeros((n_steps + 1, nodes));

    // terminal row, exact
    let mut xbuf = vec![0.0; space.dim()];
    for j in 0..nodes {
        space.node_into(j, &mut xbuf);
        let h = model.coeffs.terminal(&xbuf);
        if !h.is_finite() {
            return Err(Error::NonFinite {
                context: "terminal payoff".into(),
                step: n_steps,
            });
        }
        values[[n_steps, j]] = h;
    }

    let mut z_prev = vec![vec![0.0f64; d]; nodes];
    let mut accumulated_var = 0.0f64;

    for i in (0..n_steps).rev() {
        let t = time.point(i);
        let db = env.b_increment(i).to_vec();
        let next_row: Vec<f64> = values.row(i + 1).iter().cloned().collect();

        let results: Vec<(f64, u16, Vec<f64>, f64)> = (0..nodes)
            .into_par_iter()
            .map(|j| {
                let interp = |x: &[f64]| space.interpolate_extrapolate(&next_row, x);
                let mut x = vec![0.0; space.dim()];
                space.node_into(j, &mut x);
                let node_seed = derive_seed(
                    env.master_seed(),
                    SeedDomain::ValueNode,
                    &[i as u64, j as u64],
                );
                let (weights, dws) = dw_samples(backend, d, dt, node_seed);
                let mc = matches!(backend, Backend::RegressionMc { .. });

                let mut best_value = f64::NEG_INFINITY;
                let mut best_ix = 0u16;
                let mut best_z = vec![0.0; d];
                let mut best_se = 0.0;
                for (ci, v) in controls.iter().enumerate() {
                    let out = one_step(
                        model, t, dt, &x, v, &db, &weights, &dws, &interp, &z_prev[j], mc,
                    );
                    if out.value > best_value {
                        best_value = out.value;
                        best_ix = ci as u16;
                        best_z = out.z;
                        best_se = out.se;
                    }
                }
                (best_value, best_ix, best_z, best_se)
            })
            .collect();

        let mut worst_se = 0.0f64;
        for (j, (val, ix, z, se)) in results.into_iter().enumerate() {
            if !val.is_finite() {
                return Err(Error::NonFinite {
                    context: "value recursion".into(),
                    step: i,
                });
            }
            values[[i, j]] = val;
            argmax[[i, j]] = ix;
            z_prev[j] = z;
            worst_se = worst_se.max(se);
        }
        accumulated_var += worst_se * worst_se;
    }

    Ok(ValueField {
        time,
        space: space.clone(),
        values,
        argmax,
        b_seed: env.b_seed(),
        backend: backend.tag(),
        diagnostics: ValueDiagnostics {
            accumulated_se: accumulated_var.sqrt(),
        },
    })
}

// ---------------------------------------------------------------------------
// Backward semigroup over windows of several steps
// ---------------------------------------------------------------------------

/// A semigroup evaluation with its Monte Carlo standard error.
#[derive(Debug, Clone, Copy)]
pub struct SemigroupValue {
    pub value: f64,
    pub se: f64,
}

/// Evaluate the backward semigroup `G_{t, t+delta}[eta](x; v)` under a
/// constant control: simulate a fresh sub-ensemble from `(t_index, x)`
/// (reusing the environment's realized B-segment), set the terminal value
/// to `terminal_field(X_{t+delta})` per path and return the backward
/// solution at the window start.
///
/// `delta_steps = 0` returns `terminal_field(x)` exactly.
#[allow(clippy::too_many_arguments)]
pub fn backward_semigroup(
    model: &CoefficientSet,
    env: &BrownianEnvironment,
    start: (usize, &[f64]),
    delta_steps: usize,
    terminal_field: &(dyn Fn(&[f64]) -> f64 + Sync),
    controls: &ControlSet,
    control_index: usize,
    m_sub: usize,
    basis: &RegressionBasis,
    salt: u64,
) -> Result<SemigroupValue> {
    let (t_index, x) = start;
    if t_index + delta_steps > env.grid().n_steps() {
        return Err(Error::ProbeOutsideGrid(format!(
            "semigroup window [{t_index}, {}] exceeds the grid",
            t_index + delta_steps
        )));
    }
    if delta_steps == 0 {
        return Ok(SemigroupValue {
            value: terminal_field(x),
            se: 0.0,
        });
    }

    let w_seed = derive_seed(
        env.master_seed(),
        SeedDomain::SubEnsemble,
        &[salt, t_index as u64, control_index as u64],
    );
    let sub_env = env.with_fresh_w(m_sub, w_seed)?;
    let policy = ControlPolicy::Constant(control_index);
    let ensemble =
        simulate_forward_window(model, &sub_env, (t_index, x), delta_steps, controls, &policy)?;
    let xi: Vec<f64> = (0..m_sub)
        .map(|p| terminal_field(ensemble.state(p, delta_steps)))
        .collect();
    let sol = solve_bdsde_with_terminal(model, &sub_env, &ensemble, controls, &policy, basis, &xi)?;
    Ok(SemigroupValue {
        value: sol.y0(),
        se: sol.y0_se,
    })
}

// ---------------------------------------------------------------------------
// Dynamic programming principle check
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct DppProbeResult {
    pub t_index: usize,
    pub x: Vec<f64>,
    pub delta_steps: usize,
    pub field_value: f64,
    pub semigroup_value: f64,
    pub residual: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct DppReport {
    pub probes: Vec<DppProbeResult>,
    /// Largest one-step residual across probes; the per-delta budget is
    /// `one_step * delta_steps + 3 SE`.
    pub one_step_error: f64,
    pub pass: bool,
}

/// Check the dynamic programming principle: at each probe `(t_i, x)` and
/// window length `delta`, the field value must match the best constant
/// control's semigroup applied to the field at `t_i + delta`.
#[allow(clippy::too_many_arguments)]
pub fn check_dpp(
    field: &ValueField,
    model: &CoefficientSet,
    env: &BrownianEnvironment,
    controls: &ControlSet,
    deltas: &[usize],
    probes: &[(usize, Vec<f64>)],
    m_sub: usize,
    basis: &RegressionBasis,
) -> Result<DppReport> {
    for (ti, x) in probes {
        if *ti >= env.grid().n_steps() || !field.space.contains(x) {
            return Err(Error::ProbeOutsideGrid(format!(
                "probe (step {ti}, x {x:?})"
            )));
        }
    }

    // measure the one-step error first; it prices the per-step budget
    let mut one_step_error = 0.0f64;
    let mut one_step_se = 0.0f64;
    for (pi, (ti, x)) in probes.iter().enumerate() {
        let (sg, se) = best_semigroup(field, model, env, controls, *ti, x, 1, m_sub, basis, pi)?;
        one_step_error = one_step_error.max((field.value_at(*ti, x) - sg).abs());
        one_step_se = one_step_se.max(se);
    }

    let mut results = Vec::new();
    let mut all_pass = true;
    for (pi, (ti, x)) in probes.iter().enumerate() {
        for &delta in deltas {
            if ti + delta > env.grid().n_steps() {
                return Err(Error::ProbeOutsideGrid(format!(
                    "probe step {ti} + delta {delta} exceeds the grid"
                )));
            }
            let (sg, se) =
                best_semigroup(field, model, env, controls, *ti, x, delta, m_sub, basis, pi)?;
            let field_value = field.value_at(*ti, x);
            let residual = (field_value - sg).abs();
            let tolerance = one_step_error * delta as f64 + 3.0 * se + 1e-12;
            let pass = residual <= tolerance;
            all_pass &= pass;
            results.push(DppProbeResult {
                t_index: *ti,
                x: x.clone(),
                delta_steps: delta,
                field_value,
                semigroup_value: sg,
                residual,
                tolerance,
                pass,
            });
        }
    }
    Ok(DppReport {
        probes: results,
        one_step_error,
        pass: all_pass,
    })
}

#[allow(clippy::too_many_arguments)]
fn best_semigroup(
    field: &ValueField,
    model: &CoefficientSet,
    env: &BrownianEnvironment,
    controls: &ControlSet,
    t_index: usize,
    x: &[f64],
    delta: usize,
    m_sub: usize,
    basis: &RegressionBasis,
    salt: usize,
) -> Result<(f64, f64)> {
    let target_step = t_index + delta;
    let row: Vec<f64> = field.values.row(target_step).iter().cloned().collect();
    let space = &field.space;
    let eta = move |xx: &[f64]| space.interpolate_extrapolate(&row, xx);
    let mut best = f64::NEG_INFINITY;
    let mut best_se = 0.0;
    for ci in 0..controls.len() {
        let sg = backward_semigroup(
            model,
            env,
            (t_index, x),
            delta,
            &eta,
            controls,
            ci,
            m_sub,
            basis,
            salt as u64,
        )?;
        if sg.value > best {
            best = sg.value;
            best_se = sg.se;
        }
    }
    Ok((best, best_se))
}

// ---------------------------------------------------------------------------
// epsilon-optimal controls
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct EpsilonOptimalReport {
    pub field_value: f64,
    pub achieved: f64,
    /// `u(t0, x) - J(t0, x; policy)`; small and positive when the feedback
    /// policy is near-optimal (negative values are Monte Carlo noise).
    pub gap: f64,
    pub epsilon: f64,
    pub se: f64,
    pub certified: bool,
}

/// Extract the greedy feedback policy from the field and certify it by
/// re-simulation: `J(t0, x; policy) >= u(t0, x) - epsilon` within Monte
/// Carlo slack. Returns the policy together with the achieved gap.
pub fn extract_epsilon_optimal(
    field: &ValueField,
    model: &CoefficientSet,
    env: &BrownianEnvironment,
    controls: &ControlSet,
    start: (usize, &[f64]),
    epsilon: f64,
    basis: &RegressionBasis,
) -> Result<(ControlPolicy, EpsilonOptimalReport)> {
    let policy = field.feedback_policy();
    let ensemble = crate::sde::simulate_forward(model, env, start, controls, &policy)?;
    let sol = solve_bdsde(model, env, &ensemble, controls, &policy, basis)?;
    let achieved = sol.y0();
    let field_value = field.value_at(start.0, start.1);
    let gap = field_value - achieved;
    let se = sol.y0_se;
    let certified = gap <= epsilon + 3.0 * se;
    Ok((
        policy,
        EpsilonOptimalReport {
            field_value,
            achieved,
            gap,
            epsilon,
            se,
            certified,
        },
    ))
}

// ---------------------------------------------------------------------------
// Continuity moduli
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ContinuityReport {
    /// (|dx|^2, E|u(t, x + dx) - u(t, x)|^2) per ladder point.
    pub x_ladder: Vec<(f64, f64)>,
    /// (|dt|, E|u(t + dt, x) - u(t, x)|^2) per ladder point.
    pub t_ladder: Vec<(f64, f64)>,
    /// Fitted slope of log E|du|^2 against log |dx|^2; 1 for Lipschitz.
    pub x_slope: f64,
    /// Fitted slope of log E|du|^2 against log |dt|; 1 for Holder-1/2.
    pub t_slope: f64,
    pub replicates: usize,
    pub pass: bool,
}

/// Fit the continuity moduli of the value field in space and time.
///
/// Expectations over the random field are taken over `replicates`
/// re-solves with derived B-seeds (the field is conditioned on its
/// backward driver, so the statistics need fresh drivers). Space
/// differences average over the probe list; time differences also average
/// over disjoint time probes.
#[allow(clippy::too_many_arguments)]
pub fn check_continuity(
    model: &CoefficientSet,
    env: &BrownianEnvironment,
    space: &SpaceGrid,
    controls: &ControlSet,
    backend: Backend,
    x_probes: &[Vec<f64>],
    x_offsets: &[f64],
    t_probe_steps: &[usize],
    t_offset_steps: &[usize],
    replicates: usize,
    rel_tol: f64,
) -> Result<ContinuityReport> {
    if x_offsets.len() < 2 || t_offset_steps.len() < 2 {
        return Err(Error::DegenerateLadder(
            "continuity ladders need >= 2 points".into(),
        ));
    }
    if replicates == 0 {
        return Err(Error::DegenerateLadder("need >= 1 replicate".into()));
    }
    let grid = env.grid();
    for &ts in t_probe_steps {
        let max_off = t_offset_steps.iter().max().copied().unwrap_or(0);
        if ts + max_off > grid.n_steps() {
            return Err(Error::ProbeOutsideGrid(format!(
                "time probe {ts} plus offset exceeds the grid"
            )));
        }
    }

    let mut x_acc = vec![Vec::new(); x_offsets.len()];
    let mut t_acc = vec![Vec::new(); t_offset_steps.len()];
    let t_mid = t_probe_steps.first().copied().unwrap_or(0);

    for r in 0..replicates {
        let b_seed_r = derive_seed(env.b_seed(), SeedDomain::Instance, &[r as u64]);
        let env_r = crate::env::build_environment(
            grid,
            1,
            model.dims().noise_w,
            model.dims().noise_b,
            derive_seed(env.master_seed(), SeedDomain::Instance, &[r as u64]),
            b_seed_r,
        )?;
        let field = solve_value_function(model, &env_r, space, controls, backend)?;

        for (oi, &off) in x_offsets.iter().enumerate() {
            for x in x_probes {
                let mut xs = x.clone();
                xs[0] += off;
                let du = field.value_at(t_mid, &xs) - field.value_at(t_mid, x);
                x_acc[oi].push(du * du);
            }
        }
        for (oi, &off) in t_offset_steps.iter().enumerate() {
            for &ts in t_probe_steps {
                for x in x_probes {
                    let du = field.value_at(ts + off, x) - field.value_at(ts, x);
                    t_acc[oi].push(du * du);
                }
            }
        }
    }

    let x_ladder: Vec<(f64, f64)> = x_offsets
        .iter()
        .zip(&x_acc)
        .map(|(&off, sq)| (off * off, mean(sq)))
        .collect();
    let t_ladder: Vec<(f64, f64)> = t_offset_steps
        .iter()
        .zip(&t_acc)
        .map(|(&off, sq)| (off as f64 * grid.dt(), mean(sq)))
        .collect();

    let x_slope = loglog_slope(
        &x_ladder.iter().map(|p| p.0).collect::<Vec<_>>(),
        &x_ladder.iter().map(|p| p.1).collect::<Vec<_>>(),
    );
    let t_slope = loglog_slope(
        &t_ladder.iter().map(|p| p.0).collect::<Vec<_>>(),
        &t_ladder.iter().map(|p| p.1).collect::<Vec<_>>(),
    );
    let pass = (x_slope - 1.0).abs() <= rel_tol && (t_slope - 1.0).abs() <= rel_tol;
    Ok(ContinuityReport {
        x_ladder,
        t_ladder,
        x_slope,
        t_slope,
        replicates,
        pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeffs::{ClosureCoefficients, ModelDims};
    use crate::env::build_environment;
    use crate::grid::TimeGrid;
    use std::sync::Arc;

    #[test]
    fn gauss_hermite_integrates_normal_moments() {
        let (nodes, weights) = gauss_hermite(5);
        let moment = |k: i32| -> f64 {
            nodes
                .iter()
                .zip(&weights)
                .map(|(x, w)| w * x.powi(k))
                .sum()
        };
        assert!((moment(0) - 1.0).abs() < 1e-12);
        assert!(moment(1).abs() < 1e-12);
        assert!((moment(2) - 1.0).abs() < 1e-12);
        assert!((moment(4) - 3.0).abs() < 1e-10);
        assert!((moment(6) - 15.0).abs() < 1e-9);
    }

    fn transport_model() -> CoefficientSet {
        // f = v, no dynamics: u(t, x) = T - t with argmax v = 1
        let coeffs = ClosureCoefficients {
            model_dims: ModelDims::scalar(),
            b: Box::new(|_, _, _, out| out.fill(0.0)),
            sigma: Box::new(|_, _, _, out| out.fill(0.0)),
            f: Box::new(|_, _, _, _, v| v[0]),
            g: Box::new(|_, _, _, _, out| out.fill(0.0)),
            h: Box::new(|_| 0.0),
        };
        CoefficientSet::new("transport", Arc::new(coeffs), 1.0, 0.5).unwrap()
    }

    fn penalize_action_model() -> CoefficientSet {
        // f = -v^2, everything else zero: u = 0, argmax v = 0
        let coeffs = ClosureCoefficients {
            model_dims: ModelDims::scalar(),
            b: Box::new(|_, _, _, out| out.fill(0.0)),
            sigma: Box::new(|_, _, _, out| out.fill(0.0)),
            f: Box::new(|_, _, _, _, v| -v[0] * v[0]),
            g: Box::new(|_, _, _, _, out| out.fill(0.0)),
            h: Box::new(|_| 0.0),
        };
        CoefficientSet::new("penalize-action", Arc::new(coeffs), 1.0, 0.5).unwrap()
    }

    fn setup() -> (BrownianEnvironment, SpaceGrid, ControlSet) {
        let grid = TimeGrid::new(0.0, 1.0, 25).unwrap();
        let env = build_environment(&grid, 1, 1, 1, 5, 3).unwrap();
        let space = SpaceGrid::symmetric_1d(2.0, 21).unwrap();
        let controls = ControlSet::scalar(&[-1.0, 0.0, 1.0]).unwrap();
        (env, space, controls)
    }

    #[test]
    fn action_penalty_gives_zero_value_and_zero_control() {
        let (env, space, controls) = setup();
        let model = penalize_action_model();
        let field = solve_value_function(
            &model,
            &env,
            &space,
            &controls,
            Backend::GridDp { gh_nodes: 5 },
        )
        .unwrap();
        for i in 0..field.values.nrows() {
            for j in 0..field.values.ncols() {
                assert!(field.values[[i, j]].abs() < 1e-12);
                if i < field.values.nrows() - 1 {
                    assert_eq!(field.argmax[[i, j]], 1, "argmax must pick v = 0");
                }
            }
        }
    }

    #[test]
    fn transport_value_is_time_to_go_with_argmax_one() {
        let (env, space, controls) = setup();
        let model = transport_model();
        let field = solve_value_function(
            &model,
            &env,
            &space,
            &controls,
            Backend::GridDp { gh_nodes: 5 },
        )
        .unwrap();
        let grid = env.grid();
        for i in 0..grid.n_points() {
            let expect = grid.horizon() - grid.point(i);
            for j in 0..field.values.ncols() {
                assert!(
                    (field.values[[i, j]] - expect).abs() < 1e-12,
                    "u({i},{j}) = {} expect {expect}",
                    field.values[[i, j]]
                );
                if i < grid.n_steps() {
                    assert_eq!(field.argmax[[i, j]], 2);
                }
            }
        }
    }

    #[test]
    fn terminal_row_matches_h_exactly() {
        let (env, space, controls) = setup();
        let coeffs = ClosureCoefficients {
            model_dims: ModelDims::scalar(),
            b: Box::new(|_, _, _, out| out.fill(0.0)),
            sigma: Box::new(|_, _, _, out| out[0] = 0.3),
            f: Box::new(|_, _, _, _, _| 0.0),
            g: Box::new(|_, _, _, _, out| out.fill(0.0)),
            h: Box::new(|x| -x[0] * x[0]),
        };
        let model = CoefficientSet::new("lq", Arc::new(coeffs), 1.0, 0.5).unwrap();
        let field = solve_value_function(
            &model,
            &env,
            &space,
            &controls,
            Backend::GridDp { gh_nodes: 5 },
        )
        .unwrap();
        let last = field.values.nrows() - 1;
        for j in 0..field.values.ncols() {
            let x = space.node(j)[0];
            assert_eq!(field.values[[last, j]], -x * x);
        }
    }

    #[test]
    fn semigroup_zero_window_returns_terminal_field() {
        let (env, _space, controls) = setup();
        let model = transport_model();
        let eta = |x: &[f64]| 3.0 * x[0] + 1.0;
        let sg = backward_semigroup(
            &model,
            &env,
            (4, &[0.5]),
            0,
            &eta,
            &controls,
            0,
            100,
            &RegressionBasis::default(),
            0,
        )
        .unwrap();
        assert_eq!(sg.value, 2.5);
        assert_eq!(sg.se, 0.0);
    }

    #[test]
    fn dpp_exact_on_deterministic_transport() {
        let (env, space, controls) = setup();
        let model = transport_model();
        let field = solve_value_function(
            &model,
            &env,
            &space,
            &controls,
            Backend::GridDp { gh_nodes: 5 },
        )
        .unwrap();
        let probes = vec![(0usize, vec![0.0]), (5, vec![0.5]), (10, vec![-1.0])];
        let report = check_dpp(
            &field,
            &model,
            &env,
            &controls,
            &[1, 5, 10],
            &probes,
            200,
            &RegressionBasis::default(),
        )
        .unwrap();
        assert!(report.pass, "{report:?}");
        for p in &report.probes {
            assert!(p.residual <= 1e-10, "residual {} at {:?}", p.residual, p);
        }
    }

    #[test]
    fn dpp_full_horizon_window_unwinds_the_definition() {
        // delta spanning the whole grid compares u(t0, x) against the best
        // constant-control cost from (t0, x); for the transport model that
        // is exact
        let (env, space, controls) = setup();
        let model = transport_model();
        let field = solve_value_function(
            &model,
            &env,
            &space,
            &controls,
            Backend::GridDp { gh_nodes: 5 },
        )
        .unwrap();
        let n = env.grid().n_steps();
        let report = check_dpp(
            &field,
            &model,
            &env,
            &controls,
            &[n],
            &[(0usize, vec![0.25])],
            200,
            &RegressionBasis::default(),
        )
        .unwrap();
        assert!(report.pass, "{report:?}");
        assert!(report.probes[0].residual <= 1e-10);
    }

    #[test]
    fn epsilon_optimal_policy_on_transport_has_zero_gap() {
        let grid = TimeGrid::new(0.0, 1.0, 25).unwrap();
        let env = build_environment(&grid, 200, 1, 1, 5, 3).unwrap();
        let space = SpaceGrid::symmetric_1d(2.0, 21).unwrap();
        let controls = ControlSet::scalar(&[-1.0, 0.0, 1.0]).unwrap();
        let model = transport_model();
        let field = solve_value_function(
            &model,
            &env,
            &space,
            &controls,
            Backend::GridDp { gh_nodes: 5 },
        )
        .unwrap();
        let (policy, rep) = extract_epsilon_optimal(
            &field,
            &model,
            &env,
            &controls,
            (0, &[0.0]),
            0.05,
            &RegressionBasis::default(),
        )
        .unwrap();
        assert!(matches!(policy, ControlPolicy::Feedback(_)));
        assert!(rep.gap.abs() < 1e-10, "gap {}", rep.gap);
        assert!(rep.certified);
    }

    #[test]
    fn singleton_control_set_certifies_trivially() {
        let grid = TimeGrid::new(0.0, 1.0, 20).unwrap();
        let env = build_environment(&grid, 100, 1, 1, 5, 3).unwrap();
        let space = SpaceGrid::symmetric_1d(2.0, 11).unwrap();
        let controls = ControlSet::scalar(&[0.7]).unwrap();
        let model = transport_model();
        let field = solve_value_function(
            &model,
            &env,
            &space,
            &controls,
            Backend::GridDp { gh_nodes: 3 },
        )
        .unwrap();
        let (_, rep) = extract_epsilon_optimal(
            &field,
            &model,
            &env,
            &controls,
            (0, &[0.0]),
            0.05,
            &RegressionBasis::default(),
        )
        .unwrap();
        assert!(rep.gap.abs() < 1e-10);
        assert!(rep.certified);
    }

    #[test]
    fn backends_agree_on_transport_exactly() {
        let (env, space, controls) = setup();
        let model = transport_model();
        let a = solve_value_function(
            &model,
            &env,
            &space,
            &controls,
            Backend::GridDp { gh_nodes: 5 },
        )
        .unwrap();
        let b = solve_value_function(
            &model,
            &env,
            &space,
            &controls,
            Backend::RegressionMc { m_sub: 64 },
        )
        .unwrap();
        for i in 0..a.values.nrows() {
            for j in 0..a.values.ncols() {
                assert!((a.values[[i, j]] - b.values[[i, j]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn grid_dp_refuses_high_dimension() {
        let grid = TimeGrid::new(0.0, 1.0, 5).unwrap();
        let env = build_environment(&grid, 1, 1, 1, 5, 3).unwrap();
        let coeffs = ClosureCoefficients {
            model_dims: ModelDims {
                state: 3,
                noise_w: 1,
                noise_b: 1,
                control: 1,
            },
            b: Box::new(|_, _, _, out| out.fill(0.0)),
            sigma: Box::new(|_, _, _, out| out.fill(0.0)),
            f: Box::new(|_, _, _, _, _| 0.0),
            g: Box::new(|_, _, _, _, out| out.fill(0.0)),
            h: Box::new(|_| 0.0),
        };
        let model = CoefficientSet::new("3d", Arc::new(coeffs), 1.0, 0.5).unwrap();
        let space = SpaceGrid::new(vec![
            crate::grid::Axis {
                lo: -1.0,
                hi: 1.0,
                count: 3
            };
            3
        ])
        .unwrap();
        let controls = ControlSet::scalar(&[0.0]).unwrap();
        let err = solve_value_function(
            &model,
            &env,
            &space,
            &controls,
            Backend::GridDp { gh_nodes: 3 },
        )
        .unwrap_err();
        assert!(matches!(err, Error::Precondition(_)));
    }
}
