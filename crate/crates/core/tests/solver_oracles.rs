//! Backward-solver checks against independent oracles.
//!
//! Each expected value here is produced by a route that does not share code
//! with the solver under test: direct Monte Carlo with fresh seeds, closed
//! forms validated on a fine deterministic grid first, or hand integration.

use std::collections::BTreeMap;
use std::sync::Arc;

use bdsc::bdsde::{
    check_comparison, check_stability, shift_parameters, solve_bdsde, StabilityLadder,
};
use bdsc::coeffs::{ClosureCoefficients, CoefficientSet, ModelDims};
use bdsc::env::build_environment;
use bdsc::grid::{ControlSet, TimeGrid};
use bdsc::policy::ControlPolicy;
use bdsc::regression::RegressionBasis;
use bdsc::registry::{build_model, linear_bdsde_closed_form};
use bdsc::rng::{stream, SeedDomain};
use bdsc::sde::simulate_forward;
use bdsc::value::backward_semigroup;
use rand::Rng;
use rand_distr::StandardNormal;

fn scalar_controls() -> ControlSet {
    ControlSet::scalar(&[0.0]).unwrap()
}

// ============================================================================
// Martingale property: Y_{t0} ~ E[X_T | X_{t0} = x0]
// ============================================================================

#[test]
fn martingale_y0_matches_nested_monte_carlo_oracle() {
    let x0 = 1.0;
    let grid = TimeGrid::new(0.0, 1.0, 50).unwrap();
    let env = build_environment(&grid, 10_000, 1, 1, 42, 7).unwrap();
    let model = build_model("martingale", &BTreeMap::new()).unwrap();
    let controls = scalar_controls();
    let policy = ControlPolicy::Constant(0);
    let ens = simulate_forward(&model, &env, (0, &[x0]), &controls, &policy).unwrap();
    let sol = solve_bdsde(&model, &env, &ens, &controls, &policy, &RegressionBasis::default())
        .unwrap();

    // oracle: direct Monte Carlo of E[x0 + W_T] with a fresh generator
    let mut rng = stream(777, SeedDomain::Validation, &[]);
    let m_oracle = 200_000usize;
    let mut acc = 0.0;
    let mut acc_sq = 0.0;
    for _ in 0..m_oracle {
        let g: f64 = rng.sample(StandardNormal);
        let xt = x0 + g; // W_T ~ N(0, T), T = 1
        acc += xt;
        acc_sq += xt * xt;
    }
    let oracle = acc / m_oracle as f64;
    let oracle_se = ((acc_sq / m_oracle as f64 - oracle * oracle) / m_oracle as f64).sqrt();

    let tol = 3.0 * (sol.y0_se + oracle_se) + 0.05 * grid.dt().sqrt();
    let err = (sol.y0() - oracle).abs();
    assert!(
        err <= tol,
        "martingale Y0 {} vs oracle {} (err {err}, tol {tol})",
        sol.y0(),
        oracle
    );
}

// ============================================================================
// Linear driver closed form
// ============================================================================

/// Deterministic-in-W product recursion for the linear model: with sigma
/// and the forward drift zero, `Y_i = Y_{i+1} (1 + a dt + b dB_i)`.
fn linear_product_recursion(a: f64, b: f64, terminal: f64, dt: f64, db: &[f64]) -> f64 {
    let mut y = terminal;
    for i in (0..db.len()).rev() {
        y *= 1.0 + a * dt + b * db[i];
    }
    y
}

#[test]
fn linear_closed_form_validated_on_fine_grid_then_matched_by_solver() {
    let (a, b) = (0.5, 0.5);

    // step 1: validate the closed form against a fine deterministic
    // recursion (2^12 steps) on an independent backward path
    let fine_steps = 1 << 12;
    let fine_grid = TimeGrid::new(0.0, 1.0, fine_steps).unwrap();
    let fine_env = build_environment(&fine_grid, 1, 1, 1, 5, 99).unwrap();
    let db: Vec<f64> = (0..fine_steps).map(|i| fine_env.b_increment(i)[0]).collect();
    let recursion = linear_product_recursion(a, b, 1.0, fine_grid.dt(), &db);
    let closed = linear_bdsde_closed_form(a, b, 1.0, 1.0, 0.0, db.iter().sum());
    let rel = (recursion - closed).abs() / closed.abs();
    assert!(
        rel < 0.01,
        "closed form {} vs fine recursion {} (rel {rel})",
        closed,
        recursion
    );

    // step 2: the solver on a production-scale grid must match the closed
    // form on its own realized backward path within 5%
    let grid = TimeGrid::new(0.0, 1.0, 200).unwrap();
    let env = build_environment(&grid, 2_000, 1, 1, 42, 7).unwrap();
    let model = build_model("linear-bdsde", &BTreeMap::new()).unwrap();
    let controls = scalar_controls();
    let policy = ControlPolicy::Constant(0);
    let x0 = 0.5;
    let ens = simulate_forward(&model, &env, (0, &[x0]), &controls, &policy).unwrap();
    let sol = solve_bdsde(&model, &env, &ens, &controls, &policy, &RegressionBasis::default())
        .unwrap();
    let expected = linear_bdsde_closed_form(a, b, 1.0 + x0, 1.0, 0.0, env.b_tail_sum(0)[0]);
    let rel = (sol.y0() - expected).abs() / expected.abs();
    assert!(
        rel < 0.05,
        "solver Y0 {} vs closed form {} (rel {rel})",
        sol.y0(),
        expected
    );
}

// ============================================================================
// Comparison-theorem gaps with hand oracles
// ============================================================================

fn linear_driver_model(a: f64, c: f64) -> CoefficientSet {
    let coeffs = ClosureCoefficients {
        model_dims: ModelDims::scalar(),
        b: Box::new(|_, _, _, out| out.fill(0.0)),
        sigma: Box::new(|_, _, _, out| out[0] = 1.0),
        f: Box::new(move |_, _, y, _, _| a * y),
        g: Box::new(|_, _, _, _, out| out.fill(0.0)),
        h: Box::new(move |_| c),
    };
    CoefficientSet::new(format!("lin-h{c}"), Arc::new(coeffs), 1.0, 0.5).unwrap()
}

#[test]
fn unit_terminal_shift_gap_matches_exponential_closed_form() {
    // f = a y, xi' = xi + 1: the gap solves dG/dt = -aG with G(T) = 1, so
    // G(t) = exp(a (T - t)) > 0 everywhere
    let a = 0.5;
    let grid = TimeGrid::new(0.0, 1.0, 100).unwrap();
    let env = build_environment(&grid, 2_000, 1, 1, 21, 3).unwrap();
    let low = linear_driver_model(a, 0.0);
    let high = linear_driver_model(a, 1.0);
    let controls = scalar_controls();
    let policy = ControlPolicy::Constant(0);
    let ens = simulate_forward(&low, &env, (0, &[0.0]), &controls, &policy).unwrap();
    let basis = RegressionBasis::default();
    let rep = check_comparison(&low, &high, &env, &ens, &controls, &policy, &basis).unwrap();
    assert!(rep.pass);
    assert!(rep.min_gap > 0.0, "min gap {}", rep.min_gap);

    let sol_low = solve_bdsde(&low, &env, &ens, &controls, &policy, &basis).unwrap();
    let sol_high = solve_bdsde(&high, &env, &ens, &controls, &policy, &basis).unwrap();
    let gap0 = sol_high.y0() - sol_low.y0();
    let expect = (a * 1.0f64).exp();
    assert!(
        (gap0 - expect).abs() < 0.01 * expect,
        "gap {} vs exp(a T) = {}",
        gap0,
        expect
    );
}

#[test]
fn constant_driver_shift_integrates_linearly() {
    // f' = f + 0.5 with f = g = 0 otherwise: Y'_0 - Y_0 = 0.5 (T - t0)
    let grid = TimeGrid::new(0.0, 1.0, 100).unwrap();
    let env = build_environment(&grid, 1_000, 1, 1, 33, 4).unwrap();
    let model = build_model("zero", &BTreeMap::new()).unwrap();
    let high = shift_parameters(&model, 0.0, 0.0, 0.5).unwrap();
    let controls = scalar_controls();
    let policy = ControlPolicy::Constant(0);
    let ens = simulate_forward(&model, &env, (0, &[0.0]), &controls, &policy).unwrap();
    let basis = RegressionBasis::default();
    let sol_low = solve_bdsde(&model, &env, &ens, &controls, &policy, &basis).unwrap();
    let sol_high = solve_bdsde(&high, &env, &ens, &controls, &policy, &basis).unwrap();
    let gap = sol_high.y0() - sol_low.y0();
    assert!((gap - 0.5).abs() < 1e-10, "gap {gap} vs 0.5 (T - t0)");
}

// ============================================================================
// Stability exponent ladder
// ============================================================================

#[test]
fn terminal_ladder_exponent_is_one_on_identity_payoff() {
    let grid = TimeGrid::new(0.0, 1.0, 50).unwrap();
    let env = build_environment(&grid, 5_000, 1, 1, 13, 5).unwrap();
    let model = build_model("martingale", &BTreeMap::new()).unwrap();
    let controls = scalar_controls();
    let rep = check_stability(
        &model,
        &env,
        (0, &[1.0]),
        &StabilityLadder::TerminalShift(vec![0.1, 0.05, 0.025]),
        &controls,
        &ControlPolicy::Constant(0),
        &RegressionBasis::default(),
        0.2,
        2.0,
    )
    .unwrap();
    assert!(rep.pass, "{rep:?}");
    assert!((rep.exponent - 1.0).abs() <= 0.2, "exponent {}", rep.exponent);
}

#[test]
fn start_shift_ladder_exponent_is_one_on_identity_payoff() {
    let grid = TimeGrid::new(0.0, 1.0, 50).unwrap();
    let env = build_environment(&grid, 5_000, 1, 1, 13, 5).unwrap();
    let model = build_model("martingale", &BTreeMap::new()).unwrap();
    let controls = scalar_controls();
    let rep = check_stability(
        &model,
        &env,
        (0, &[1.0]),
        &StabilityLadder::StartShift(vec![0.1, 0.05, 0.025]),
        &controls,
        &ControlPolicy::Constant(0),
        &RegressionBasis::default(),
        0.2,
        2.0,
    )
    .unwrap();
    assert!(rep.pass, "{rep:?}");
}

// ============================================================================
// Backward semigroup
// ============================================================================

#[test]
fn one_step_semigroup_matches_nested_monte_carlo() {
    // f = g = 0, one step: G is the regression estimate of
    // E[h(X_{t+dt}) | X_t = x] with h(x) = x^2, i.e. x^2 + sigma^2 dt
    let grid = TimeGrid::new(0.0, 1.0, 50).unwrap();
    let env = build_environment(&grid, 100, 1, 1, 9, 2).unwrap();
    let model = build_model("martingale", &BTreeMap::new()).unwrap();
    let controls = scalar_controls();
    let x = 0.8;
    let eta = |y: &[f64]| y[0] * y[0];
    let sg = backward_semigroup(
        &model,
        &env,
        (10, &[x]),
        1,
        &eta,
        &controls,
        0,
        50_000,
        &RegressionBasis::default(),
        0,
    )
    .unwrap();
    let expect = x * x + grid.dt();
    assert!(
        (sg.value - expect).abs() <= 3.0 * sg.se + 1e-3,
        "semigroup {} vs nested expectation {}",
        sg.value,
        expect
    );
}

#[test]
fn semigroup_composition_is_consistent() {
    // two steps at once vs one step applied to the one-step image, f = g = 0
    let grid = TimeGrid::new(0.0, 1.0, 50).unwrap();
    let env = build_environment(&grid, 100, 1, 1, 9, 2).unwrap();
    let model = build_model("martingale", &BTreeMap::new()).unwrap();
    let controls = scalar_controls();
    let basis = RegressionBasis::default();
    let x = 0.4;
    let h = |y: &[f64]| y[0] * y[0];

    let two = backward_semigroup(&model, &env, (10, &[x]), 2, &h, &controls, 0, 20_000, &basis, 1)
        .unwrap();

    // inner image evaluated pointwise by fresh sub-ensembles
    let inner = |y: &[f64]| -> f64 {
        backward_semigroup(&model, &env, (11, y), 1, &h, &controls, 0, 2_000, &basis, 2)
            .unwrap()
            .value
    };
    let nested = backward_semigroup(
        &model,
        &env,
        (10, &[x]),
        1,
        &inner,
        &controls,
        0,
        2_000,
        &basis,
        3,
    )
    .unwrap();

    // both routes estimate x^2 + 2 sigma^2 dt; allow twice the one-step
    // tolerance
    let one_step_tol = 3.0 * (two.se + nested.se) + 2e-3;
    assert!(
        (two.value - nested.value).abs() <= 2.0 * one_step_tol,
        "G2 {} vs nested {} (tol {})",
        two.value,
        nested.value,
        one_step_tol
    );
}
