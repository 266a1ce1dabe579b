//! The Brownian environment: a seeded ensemble of forward W-increments and
//! one shared backward-driver B-path.
//!
//! All W-paths share the single realized B-path; solving conditions on it,
//! which is the discrete counterpart of the value field being measurable
//! with respect to the backward driver's filtration. Statistics over the
//! random field are obtained by re-running with several `b_seed` values,
//! never by mixing B-paths inside one run.

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::rng::{stream, SeedDomain};

#[derive(Debug, Clone)]
pub struct BrownianEnvironment {
    grid: TimeGrid,
    /// Forward increments, `m_paths x n_steps x d`.
    w_increments: Array3<f64>,
    /// Shared backward-driver increments, `n_steps x l`.
    b_increments: Array2<f64>,
    master_seed: u64,
    b_seed: u64,
}

impl BrownianEnvironment {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn m_paths(&self) -> usize {
        self.w_increments.shape()[0]
    }

    pub fn dim_w(&self) -> usize {
        self.w_increments.shape()[2]
    }

    pub fn dim_b(&self) -> usize {
        self.b_increments.shape()[1]
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn b_seed(&self) -> u64 {
        self.b_seed
    }

    /// Increment `dW` of path `p` at step `i` (length d).
    pub fn w_increment(&self, p: usize, i: usize) -> &[f64] {
        self.w_increments
            .slice(ndarray::s![p, i, ..])
            .to_slice()
            .expect("contiguous")
    }

    /// Shared increment `dB` at step `i` (length l).
    pub fn b_increment(&self, i: usize) -> &[f64] {
        self.b_increments
            .slice(ndarray::s![i, ..])
            .to_slice()
            .expect("contiguous")
    }

    /// `B_T - B_{t_i}` componentwise (sum of increments from `i` on).
    pub fn b_tail_sum(&self, i: usize) -> Vec<f64> {
        let l = self.dim_b();
        let mut acc = vec![0.0; l];
        for j in i..self.grid.n_steps() {
            for c in 0..l {
                acc[c] += self.b_increments[[j, c]];
            }
        }
        acc
    }

    pub fn w_array(&self) -> &Array3<f64> {
        &self.w_increments
    }

    pub fn b_array(&self) -> &Array2<f64> {
        &self.b_increments
    }

    /// Coarsen the time grid 2x, summing consecutive B-increments so the
    /// realized backward path is preserved at the shared grid points.
    /// W-increments are regenerated for a single path (the coarse
    /// environment backs quadrature solves that do not consume W). Used by
    /// the refinement study that prices the weak-form tolerance.
    pub fn coarsen_time(&self) -> Result<BrownianEnvironment> {
        let n = self.grid.n_steps();
        if n % 2 != 0 || n < 2 {
            return Err(Error::InvalidGrid(format!(
                "cannot halve a grid with {n} steps"
            )));
        }
        let coarse_grid = TimeGrid::new(self.grid.t0(), self.grid.horizon(), n / 2)?;
        let l = self.dim_b();
        let mut b = Array2::zeros((n / 2, l));
        for i in 0..n / 2 {
            for c in 0..l {
                b[[i, c]] = self.b_increments[[2 * i, c]] + self.b_increments[[2 * i + 1, c]];
            }
        }
        let mut coarse = build_environment(&coarse_grid, 1, self.dim_w(), l, self.master_seed, self.b_seed)?;
        coarse.b_increments = b;
        Ok(coarse)
    }

    /// A sibling environment with fresh W-increments (seeded by
    /// `w_seed`) and the *same* realized B-path. Used for sub-ensembles
    /// that must condition on the run's backward driver.
    pub fn with_fresh_w(&self, m_paths: usize, w_seed: u64) -> Result<BrownianEnvironment> {
        if m_paths == 0 {
            return Err(Error::InvalidGrid("m_paths must be >= 1".into()));
        }
        let n_steps = self.grid.n_steps();
        let dim_w = self.dim_w();
        let sqrt_dt = self.grid.dt().sqrt();
        let mut w = Array3::zeros((m_paths, n_steps, dim_w));
        w.axis_iter_mut(ndarray::Axis(0))
            .into_par_iter()
            .enumerate()
            .for_each(|(p, mut row)| {
                let mut rng = stream(w_seed, SeedDomain::ForwardPath, &[p as u64]);
                for i in 0..n_steps {
                    for c in 0..dim_w {
                        let gauss: f64 = rng.sample(StandardNormal);
                        row[[i, c]] = sqrt_dt * gauss;
                    }
                }
            });
        Ok(BrownianEnvironment {
            grid: self.grid.clone(),
            w_increments: w,
            b_increments: self.b_increments.clone(),
            master_seed: w_seed,
            b_seed: self.b_seed,
        })
    }
}

/// Build the environment. Path `p`'s stream is derived from
/// `(master_seed, p)`, so its noise does not depend on `m_paths` or on the
/// degree of parallelism used to fill the arrays.
pub fn build_environment(
    grid: &TimeGrid,
    m_paths: usize,
    dim_w: usize,
    dim_b: usize,
    master_seed: u64,
    b_seed: u64,
) -> Result<BrownianEnvironment> {
    if m_paths == 0 {
        return Err(Error::InvalidGrid("m_paths must be >= 1".into()));
    }
    if dim_w == 0 || dim_b == 0 {
        return Err(Error::DimensionMismatch(
            "noise dimensions must be >= 1".into(),
        ));
    }
    let n_steps = grid.n_steps();
    let sqrt_dt = grid.dt().sqrt();

    let mut w = Array3::zeros((m_paths, n_steps, dim_w));
    w.axis_iter_mut(ndarray::Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(p, mut row)| {
            let mut rng = stream(master_seed, SeedDomain::ForwardPath, &[p as u64]);
            for i in 0..n_steps {
                for c in 0..dim_w {
                    let gauss: f64 = rng.sample(StandardNormal);
                    row[[i, c]] = sqrt_dt * gauss;
                }
            }
        });

    let mut b = Array2::zeros((n_steps, dim_b));
    {
        let mut rng = stream(b_seed, SeedDomain::BackwardDriver, &[]);
        for i in 0..n_steps {
            for c in 0..dim_b {
                let gauss: f64 = rng.sample(StandardNormal);
                b[[i, c]] = sqrt_dt * gauss;
            }
        }
    }

    Ok(BrownianEnvironment {
        grid: grid.clone(),
        w_increments: w,
        b_increments: b,
        master_seed,
        b_seed,
    })
}

/// Per-step sample statistics of the W-increments, for the environment
/// sanity invariant (mean near 0 and variance near dt, in standard-error
/// units).
#[derive(Debug, Clone)]
pub struct EnvStats {
    /// max over (step, component) of |mean| / SE(mean)
    pub worst_mean_z: f64,
    /// max over (step, component) of |var - dt| / SE(var)
    pub worst_var_z: f64,
}

pub fn environment_stats(env: &BrownianEnvironment) -> EnvStats {
    let m = env.m_paths() as f64;
    let dt = env.grid().dt();
    let se_mean = (dt / m).sqrt();
    // Var of the sample variance of N(0, dt) is 2 dt^2 / (m - 1).
    let se_var = (2.0 * dt * dt / (m - 1.0)).sqrt();
    let mut worst_mean_z: f64 = 0.0;
    let mut worst_var_z: f64 = 0.0;
    for i in 0..env.grid().n_steps() {
        for c in 0..env.dim_w() {
            let col = env.w_increments.slice(ndarray::s![.., i, c]);
            let mean = col.sum() / m;
            let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1.0);
            worst_mean_z = worst_mean_z.max(mean.abs() / se_mean);
            worst_var_z = worst_var_z.max((var - dt).abs() / se_var);
        }
    }
    EnvStats {
        worst_mean_z,
        worst_var_z,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> TimeGrid {
        TimeGrid::new(0.0, 1.0, 50).unwrap()
    }

    #[test]
    fn rejects_zero_paths_and_dims() {
        assert!(build_environment(&grid(), 0, 1, 1, 1, 2).is_err());
        assert!(build_environment(&grid(), 10, 0, 1, 1, 2).is_err());
        assert!(build_environment(&grid(), 10, 1, 0, 1, 2).is_err());
    }

    #[test]
    fn same_seeds_reproduce_bit_identically() {
        let a = build_environment(&grid(), 200, 2, 1, 42, 7).unwrap();
        let b = build_environment(&grid(), 200, 2, 1, 42, 7).unwrap();
        assert_eq!(a.w_array(), b.w_array());
        assert_eq!(a.b_array(), b.b_array());
    }

    #[test]
    fn neighbouring_seeds_differ() {
        let a = build_environment(&grid(), 50, 1, 1, 42, 7).unwrap();
        let b = build_environment(&grid(), 50, 1, 1, 43, 7).unwrap();
        let c = build_environment(&grid(), 50, 1, 1, 42, 8).unwrap();
        assert_ne!(a.w_array(), b.w_array());
        assert_ne!(a.b_array(), c.b_array());
        // changing only the b-seed leaves W untouched and vice versa
        assert_eq!(a.w_array(), c.w_array());
        assert_eq!(a.b_array(), b.b_array());
    }

    #[test]
    fn path_noise_independent_of_path_count() {
        let small = build_environment(&grid(), 10, 1, 1, 42, 7).unwrap();
        let large = build_environment(&grid(), 1000, 1, 1, 42, 7).unwrap();
        for p in 0..10 {
            for i in 0..grid().n_steps() {
                assert_eq!(small.w_increment(p, i), large.w_increment(p, i));
            }
        }
    }

    #[test]
    fn per_step_moments_within_five_standard_errors() {
        // dt = 0.02 here; the acceptance-scale variant (M = 1e5) lives in
        // the integration suite.
        let env = build_environment(&grid(), 20_000, 1, 1, 42, 7).unwrap();
        let stats = environment_stats(&env);
        assert!(stats.worst_mean_z < 5.0, "mean z {}", stats.worst_mean_z);
        assert!(stats.worst_var_z < 5.0, "var z {}", stats.worst_var_z);
    }

    #[test]
    fn b_tail_sum_matches_direct_sum() {
        let env = build_environment(&grid(), 3, 1, 2, 1, 2).unwrap();
        let tail = env.b_tail_sum(10);
        for c in 0..2 {
            let direct: f64 = (10..50).map(|i| env.b_increment(i)[c]).sum();
            assert!((tail[c] - direct).abs() < 1e-15);
        }
    }
}
