//! Least-squares regression used to realize conditional expectations.
//!
//! The backward solver conditions on the current state with the backward
//! driver path held fixed, and realizes `E[target | X_i]` as a regression
//! of per-path targets on the state. Two bases are supported: global
//! polynomials of a given total degree (standardized coordinates, default
//! degree 2) and piecewise-constant averages over a box partition of the
//! sample range. Rank-deficient polynomial designs fall back to the
//! piecewise-constant basis.
//!
//! Normal equations are accumulated sequentially over paths in index order,
//! so fits are bit-reproducible regardless of worker count.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum BasisKind {
    /// All monomials of total degree <= `degree` in standardized coordinates.
    GlobalPoly { degree: usize },
    /// Cell averages over `cells_per_axis`^n boxes spanning the sample range.
    PiecewiseConstant { cells_per_axis: usize },
}

/// Basis choice plus the guards applied during fitting.
#[derive(Debug, Clone)]
pub struct RegressionBasis {
    pub kind: BasisKind,
    /// Condition-number limit on the normal equations before falling back.
    pub cond_limit: f64,
    /// Cells per axis used by the fallback.
    pub fallback_cells: usize,
}

impl Default for RegressionBasis {
    fn default() -> Self {
        Self {
            kind: BasisKind::GlobalPoly { degree: 2 },
            cond_limit: 1e12,
            fallback_cells: 64,
        }
    }
}

impl RegressionBasis {
    pub fn poly(degree: usize) -> Self {
        Self {
            kind: BasisKind::GlobalPoly { degree },
            ..Default::default()
        }
    }

    pub fn cells(cells_per_axis: usize) -> Self {
        Self {
            kind: BasisKind::PiecewiseConstant { cells_per_axis },
            ..Default::default()
        }
    }
}

/// Monomial multi-indices of total degree <= degree over `dim` variables.
fn multi_indices(dim: usize, degree: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = vec![0usize; dim];
    fn rec(out: &mut Vec<Vec<usize>>, cur: &mut Vec<usize>, pos: usize, left: usize) {
        if pos == cur.len() {
            out.push(cur.clone());
            return;
        }
        for k in 0..=left {
            cur[pos] = k;
            rec(out, cur, pos + 1, left - k);
        }
    }
    rec(&mut out, &mut cur, 0, degree);
    // sort by total degree, then lexicographic, for a stable column order
    out.sort_by_key(|mi| (mi.iter().sum::<usize>(), mi.clone()));
    out
}

#[derive(Debug, Clone)]
enum FittedKind {
    Poly {
        powers: Vec<Vec<usize>>,
        mean: Vec<f64>,
        scale: Vec<f64>,
        coef: Vec<f64>,
    },
    Cells {
        lo: Vec<f64>,
        hi: Vec<f64>,
        cells_per_axis: usize,
        values: Vec<f64>,
        fallback: f64,
    },
}

/// A fitted conditional-expectation estimator.
#[derive(Debug, Clone)]
pub struct Fitted {
    kind: FittedKind,
}

impl Fitted {
    pub fn predict(&self, x: &[f64]) -> f64 {
        match &self.kind {
            FittedKind::Poly {
                powers,
                mean,
                scale,
                coef,
            } => {
                let mut acc = 0.0;
                for (mi, c) in powers.iter().zip(coef) {
                    let mut feat = 1.0;
                    for (ax, &k) in mi.iter().enumerate() {
                        if k > 0 {
                            let s = (x[ax] - mean[ax]) / scale[ax];
                            feat *= s.powi(k as i32);
                        }
                    }
                    acc += c * feat;
                }
                acc
            }
            FittedKind::Cells {
                lo,
                hi,
                cells_per_axis,
                values,
                fallback,
            } => {
                let mut flat = 0usize;
                for ax in 0..lo.len() {
                    let w = hi[ax] - lo[ax];
                    let u = if w <= 0.0 {
                        0
                    } else {
                        let r = ((x[ax] - lo[ax]) / w * *cells_per_axis as f64).floor();
                        (r.max(0.0) as usize).min(cells_per_axis - 1)
                    };
                    flat = flat * cells_per_axis + u;
                }
                let v = values[flat];
                if v.is_nan() {
                    *fallback
                } else {
                    v
                }
            }
        }
    }
}

/// Result of a (multi-target) fit.
#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub fits: Vec<Fitted>,
    /// True when the polynomial design was rank-deficient and the
    /// piecewise-constant fallback was used instead.
    pub fell_back: bool,
}

impl RegressionBasis {
    /// Fit each target in `targets` against the states `xs` (row-major
    /// `m x dim`). All targets share one design factorization.
    pub fn fit_multi(&self, xs: &[f64], dim: usize, targets: &[&[f64]]) -> Result<FitOutcome> {
        let m = xs.len() / dim.max(1);
        if m == 0 || dim == 0 {
            return Err(Error::Regression {
                step: 0,
                reason: "empty sample".into(),
            });
        }
        for t in targets {
            if t.len() != m {
                return Err(Error::Regression {
                    step: 0,
                    reason: "target length mismatch".into(),
                });
            }
            if t.iter().any(|v| !v.is_finite()) {
                return Err(Error::Regression {
                    step: 0,
                    reason: "non-finite regression target".into(),
                });
            }
        }

        match self.kind {
            BasisKind::GlobalPoly { degree } => {
                match fit_poly(xs, dim, m, degree, self.cond_limit, targets) {
                    Some(fits) => Ok(FitOutcome {
                        fits,
                        fell_back: false,
                    }),
                    None => {
                        let fits = fit_cells(xs, dim, m, self.fallback_cells, targets);
                        Ok(FitOutcome {
                            fits,
                            fell_back: true,
                        })
                    }
                }
            }
            BasisKind::PiecewiseConstant { cells_per_axis } => {
                let fits = fit_cells(xs, dim, m, cells_per_axis, targets);
                Ok(FitOutcome {
                    fits,
                    fell_back: false,
                })
            }
        }
    }

    pub fn fit(&self, xs: &[f64], dim: usize, target: &[f64]) -> Result<(Fitted, bool)> {
        let out = self.fit_multi(xs, dim, &[target])?;
        Ok((out.fits.into_iter().next().expect("one fit"), out.fell_back))
    }
}

fn fit_poly(
    xs: &[f64],
    dim: usize,
    m: usize,
    degree: usize,
    cond_limit: f64,
    targets: &[&[f64]],
) -> Option<Vec<Fitted>> {
    // standardize coordinates; coordinates with ~zero spread are degenerate
    // and any monomial touching them is dropped (the constant-start case).
    let mut mean = vec![0.0; dim];
    let mut scale = vec![0.0; dim];
    for ax in 0..dim {
        let mut s = 0.0;
        for p in 0..m {
            s += xs[p * dim + ax];
        }
        mean[ax] = s / m as f64;
        let mut v = 0.0;
        for p in 0..m {
            v += (xs[p * dim + ax] - mean[ax]).powi(2);
        }
        scale[ax] = (v / m as f64).sqrt();
    }
    let degenerate: Vec<bool> = scale.iter().map(|&s| s < 1e-12).collect();
    for ax in 0..dim {
        if degenerate[ax] {
            scale[ax] = 1.0;
        }
    }

    let powers: Vec<Vec<usize>> = multi_indices(dim, degree)
        .into_iter()
        .filter(|mi| {
            mi.iter()
                .enumerate()
                .all(|(ax, &k)| k == 0 || !degenerate[ax])
        })
        .collect();
    let p = powers.len();
    if p > m {
        return None;
    }

    // normal equations, accumulated in fixed path order
    let mut gram = DMatrix::<f64>::zeros(p, p);
    let mut rhs: Vec<DVector<f64>> = targets.iter().map(|_| DVector::zeros(p)).collect();
    let mut feat = vec![0.0; p];
    for s in 0..m {
        for (j, mi) in powers.iter().enumerate() {
            let mut f = 1.0;
            for (ax, &k) in mi.iter().enumerate() {
                if k > 0 {
                    let z = (xs[s * dim + ax] - mean[ax]) / scale[ax];
                    f *= z.powi(k as i32);
                }
            }
            feat[j] = f;
        }
        for a in 0..p {
            for b in a..p {
                gram[(a, b)] += feat[a] * feat[b];
            }
            for (ti, t) in targets.iter().enumerate() {
                rhs[ti][a] += feat[a] * t[s];
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            gram[(a, b)] = gram[(b, a)];
        }
    }

    let chol = Cholesky::new(gram)?;
    // cheap condition estimate from the Cholesky diagonal
    let diag = chol.l_dirty().diagonal();
    let dmax = diag.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let dmin = diag.iter().cloned().fold(f64::INFINITY, f64::min);
    if dmin <= 0.0 || !dmin.is_finite() || (dmax / dmin).powi(2) > cond_limit {
        return None;
    }

    let fits = rhs
        .into_iter()
        .map(|r| {
            let coef = chol.solve(&r);
            Fitted {
                kind: FittedKind::Poly {
                    powers: powers.clone(),
                    mean: mean.clone(),
                    scale: scale.clone(),
                    coef: coef.iter().cloned().collect(),
                },
            }
        })
        .collect();
    Some(fits)
}

fn fit_cells(xs: &[f64], dim: usize, m: usize, cells_per_axis: usize, targets: &[&[f64]]) -> Vec<Fitted> {
    let cells_per_axis = cells_per_axis.max(1);
    let mut lo = vec![f64::INFINITY; dim];
    let mut hi = vec![f64::NEG_INFINITY; dim];
    for s in 0..m {
        for ax in 0..dim {
            lo[ax] = lo[ax].min(xs[s * dim + ax]);
            hi[ax] = hi[ax].max(xs[s * dim + ax]);
        }
    }
    let n_cells = cells_per_axis.pow(dim as u32);
    let mut cell_of = vec![0usize; m];
    for s in 0..m {
        let mut flat = 0usize;
        for ax in 0..dim {
            let w = hi[ax] - lo[ax];
            let u = if w <= 0.0 {
                0
            } else {
                let r = ((xs[s * dim + ax] - lo[ax]) / w * cells_per_axis as f64).floor();
                (r.max(0.0) as usize).min(cells_per_axis - 1)
            };
            flat = flat * cells_per_axis + u;
        }
        cell_of[s] = flat;
    }

    targets
        .iter()
        .map(|t| {
            let mut sums = vec![0.0f64; n_cells];
            let mut counts = vec![0usize; n_cells];
            let mut total = 0.0;
            for s in 0..m {
                sums[cell_of[s]] += t[s];
                counts[cell_of[s]] += 1;
                total += t[s];
            }
            let global = total / m as f64;
            let values: Vec<f64> = sums
                .iter()
                .zip(&counts)
                .map(|(&s, &c)| if c == 0 { f64::NAN } else { s / c as f64 })
                .collect();
            Fitted {
                kind: FittedKind::Cells {
                    lo: lo.clone(),
                    hi: hi.clone(),
                    cells_per_axis,
                    values,
                    fallback: global,
                },
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn recovers_polynomial_in_span() {
        let mut rng = crate::rng::stream(1, crate::rng::SeedDomain::Validation, &[]);
        let m = 2000;
        let xs: Vec<f64> = (0..m).map(|_| rng.random_range(-2.0..2.0)).collect();
        let target: Vec<f64> = xs.iter().map(|x| 1.0 - 0.5 * x + 0.25 * x * x).collect();
        let basis = RegressionBasis::poly(2);
        let (fit, fell_back) = basis.fit(&xs, 1, &target).unwrap();
        assert!(!fell_back);
        for &x in &[-1.9, -0.4, 0.0, 1.2] {
            let p = fit.predict(&[x]);
            let e = 1.0 - 0.5 * x + 0.25 * x * x;
            assert!((p - e).abs() < 1e-9, "x={x} p={p} e={e}");
        }
    }

    #[test]
    fn conditional_mean_beats_noise() {
        let mut rng = crate::rng::stream(2, crate::rng::SeedDomain::Validation, &[]);
        let m = 50_000;
        let xs: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
        let target: Vec<f64> = xs
            .iter()
            .map(|x| x * x + 0.3 * rng.random_range(-1.0..1.0f64))
            .collect();
        let basis = RegressionBasis::poly(2);
        let (fit, _) = basis.fit(&xs, 1, &target).unwrap();
        for &x in &[-0.8, 0.0, 0.5] {
            assert!((fit.predict(&[x]) - x * x).abs() < 0.01);
        }
    }

    #[test]
    fn constant_states_fall_back_to_mean() {
        // all states identical: the polynomial design keeps only the
        // intercept, so the fit is the sample mean
        let xs = vec![1.5; 100];
        let target: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let basis = RegressionBasis::poly(2);
        let (fit, fell_back) = basis.fit(&xs, 1, &target).unwrap();
        assert!(!fell_back, "degenerate coords are dropped, not a fallback");
        assert!((fit.predict(&[1.5]) - 49.5).abs() < 1e-9);
    }

    #[test]
    fn piecewise_constant_averages_cells() {
        let xs = vec![0.1, 0.2, 0.8, 0.9];
        let target = vec![1.0, 3.0, 10.0, 20.0];
        let basis = RegressionBasis::cells(2);
        let (fit, _) = basis.fit(&xs, 1, &target).unwrap();
        assert!((fit.predict(&[0.15]) - 2.0).abs() < 1e-12);
        assert!((fit.predict(&[0.85]) - 15.0).abs() < 1e-12);
    }

    #[test]
    fn multi_target_shares_design() {
        let xs: Vec<f64> = (0..100).map(|i| i as f64 / 50.0 - 1.0).collect();
        let t1: Vec<f64> = xs.iter().map(|x| 2.0 * x).collect();
        let t2: Vec<f64> = xs.iter().map(|x| -x + 1.0).collect();
        let out = RegressionBasis::poly(2)
            .fit_multi(&xs, 1, &[&t1, &t2])
            .unwrap();
        assert_eq!(out.fits.len(), 2);
        assert!((out.fits[0].predict(&[0.3]) - 0.6).abs() < 1e-9);
        assert!((out.fits[1].predict(&[0.3]) - 0.7).abs() < 1e-9);
    }

    #[test]
    fn two_dim_poly_features() {
        let mut rng = crate::rng::stream(3, crate::rng::SeedDomain::Validation, &[]);
        let m = 4000;
        let mut xs = Vec::with_capacity(2 * m);
        let mut target = Vec::with_capacity(m);
        for _ in 0..m {
            let a: f64 = rng.random_range(-1.0..1.0);
            let b: f64 = rng.random_range(-1.0..1.0);
            xs.push(a);
            xs.push(b);
            target.push(a * b + 0.5 * a - b * b);
        }
        let (fit, _) = RegressionBasis::poly(2).fit(&xs, 2, &target).unwrap();
        let p = fit.predict(&[0.4, -0.3]);
        let e = 0.4 * -0.3 + 0.2 - 0.09;
        assert!((p - e).abs() < 1e-9, "p={p} e={e}");
    }
}
