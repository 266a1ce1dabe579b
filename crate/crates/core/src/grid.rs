//! Time, space, and control grids.

use crate::error::{Error, Result};

/// Uniform time grid on `[t0, horizon]` with `n_steps` steps.
///
/// Grid points are `t_i = t0 + i * dt` for `i = 0..=n_steps`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    t0: f64,
    horizon: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, horizon: f64, n_steps: usize) -> Result<Self> {
        if !(t0.is_finite() && horizon.is_finite()) {
            return Err(Error::InvalidGrid("non-finite time bounds".into()));
        }
        if t0 < 0.0 {
            return Err(Error::InvalidGrid(format!("t0 = {t0} must be >= 0")));
        }
        if t0 >= horizon {
            return Err(Error::InvalidGrid(format!(
                "t0 = {t0} must be < horizon = {horizon}"
            )));
        }
        if n_steps == 0 {
            return Err(Error::InvalidGrid("n_steps must be >= 1".into()));
        }
        Ok(Self {
            t0,
            horizon,
            n_steps,
        })
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn n_points(&self) -> usize {
        self.n_steps + 1
    }

    pub fn dt(&self) -> f64 {
        (self.horizon - self.t0) / self.n_steps as f64
    }

    pub fn point(&self, i: usize) -> f64 {
        debug_assert!(i <= self.n_steps);
        if i == self.n_steps {
            // keep the endpoint exact
            self.horizon
        } else {
            self.t0 + i as f64 * self.dt()
        }
    }

    /// Halve the step: endpoints stay exact, step count doubles.
    ///
    /// Refinement uses fresh seeds downstream; no Brownian-bridge coupling
    /// between an environment and its refinement is claimed.
    pub fn refine_half(&self) -> Self {
        Self {
            t0: self.t0,
            horizon: self.horizon,
            n_steps: self.n_steps * 2,
        }
    }
}

/// One spatial axis of a box-shaped grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Axis {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

impl Axis {
    pub fn spacing(&self) -> f64 {
        (self.hi - self.lo) / (self.count - 1) as f64
    }
}

/// Rectangular grid used for value-function tabulation, feedback policies,
/// and spatial quadrature on the truncated domain.
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceGrid {
    axes: Vec<Axis>,
}

impl SpaceGrid {
    pub fn new(axes: Vec<Axis>) -> Result<Self> {
        if axes.is_empty() {
            return Err(Error::InvalidGrid("space grid needs >= 1 axis".into()));
        }
        for (i, a) in axes.iter().enumerate() {
            if !(a.lo.is_finite() && a.hi.is_finite()) {
                return Err(Error::InvalidGrid(format!("axis {i}: non-finite bounds")));
            }
            if a.lo >= a.hi {
                return Err(Error::InvalidGrid(format!(
                    "axis {i}: lower bound {} must be < upper bound {}",
                    a.lo, a.hi
                )));
            }
            if a.count < 2 {
                return Err(Error::InvalidGrid(format!(
                    "axis {i}: need >= 2 points per axis"
                )));
            }
        }
        Ok(Self { axes })
    }

    /// Symmetric 1-D grid on `[-radius, radius]`.
    pub fn symmetric_1d(radius: f64, count: usize) -> Result<Self> {
        Self::new(vec![Axis {
            lo: -radius,
            hi: radius,
            count,
        }])
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn axes(&self) -> &[Axis] {
        &self.axes
    }

    pub fn node_count(&self) -> usize {
        self.axes.iter().map(|a| a.count).product()
    }

    /// Largest spacing across axes (the "cell size" in tolerance budgets).
    pub fn max_spacing(&self) -> f64 {
        self.axes
            .iter()
            .map(Axis::spacing)
            .fold(0.0_f64, f64::max)
    }

    /// Multi-index of a flat node index (row-major, last axis fastest).
    pub fn multi_index(&self, flat: usize) -> Vec<usize> {
        let mut rem = flat;
        let mut idx = vec![0usize; self.dim()];
        for ax in (0..self.dim()).rev() {
            idx[ax] = rem % self.axes[ax].count;
            rem /= self.axes[ax].count;
        }
        idx
    }

    pub fn flat_index(&self, multi: &[usize]) -> usize {
        let mut flat = 0usize;
        for ax in 0..self.dim() {
            flat = flat * self.axes[ax].count + multi[ax];
        }
        flat
    }

    /// Coordinates of a node, written into `out`.
    pub fn node_into(&self, flat: usize, out: &mut [f64]) {
        let multi = self.multi_index(flat);
        for ax in 0..self.dim() {
            out[ax] = self.axes[ax].lo + multi[ax] as f64 * self.axes[ax].spacing();
        }
    }

    pub fn node(&self, flat: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.node_into(flat, &mut out);
        out
    }

    /// Flat index of the grid node nearest to `x` (clamped into the box).
    pub fn nearest_node(&self, x: &[f64]) -> usize {
        let mut multi = vec![0usize; self.dim()];
        for ax in 0..self.dim() {
            let a = &self.axes[ax];
            let u = ((x[ax] - a.lo) / a.spacing()).round();
            multi[ax] = (u.max(0.0) as usize).min(a.count - 1);
        }
        self.flat_index(&multi)
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(&self.axes)
            .all(|(&xi, a)| xi >= a.lo && xi <= a.hi)
    }

    /// Multilinear interpolation of nodal `values` at `x`, with coordinates
    /// clamped into the box (constant extrapolation beyond the boundary).
    /// Allocation-free up to 8 dimensions; this sits on the solvers' hot
    /// paths.
    pub fn interpolate(&self, values: &[f64], x: &[f64]) -> f64 {
        debug_assert_eq!(values.len(), self.node_count());
        let dim = self.dim();
        assert!(dim <= 8, "interpolation supports up to 8 axes");
        let mut base = [0usize; 8];
        let mut frac = [0.0f64; 8];
        for ax in 0..dim {
            let a = &self.axes[ax];
            let u = ((x[ax] - a.lo) / a.spacing()).clamp(0.0, (a.count - 1) as f64);
            let i0 = (u.floor() as usize).min(a.count - 2);
            base[ax] = i0;
            frac[ax] = u - i0 as f64;
        }
        // Sum over the 2^dim cell corners.
        let corners = 1usize << dim;
        let mut acc = 0.0;
        for corner in 0..corners {
            let mut w = 1.0;
            let mut flat = 0usize;
            for ax in 0..dim {
                let hi = (corner >> ax) & 1 == 1;
                flat = flat * self.axes[ax].count + base[ax] + hi as usize;
                w *= if hi { frac[ax] } else { 1.0 - frac[ax] };
            }
            if w != 0.0 {
                acc += w * values[flat];
            }
        }
        acc
    }

    /// Multilinear interpolation with *linear extrapolation* beyond the
    /// box, from the outermost cell's slope. The value solvers use this for
    /// next-step evaluations so that affine fields pass through the
    /// boundary without clamping bias.
    pub fn interpolate_extrapolate(&self, values: &[f64], x: &[f64]) -> f64 {
        debug_assert_eq!(values.len(), self.node_count());
        let dim = self.dim();
        assert!(dim <= 8, "interpolation supports up to 8 axes");
        let mut base = [0usize; 8];
        let mut frac = [0.0f64; 8];
        for ax in 0..dim {
            let a = &self.axes[ax];
            let u = (x[ax] - a.lo) / a.spacing();
            let i0 = (u.floor().max(0.0) as usize).min(a.count - 2);
            base[ax] = i0;
            frac[ax] = u - i0 as f64; // may leave [0, 1]: extrapolation
        }
        let corners = 1usize << dim;
        let mut acc = 0.0;
        for corner in 0..corners {
            let mut w = 1.0;
            let mut flat = 0usize;
            for ax in 0..dim {
                let hi = (corner >> ax) & 1 == 1;
                flat = flat * self.axes[ax].count + base[ax] + hi as usize;
                w *= if hi { frac[ax] } else { 1.0 - frac[ax] };
            }
            if w != 0.0 {
                acc += w * values[flat];
            }
        }
        acc
    }

    /// Trapezoid quadrature weight of node `flat` (product over axes;
    /// boundary nodes carry half weight per axis).
    pub fn quad_weight(&self, flat: usize) -> f64 {
        let multi = self.multi_index(flat);
        let mut w = 1.0;
        for ax in 0..self.dim() {
            let h = self.axes[ax].spacing();
            let edge = multi[ax] == 0 || multi[ax] == self.axes[ax].count - 1;
            w *= if edge { 0.5 * h } else { h };
        }
        w
    }

    /// Refine every axis 2x (count 2k-1 keeps nodes nested).
    pub fn refine_double(&self) -> Self {
        Self {
            axes: self
                .axes
                .iter()
                .map(|a| Axis {
                    lo: a.lo,
                    hi: a.hi,
                    count: a.count * 2 - 1,
                })
                .collect(),
        }
    }

    /// Coarsen every axis 2x when the node counts are nested (count odd).
    pub fn coarsen_half(&self) -> Option<Self> {
        let mut axes = Vec::with_capacity(self.dim());
        for a in &self.axes {
            if a.count % 2 == 0 || a.count < 3 {
                return None;
            }
            axes.push(Axis {
                lo: a.lo,
                hi: a.hi,
                count: (a.count + 1) / 2,
            });
        }
        Some(Self { axes })
    }
}

/// Finite set of control points in R^k; the desk-scale stand-in for the
/// compact control set.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlSet {
    points: Vec<Vec<f64>>,
    dim: usize,
}

impl ControlSet {
    pub fn new(points: Vec<Vec<f64>>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidModel("control set must be non-empty".into()));
        }
        let dim = points[0].len();
        if dim == 0 || points.iter().any(|p| p.len() != dim) {
            return Err(Error::DimensionMismatch(
                "control points must share a positive dimension".into(),
            ));
        }
        if points.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::InvalidModel("non-finite control point".into()));
        }
        Ok(Self { points, dim })
    }

    pub fn scalar(values: &[f64]) -> Result<Self> {
        Self::new(values.iter().map(|&v| vec![v]).collect())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.points.iter().map(|p| p.as_slice())
    }
}
