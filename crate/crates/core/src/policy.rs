//! Admissible control policies over a finite control set.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::grid::{ControlSet, SpaceGrid};

/// Feedback table: one control index per (time step, space cell); cells are
/// resolved by nearest-node lookup on the grid.
#[derive(Debug, Clone)]
pub struct FeedbackTable {
    pub grid: SpaceGrid,
    /// `(n_steps + 1) x node_count` control indices.
    pub table: Array2<u16>,
}

/// A policy drawing values from a [`ControlSet`].
#[derive(Debug, Clone)]
pub enum ControlPolicy {
    /// The same control point at every step and state.
    Constant(usize),
    /// One control index per time step.
    OpenLoop(Vec<usize>),
    /// Feedback on (time step, nearest grid cell).
    Feedback(FeedbackTable),
}

impl ControlPolicy {
    /// Check every referenced index against the control set; feedback
    /// tables are dense by construction, so coverage is index validity.
    pub fn validate(&self, controls: &ControlSet, n_steps: usize) -> Result<()> {
        let m = controls.len();
        match self {
            ControlPolicy::Constant(i) => {
                if *i >= m {
                    return Err(Error::Precondition(format!(
                        "constant control index {i} out of range (|U| = {m})"
                    )));
                }
            }
            ControlPolicy::OpenLoop(seq) => {
                if seq.len() < n_steps {
                    return Err(Error::Precondition(format!(
                        "open-loop sequence has {} entries, needs {n_steps}",
                        seq.len()
                    )));
                }
                if seq.iter().any(|&i| i >= m) {
                    return Err(Error::Precondition(
                        "open-loop control index out of range".into(),
                    ));
                }
            }
            ControlPolicy::Feedback(fb) => {
                if fb.table.nrows() < n_steps {
                    return Err(Error::Precondition(format!(
                        "feedback table covers {} steps, needs {n_steps}",
                        fb.table.nrows()
                    )));
                }
                if fb.table.iter().any(|&i| i as usize >= m) {
                    return Err(Error::Precondition(
                        "feedback control index out of range".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Control index applied at time step `step` in state `x`.
    pub fn control_index(&self, step: usize, x: &[f64]) -> usize {
        match self {
            ControlPolicy::Constant(i) => *i,
            ControlPolicy::OpenLoop(seq) => seq[step],
            ControlPolicy::Feedback(fb) => {
                let node = fb.grid.nearest_node(x);
                fb.table[[step, node]] as usize
            }
        }
    }

    /// Control point applied at time step `step` in state `x`.
    pub fn control_at<'u>(&self, controls: &'u ControlSet, step: usize, x: &[f64]) -> &'u [f64] {
        controls.point(self.control_index(step, x))
    }

    pub fn tag(&self) -> String {
        match self {
            ControlPolicy::Constant(i) => format!("constant[{i}]"),
            ControlPolicy::OpenLoop(_) => "open-loop".into(),
            ControlPolicy::Feedback(_) => "feedback".into(),
        }
    }
}
