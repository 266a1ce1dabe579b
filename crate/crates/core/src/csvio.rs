//! CSV artifact writers and the checks ledger.
//!
//! Artifacts are plain CSV with one `# key=value ...` provenance comment
//! line ahead of the header. Floats are written with Rust's shortest
//! round-trip formatting, so identical runs produce byte-identical files.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::bdsde::BdsdeSolution;
use crate::error::{Error, Result};
use crate::sde::PathEnsemble;
use crate::value::ValueField;
use crate::weak::WeakFormReport;

/// One pass/fail line of a verification suite.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckRecord {
    pub suite: String,
    pub criterion: String,
    pub value: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub seeds: String,
}

impl CheckRecord {
    pub fn new(
        suite: &str,
        criterion: &str,
        value: f64,
        tolerance: f64,
        pass: bool,
        seeds: &str,
    ) -> Self {
        Self {
            suite: suite.into(),
            criterion: criterion.into(),
            value,
            tolerance,
            pass,
            seeds: seeds.into(),
        }
    }
}

fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, contents)?;
    Ok(())
}

pub fn write_ensemble_csv(path: &Path, ensemble: &PathEnsemble, model: &str) -> Result<()> {
    let dim = ensemble.dim();
    let mut out = String::new();
    let _ = writeln!(
        out,
        "# model={model} policy={} master_seed={} b_seed={} start_step={}",
        ensemble.policy_tag, ensemble.master_seed, ensemble.b_seed, ensemble.start_step
    );
    let mut header = String::from("path,step");
    for c in 0..dim {
        let _ = write!(header, ",x{c}");
    }
    let _ = writeln!(out, "{header}");
    for p in 0..ensemble.m_paths() {
        for i in 0..=ensemble.window_steps() {
            let _ = write!(out, "{p},{}", ensemble.start_step + i);
            for &v in ensemble.state(p, i) {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
    }
    write_atomic(path, &out)
}

pub fn write_solution_csv(path: &Path, sol: &BdsdeSolution, model: &str) -> Result<()> {
    let d = sol.z.shape()[2];
    let mut out = String::new();
    let _ = writeln!(
        out,
        "# model={model} penalty_level={} b_seed={} start_step={}",
        sol.penalty_level, sol.b_seed, sol.start_step
    );
    let mut header = String::from("path,step,y");
    for c in 0..d {
        let _ = write!(header, ",z{c}");
    }
    header.push_str(",k");
    let _ = writeln!(out, "{header}");
    let win = sol.window_steps();
    for p in 0..sol.m_paths() {
        for w in 0..=win {
            let _ = write!(out, "{p},{},{}", sol.start_step + w, sol.y[[p, w]]);
            for c in 0..d {
                // Z is defined on steps, not points; repeat the last row
                let zw = if w < win { sol.z[[p, w, c]] } else { sol.z[[p, win - 1, c]] };
                let _ = write!(out, ",{zw}");
            }
            let _ = writeln!(out, ",{}", sol.k[[p, w]]);
        }
    }
    write_atomic(path, &out)
}

pub fn write_value_csv(path: &Path, field: &ValueField, model: &str) -> Result<()> {
    let dim = field.space.dim();
    let mut out = String::new();
    let _ = writeln!(
        out,
        "# model={model} backend={} b_seed={}",
        field.backend, field.b_seed
    );
    let mut header = String::from("t_index");
    for c in 0..dim {
        let _ = write!(header, ",x{c}");
    }
    header.push_str(",u,argmax");
    let _ = writeln!(out, "{header}");
    let mut x = vec![0.0; dim];
    for i in 0..field.values.nrows() {
        for j in 0..field.values.ncols() {
            field.space.node_into(j, &mut x);
            let _ = write!(out, "{i}");
            for &c in &x {
                let _ = write!(out, ",{c}");
            }
            let _ = writeln!(out, ",{},{}", field.values[[i, j]], field.argmax[[i, j]]);
        }
    }
    write_atomic(path, &out)
}

pub fn write_weakform_csv(path: &Path, report: &WeakFormReport, model: &str, seeds: &str) -> Result<()> {
    let mut out = String::new();
    let _ = writeln!(out, "# model={model} {seeds} epsilon={} tol_weak={}", report.epsilon, report.tol_weak);
    let _ = writeln!(out, "# control_id beyond the control set denotes the argmax feedback candidate");
    let _ = writeln!(
        out,
        "test_id,control_id,lhs,rhs_literal,margin_literal,rhs_ibp,margin_ibp"
    );
    for row in &report.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            row.test,
            row.control,
            row.lhs,
            row.rhs_literal,
            row.margin_literal,
            row.rhs_ibp,
            row.margin_ibp
        );
    }
    write_atomic(path, &out)
}

pub fn write_checks_csv(path: &Path, records: &[CheckRecord]) -> Result<()> {
    let mut out = String::new();
    let _ = writeln!(out, "suite,criterion,value,tolerance,pass,seeds");
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.suite, r.criterion, r.value, r.tolerance, r.pass, r.seeds
        );
    }
    write_atomic(path, &out)
}

pub fn read_checks_csv(path: &Path) -> Result<Vec<CheckRecord>> {
    let text = fs::read_to_string(path)
        .map_err(|_| Error::MissingArtifact(path.display().to_string()))?;
    let mut records = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if ln == 0 || line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.splitn(6, ',').collect();
        if parts.len() != 6 {
            return Err(Error::Config(format!(
                "corrupt checks file {} at line {}",
                path.display(),
                ln + 1
            )));
        }
        records.push(CheckRecord {
            suite: parts[0].into(),
            criterion: parts[1].into(),
            value: parts[2]
                .parse()
                .map_err(|_| Error::Config(format!("bad value at line {}", ln + 1)))?,
            tolerance: parts[3]
                .parse()
                .map_err(|_| Error::Config(format!("bad tolerance at line {}", ln + 1)))?,
            pass: parts[4] == "true",
            seeds: parts[5].into(),
        });
    }
    Ok(records)
}

/// Human-readable fixed-width summary of the checks.
pub fn render_summary(records: &[CheckRecord]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<18} {:<46} {:>14} {:>14} {:>6}  seeds",
        "suite", "criterion", "value", "tolerance", "pass"
    );
    for r in records {
        let _ = writeln!(
            out,
            "{:<18} {:<46} {:>14.6e} {:>14.6e} {:>6}  {}",
            r.suite,
            r.criterion,
            r.value,
            r.tolerance,
            if r.pass { "PASS" } else { "FAIL" },
            r.seeds
        );
    }
    let failed = records.iter().filter(|r| !r.pass).count();
    let _ = writeln!(
        out,
        "\n{} checks, {} failed -> {}",
        records.len(),
        failed,
        if failed == 0 { "PASS" } else { "FAIL" }
    );
    out
}
