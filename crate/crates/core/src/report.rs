//! Aggregation of run artifacts into one human-readable table.

use std::path::Path;

use crate::csvio::{read_checks_csv, render_summary, CheckRecord};
use crate::error::{Error, Result};

/// Load every `checks.csv` under `dir` (direct children and one level of
/// subdirectories) and render the aggregate table.
pub fn report(dir: &Path) -> Result<String> {
    let records = collect_checks(dir)?;
    if records.is_empty() {
        return Err(Error::MissingArtifact(format!(
            "no checks.csv found under {} (expected artifacts of a run: checks.csv, summary.txt, *.csv)",
            dir.display()
        )));
    }
    Ok(render_summary(&records))
}

/// True when every aggregated check passed.
pub fn all_passed(dir: &Path) -> Result<bool> {
    Ok(collect_checks(dir)?.iter().all(|r| r.pass))
}

fn collect_checks(dir: &Path) -> Result<Vec<CheckRecord>> {
    if !dir.is_dir() {
        return Err(Error::MissingArtifact(format!(
            "{} is not a directory",
            dir.display()
        )));
    }
    let mut records = Vec::new();
    let direct = dir.join("checks.csv");
    if direct.is_file() {
        records.extend(read_checks_csv(&direct)?);
    }
    let mut subdirs: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    for sub in subdirs {
        let nested = sub.join("checks.csv");
        if nested.is_file() {
            records.extend(read_checks_csv(&nested)?);
        }
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::csvio::write_checks_csv;

    #[test]
    fn empty_directory_reports_expected_files() {
        let dir = std::env::temp_dir().join("bdsc-report-empty");
        std::fs::create_dir_all(&dir).unwrap();
        let err = report(&dir).unwrap_err();
        assert!(err.to_string().contains("checks.csv"));
        let _ = std::fs::remove_dir_all(&dir);
    }

    #[test]
    fn aggregates_nested_checks() {
        let dir = std::env::temp_dir().join("bdsc-report-nested");
        let sub = dir.join("runA");
        std::fs::create_dir_all(&sub).unwrap();
        write_checks_csv(
            &sub.join("checks.csv"),
            &[CheckRecord::new("s", "c", 1.0, 2.0, true, "seed=1")],
        )
        .unwrap();
        let table = report(&dir).unwrap();
        assert!(table.contains("PASS"));
        assert!(all_passed(&dir).unwrap());
        let _ = std::fs::remove_dir_all(&dir);
    }
}
