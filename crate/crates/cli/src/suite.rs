//! Running every spec in a directory.

use std::fs;
use std::path::{Path, PathBuf};

use crate::report::{write_file, Cell, IoError, Table};
use crate::run::{output_dir, run_experiment, Status};
use crate::spec::validate_spec;

#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub spec: PathBuf,
    pub status: Status,
    pub detail: String,
}

/// Spec files (`*.toml`, `*.json`) in `dir`, sorted by name.
pub fn spec_files(dir: &Path) -> Result<Vec<PathBuf>, IoError> {
    let rd = fs::read_dir(dir).map_err(|source| IoError {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut v: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && matches!(p.extension().and_then(|e| e.to_str()), Some("toml") | Some("json")))
        .collect();
    v.sort();
    Ok(v)
}

/// Runs each spec into `out/<file stem>` and writes `suite.csv`.
pub fn run_suite(dir: &Path, out: Option<&Path>) -> Result<Vec<SuiteEntry>, IoError> {
    let mut entries = Vec::new();
    for path in spec_files(dir)? {
        let text = fs::read_to_string(&path).map_err(|source| IoError {
            path: path.clone(),
            source,
        })?;
        let entry = match validate_spec(&text) {
            Err(e) => SuiteEntry {
                spec: path.clone(),
                status: Status::Refused,
                detail: e.to_string().replace('\n', " "),
            },
            Ok(spec) => {
                let stem = path.file_stem().unwrap_or_default();
                let target = match out {
                    Some(o) => o.join(stem),
                    None => output_dir(&spec, None),
                };
                log::info!("running {}", path.display());
                let m = run_experiment(&spec, &target)?;
                let failed: Vec<&str> = m.checks.iter().filter(|c| !c.pass).map(|c| c.name.as_str()).collect();
                SuiteEntry {
                    spec: path.clone(),
                    status: m.status,
                    detail: match (&m.error, failed.is_empty()) {
                        (Some(e), _) => e.clone(),
                        (None, true) => format!("all {} checks passed", m.checks.len()),
                        (None, false) => format!("failed: {}", failed.join("; ")),
                    },
                }
            }
        };
        entries.push(entry);
    }
    if let Some(o) = out {
        fs::create_dir_all(o).map_err(|source| IoError {
            path: o.to_path_buf(),
            source,
        })?;
        let mut t = Table::new("suite", &["spec", "status", "detail"]);
        for e in &entries {
            t.push(vec![
                Cell::Text(e.spec.display().to_string()),
                Cell::Text(format!("{:?}", e.status).to_lowercase()),
                Cell::Text(e.detail.clone()),
            ]);
        }
        write_file(o, "suite.csv", &t.to_csv())?;
    }
    Ok(entries)
}

/// 1 if any spec failed or errored, else 2 if any was refused, else 0.
pub fn suite_exit_code(entries: &[SuiteEntry]) -> i32 {
    if entries.iter().any(|e| matches!(e.status, Status::Fail | Status::Error)) {
        1
    } else if entries.iter().any(|e| e.status == Status::Refused) {
        2
    } else {
        0
    }
}
