//! Report document and output files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::AppError;

/// One pass/fail verdict with the property it witnesses.
#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub witnesses: &'static str,
    pub detail: serde_json::Value,
}

impl Check {
    pub fn new(name: impl Into<String>, pass: bool, witnesses: &'static str, detail: serde_json::Value) -> Self {
        Self { name: name.into(), pass, witnesses, detail }
    }
}

#[derive(Debug, Serialize)]
pub struct Report {
    pub command: &'static str,
    pub seed: u64,
    pub pass: bool,
    pub checks: Vec<Check>,
    pub results: serde_json::Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// What a command produced before the report is assembled.
#[derive(Debug, Default)]
pub struct Outcome {
    pub checks: Vec<Check>,
    pub results: serde_json::Map<String, serde_json::Value>,
}

impl Outcome {
    pub fn check(&mut self, c: Check) {
        log::info!("{} {}", if c.pass { "pass" } else { "FAIL" }, c.name);
        self.checks.push(c);
    }

    pub fn result(&mut self, key: &str, v: impl Serialize) {
        self.results.insert(key.to_string(), serde_json::to_value(v).expect("results always serialize"));
    }
}

/// Output directory with a `tables/` subdirectory.
pub struct OutDir {
    root: PathBuf,
}

impl OutDir {
    pub fn create(root: &Path) -> Result<Self, AppError> {
        let tables = root.join("tables");
        fs::create_dir_all(&tables).map_err(|source| AppError::Io { path: tables.display().to_string(), source })?;
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn table_path(&self, name: &str) -> PathBuf {
        self.root.join("tables").join(name)
    }

    /// Writes serializable rows as CSV with a header from the field names.
    pub fn table<R: Serialize>(&self, name: &str, rows: &[R]) -> Result<(), AppError> {
        let path = self.table_path(name);
        let io = |e: csv::Error| AppError::Io { path: path.display().to_string(), source: e.into() };
        let mut w = csv::Writer::from_path(&path).map_err(io)?;
        for r in rows {
            w.serialize(r).map_err(io)?;
        }
        w.flush().map_err(|source| AppError::Io { path: path.display().to_string(), source })
    }

    /// Writes a table through a custom writer.
    pub fn table_with(&self, name: &str, f: impl FnOnce(&mut fs::File) -> std::io::Result<()>) -> Result<(), AppError> {
        let path = self.table_path(name);
        let err = |source| AppError::Io { path: path.display().to_string(), source };
        let mut file = fs::File::create(&path).map_err(err)?;
        f(&mut file).map_err(err)
    }

    pub fn json(&self, name: &str, v: &impl Serialize) -> Result<(), AppError> {
        let path = self.root.join(name);
        let mut text = serde_json::to_string_pretty(v).expect("documents always serialize");
        text.push('\n');
        fs::write(&path, text).map_err(|source| AppError::Io { path: path.display().to_string(), source })
    }
}
