//! Verification reports and CSV/JSON emission.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const SCHEMA_VERSION: u32 = 1;

/// Which independent reference a row was checked against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    /// Closed-form value, including identities that must vanish.
    Analytic,
    /// Deterministic phase-space quadrature.
    Quadrature,
    /// Integrated ordinary differential equations.
    Ode,
    /// Finite matrix algebra (commutators, projectors, traces).
    Matrix,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Comparison {
    /// pass when residual < tolerance
    #[serde(rename = "<")]
    Below,
    /// pass when residual > tolerance (negative controls)
    #[serde(rename = ">")]
    Above,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub identity: String,
    pub lhs: f64,
    pub rhs: f64,
    pub residual: f64,
    pub comparison: Comparison,
    pub tolerance: f64,
    pub passed: bool,
    pub provenance: Provenance,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub grid: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub schema_version: u32,
    pub suite: String,
    pub passed: bool,
    pub environment: Fingerprint,
    /// Seconds; only filled in with --timing, so default output is reproducible.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time: Option<f64>,
    pub rows: Vec<ReportRow>,
}

impl VerificationReport {
    pub fn new(suite: impl Into<String>, environment: Fingerprint) -> Self {
        VerificationReport { schema_version: SCHEMA_VERSION, suite: suite.into(), passed: true, environment, wall_time: None, rows: Vec::new() }
    }

    pub fn below(&mut self, identity: impl Into<String>, lhs: f64, rhs: f64, residual: f64, tolerance: f64, provenance: Provenance) {
        self.push(identity.into(), lhs, rhs, residual, Comparison::Below, tolerance, provenance);
    }

    pub fn above(&mut self, identity: impl Into<String>, lhs: f64, rhs: f64, residual: f64, tolerance: f64, provenance: Provenance) {
        self.push(identity.into(), lhs, rhs, residual, Comparison::Above, tolerance, provenance);
    }

    #[allow(clippy::too_many_arguments)]
    fn push(&mut self, identity: String, lhs: f64, rhs: f64, residual: f64, comparison: Comparison, tolerance: f64, provenance: Provenance) {
        // NaN fails either way
        let passed = match comparison {
            Comparison::Below => residual < tolerance,
            Comparison::Above => residual > tolerance,
        };
        self.passed &= passed;
        self.rows.push(ReportRow { identity, lhs, rhs, residual, comparison, tolerance, passed, provenance });
    }

    /// Appends another report's rows under a prefix.
    pub fn absorb(&mut self, other: VerificationReport) {
        for mut r in other.rows {
            r.identity = format!("{}: {}", other.suite, r.identity);
            self.passed &= r.passed;
            self.rows.push(r);
        }
        self.environment.notes.extend(other.environment.notes.into_iter().map(|n| format!("{}: {n}", other.suite)));
    }

    pub fn to_json(&self) -> Result<String, CliError> {
        let mut s = serde_json::to_string_pretty(self).map_err(|e| CliError::Io(e.to_string()))?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Io(e.to_string()))
    }

    /// Same rows as CSV, for people who prefer a table.
    pub fn to_table(&self) -> Table {
        let mut t = Table::new(&["identity", "lhs", "rhs", "residual", "comparison", "tolerance", "passed", "provenance"]);
        for r in &self.rows {
            let cmp = if r.comparison == Comparison::Below { "<" } else { ">" };
            let prov = serde_json::to_value(r.provenance).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
            t.push(vec![
                Cell::Text(r.identity.clone()),
                Cell::Num(r.lhs),
                Cell::Num(r.rhs),
                Cell::Num(r.residual),
                Cell::Text(cmp.into()),
                Cell::Num(r.tolerance),
                Cell::Text(r.passed.to_string()),
                Cell::Text(prov),
            ]);
        }
        t
    }

    /// One line per row, for stderr.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        for r in &self.rows {
            let tag = if r.passed { "ok  " } else { "FAIL" };
            let cmp = if r.comparison == Comparison::Below { "<" } else { ">" };
            s.push_str(&format!("[{tag}] {}: {:.3e} (need {cmp} {:.0e})\n", r.identity, r.residual, r.tolerance));
        }
        s.push_str(&format!("{} {}\n", self.suite, if self.passed { "PASS" } else { "FAIL" }));
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Cell {
    Num(f64),
    Text(String),
}

impl Cell {
    fn render(&self) -> String {
        match self {
            // 17 significant digits
            Cell::Num(v) => format!("{v:.16e}"),
            Cell::Text(s) => s.clone(),
        }
    }
}

/// Column-ordered record for CSV output.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Table { header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        assert_eq!(row.len(), self.header.len(), "row width");
        self.rows.push(row);
    }

    pub fn push_nums(&mut self, row: &[f64]) {
        self.push(row.iter().map(|&v| Cell::Num(v)).collect());
    }

    pub fn to_csv(&self) -> Result<String, CliError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header).map_err(|e| CliError::Io(e.to_string()))?;
        for row in &self.rows {
            w.write_record(row.iter().map(Cell::render)).map_err(|e| CliError::Io(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::Io(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| CliError::Io(e.to_string()))
    }
}

/// Writes via a temporary file in the target directory and a rename. "-" is stdout.
pub fn write_atomic(path: &Path, contents: &str) -> Result<(), CliError> {
    if path == Path::new("-") {
        let mut out = std::io::stdout().lock();
        out.write_all(contents.as_bytes())?;
        return Ok(out.flush()?);
    }
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    tmp.write_all(contents.as_bytes())?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| CliError::Io(format!("{}: {}", path.display(), e.error)))?;
    Ok(())
}

/// `dir/stem.suffix` next to `path`.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "out".into());
    path.with_file_name(format!("{stem}.{suffix}"))
}
