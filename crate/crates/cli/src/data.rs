//! CSV input: the data set, contrast files and permutation files.

use std::path::{Path, PathBuf};

use cpt_core::ContrastSpec;
use nalgebra::{DMatrix, DVector};

use crate::error::{CliError, CliResult};

pub const INTERCEPT: &str = "(intercept)";

#[derive(Debug, Clone)]
pub struct Dataset {
    pub path: PathBuf,
    pub outcome: String,
    /// Design column names; the intercept, when appended, is last.
    pub columns: Vec<String>,
    pub y: DVector<f64>,
    pub x: DMatrix<f64>,
    pub intercept: bool,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }
}

fn read_table(path: &Path) -> CliResult<(Vec<String>, Vec<Vec<f64>>)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| CliError::Precondition(format!("{}: {e}", path.display())))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| CliError::Precondition(format!("{}: {e}", path.display())))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    if headers.is_empty() || headers.iter().any(String::is_empty) {
        return Err(CliError::Precondition(format!(
            "{}: line 1: header row must name every column",
            path.display()
        )));
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            CliError::Precondition(format!("{}: line {line}: malformed CSV ({e})", path.display()))
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let mut row = Vec::with_capacity(headers.len());
        for (value, name) in record.iter().zip(&headers) {
            let v: f64 = value.trim().parse().map_err(|_| {
                CliError::Precondition(format!(
                    "{}: line {line}: column '{name}': cannot parse '{value}' as a number",
                    path.display()
                ))
            })?;
            if !v.is_finite() {
                return Err(CliError::Precondition(format!(
                    "{}: line {line}: column '{name}': value must be finite",
                    path.display()
                )));
            }
            row.push(v);
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(CliError::Precondition(format!("{}: no data rows", path.display())));
    }
    Ok((headers, rows))
}

/// Read a data set; the outcome defaults to the first column and every
/// other column enters the design.
pub fn load(path: &Path, outcome: Option<&str>, intercept: bool) -> CliResult<Dataset> {
    let (headers, rows) = read_table(path)?;
    let outcome_idx = match outcome {
        None => 0,
        Some(name) => headers.iter().position(|h| h == name).ok_or_else(|| {
            CliError::Precondition(format!("outcome column '{name}' not found in {}", path.display()))
        })?,
    };
    let design_idx: Vec<usize> = (0..headers.len()).filter(|&i| i != outcome_idx).collect();
    let n = rows.len();
    let p = design_idx.len() + usize::from(intercept);
    if p == 0 {
        return Err(CliError::Precondition("the design has no columns".into()));
    }
    let y = DVector::from_fn(n, |i, _| rows[i][outcome_idx]);
    let x = DMatrix::from_fn(n, p, |i, j| {
        if j < design_idx.len() {
            rows[i][design_idx[j]]
        } else {
            1.0
        }
    });
    let mut columns: Vec<String> = design_idx.iter().map(|&i| headers[i].clone()).collect();
    if intercept {
        columns.push(INTERCEPT.to_string());
    }
    Ok(Dataset {
        path: path.to_path_buf(),
        outcome: headers[outcome_idx].clone(),
        columns,
        y,
        x,
        intercept,
    })
}

/// `--target`: a design column name, or a path to a `p × r` contrast CSV
/// (one column per contrast, one row per design column; the intercept row
/// may be omitted).
pub fn target_spec(target: &str, data: &Dataset) -> CliResult<(ContrastSpec, Option<PathBuf>)> {
    if let Some(idx) = data.columns.iter().position(|c| c == target) {
        return Ok((ContrastSpec::single(idx), None));
    }
    let path = Path::new(target);
    if !path.is_file() {
        return Err(CliError::Precondition(format!(
            "--target '{target}' is neither a design column ({}) nor a contrast file",
            data.columns.join(", ")
        )));
    }
    let (headers, rows) = read_table(path)?;
    let p = data.p();
    let r = headers.len();
    let matrix = if rows.len() == p {
        DMatrix::from_fn(p, r, |i, j| rows[i][j])
    } else if data.intercept && rows.len() + 1 == p {
        DMatrix::from_fn(p, r, |i, j| if i < rows.len() { rows[i][j] } else { 0.0 })
    } else {
        return Err(CliError::Precondition(format!(
            "{}: contrast has {} rows, the design has {p} columns",
            path.display(),
            rows.len()
        )));
    };
    Ok((ContrastSpec::Contrast(matrix), Some(path.to_path_buf())))
}

/// Newline-separated 1-based row indices.
pub fn read_permutation(path: &Path, n: usize) -> CliResult<Vec<usize>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(&path.display().to_string(), e))?;
    let mut perm = Vec::with_capacity(n);
    for (line_no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let k: usize = line.parse().map_err(|_| {
            CliError::Precondition(format!(
                "{}: line {}: '{line}' is not a row index",
                path.display(),
                line_no + 1
            ))
        })?;
        if k == 0 || k > n {
            return Err(CliError::Precondition(format!(
                "{}: line {}: index {k} outside 1..={n}",
                path.display(),
                line_no + 1
            )));
        }
        perm.push(k - 1);
    }
    if perm.len() != n || !cpt_core::ordering::is_bijection(&perm) {
        return Err(CliError::Precondition(format!(
            "{}: not a permutation of 1..={n}",
            path.display()
        )));
    }
    Ok(perm)
}

pub fn format_permutation(perm: &[usize]) -> String {
    let mut out = String::with_capacity(perm.len() * 4);
    for &i in perm {
        out.push_str(&(i + 1).to_string());
        out.push('\n');
    }
    out
}
