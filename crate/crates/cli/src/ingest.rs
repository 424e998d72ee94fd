//! Feature and token-grid I/O for the command line. Two input formats are
//! accepted for feature matrices — whitespace-delimited text with an
//! optional header line, and raw little-endian 32-bit floats with declared
//! dimensions — and both reject non-finite values up front, naming the
//! offending row. Token grids travel as plain text: one position per line,
//! one stage index per column.

use std::path::Path;

use resq_core::TokenGrid;

use crate::{io_error, CliError, Result};

/// A dense row-major matrix of finite feature values.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

/// Parses whitespace-delimited text: `#` lines and blank lines are
/// skipped, and if the first remaining line has any token that is not a
/// number it is treated as a header and skipped too. Every later row must
/// be numeric, finite, and as wide as the first.
pub fn parse_features_text(text: &str) -> Result<FeatureMatrix> {
    let mut cols = 0usize;
    let mut rows = 0usize;
    let mut data = Vec::new();
    let mut seen_content = false;
    for (index, line) in text.lines().enumerate() {
        let line_no = index + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let tokens: Vec<&str> = trimmed.split_whitespace().collect();
        let parsed: Option<Vec<f64>> = tokens.iter().map(|t| t.parse().ok()).collect();
        let Some(values) = parsed else {
            if seen_content {
                return Err(CliError::Validation(format!(
                    "features: line {line_no} has a non-numeric value"
                )));
            }
            // A leading line of column names is allowed and ignored.
            seen_content = true;
            continue;
        };
        seen_content = true;
        if rows == 0 {
            cols = values.len();
        } else if values.len() != cols {
            return Err(CliError::Validation(format!(
                "features: line {line_no} has {} values, expected {cols}",
                values.len()
            )));
        }
        if let Some(col) = values.iter().position(|v| !v.is_finite()) {
            return Err(CliError::Validation(format!(
                "features: non-finite value at line {line_no}, column {}",
                col + 1
            )));
        }
        rows += 1;
        data.extend_from_slice(&values);
    }
    if rows == 0 {
        return Err(CliError::Validation(
            "features: no data rows found".to_string(),
        ));
    }
    Ok(FeatureMatrix { rows, cols, data })
}

pub fn read_features_text(path: &Path) -> Result<FeatureMatrix> {
    let text = std::fs::read_to_string(path).map_err(io_error("reading features", path))?;
    parse_features_text(&text)
}

/// Reads raw little-endian `f32` values with declared dimensions: the file
/// must hold exactly `rows · cols` of them. Values are widened to `f64`.
pub fn read_features_raw_f32(path: &Path, rows: usize, cols: usize) -> Result<FeatureMatrix> {
    if rows == 0 || cols == 0 {
        return Err(CliError::Validation(
            "features: raw input needs positive --rows and --cols".to_string(),
        ));
    }
    let bytes = std::fs::read(path).map_err(io_error("reading features", path))?;
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| CliError::Validation("features: declared size overflows".to_string()))?;
    if bytes.len() != expected {
        return Err(CliError::Validation(format!(
            "features: raw file holds {} bytes, {rows}x{cols} f32 needs {expected}",
            bytes.len()
        )));
    }
    let data: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    if let Some(flat) = data.iter().position(|v| !v.is_finite()) {
        return Err(CliError::Validation(format!(
            "features: non-finite value at row {}, column {}",
            flat / cols + 1,
            flat % cols + 1
        )));
    }
    Ok(FeatureMatrix { rows, cols, data })
}

/// Renders a matrix as the text form `parse_features_text` reads back,
/// with a leading `#` comment describing the shape.
pub fn render_features_text(matrix: &FeatureMatrix, comment: &str) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "# {comment}: {} rows x {} columns\n",
        matrix.rows, matrix.cols
    ));
    for row in matrix.data.chunks_exact(matrix.cols) {
        let line: Vec<String> = row.iter().map(f64::to_string).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

/// Renders a token grid as text: a `#` shape comment, then one line per
/// position holding its stage indices.
pub fn render_token_grid(grid: &TokenGrid) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "# token grid: {} positions x {} stages\n",
        grid.positions(),
        grid.stages()
    ));
    for row in grid.rows() {
        let line: Vec<String> = row.iter().map(usize::to_string).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

/// Parses the text form back into `(positions, stages, tokens)`.
pub fn parse_token_grid(text: &str) -> Result<(usize, usize, Vec<usize>)> {
    let mut stages = 0usize;
    let mut positions = 0usize;
    let mut tokens = Vec::new();
    for (index, line) in text.lines().enumerate() {
        let line_no = index + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let parsed: std::result::Result<Vec<usize>, _> =
            trimmed.split_whitespace().map(str::parse).collect();
        let Ok(row) = parsed else {
            return Err(CliError::Validation(format!(
                "token grid: line {line_no} has a non-integer token"
            )));
        };
        if positions == 0 {
            stages = row.len();
        } else if row.len() != stages {
            return Err(CliError::Validation(format!(
                "token grid: line {line_no} has {} tokens, expected {stages}",
                row.len()
            )));
        }
        positions += 1;
        tokens.extend_from_slice(&row);
    }
    if positions == 0 {
        return Err(CliError::Validation(
            "token grid: no token rows found".to_string(),
        ));
    }
    Ok((positions, stages, tokens))
}

pub fn read_token_grid(path: &Path) -> Result<(usize, usize, Vec<usize>)> {
    let text = std::fs::read_to_string(path).map_err(io_error("reading token grid", path))?;
    parse_token_grid(&text)
}
