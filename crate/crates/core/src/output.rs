//! Plain-text artifact writing: CSV with round-trip float formatting and JSON manifests.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};

/// 17 significant digits in scientific notation; parses back to the same `f64`.
pub fn num(v: f64) -> String {
    format!("{v:.16e}")
}

/// Accumulates CSV text in memory so a run writes each file in one call.
#[derive(Debug, Default)]
pub struct Csv {
    text: String,
}

impl Csv {
    pub fn with_header<S: AsRef<str>>(columns: &[S]) -> Self {
        let mut csv = Csv::default();
        let names: Vec<&str> = columns.iter().map(AsRef::as_ref).collect();
        csv.text.push_str(&names.join(","));
        csv.text.push('\n');
        csv
    }

    pub fn row(&mut self, values: &[f64]) {
        for (k, v) in values.iter().enumerate() {
            if k > 0 {
                self.text.push(',');
            }
            self.text.push_str(&num(*v));
        }
        self.text.push('\n');
    }

    /// Row of preformatted fields.
    pub fn fields<S: AsRef<str>>(&mut self, fields: &[S]) {
        let parts: Vec<&str> = fields.iter().map(AsRef::as_ref).collect();
        self.text.push_str(&parts.join(","));
        self.text.push('\n');
    }

    /// Row with a leading integer column.
    pub fn row_with_int(&mut self, first: u64, values: &[f64]) {
        let _ = write!(self.text, "{first}");
        for v in values {
            self.text.push(',');
            self.text.push_str(&num(*v));
        }
        self.text.push('\n');
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_text(path, &self.text)
    }
}

pub fn ensure_dir(dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(dir.to_path_buf())
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e.into(),
    })?;
    text.push('\n');
    write_text(path, &text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numbers_round_trip() {
        for v in [0.1, -1.0 / 3.0, 1e-300, 6.02214076e23, 0.0] {
            assert_eq!(num(v).parse::<f64>().unwrap(), v);
        }
    }

    #[test]
    fn csv_layout() {
        let mut c = Csv::with_header(&["t", "x"]);
        c.row(&[0.0, 1.5]);
        c.row_with_int(3, &[2.0]);
        assert_eq!(
            c.as_str(),
            "t,x\n0.0000000000000000e0,1.5000000000000000e0\n3,2.0000000000000000e0\n"
        );
    }
}
