//! Deterministic CSV writing: UTF-8, header row, shortest round-trip float
//! formatting, no timestamps.

use anyhow::{Context, Result};
use std::fmt::Write as _;
use std::path::Path;

pub struct CsvWriter {
    buffer: String,
    columns: usize,
}

impl CsvWriter {
    pub fn new(header: &[&str]) -> Self {
        let mut buffer = String::new();
        buffer.push_str(&header.join(","));
        buffer.push('\n');
        CsvWriter { buffer, columns: header.len() }
    }

    pub fn row(&mut self, fields: &[String]) {
        debug_assert_eq!(fields.len(), self.columns, "row width mismatch");
        self.buffer.push_str(&fields.join(","));
        self.buffer.push('\n');
    }

    pub fn finish(self, path: &Path) -> Result<()> {
        std::fs::write(path, self.buffer)
            .with_context(|| format!("cannot write {}", path.display()))
    }
}

pub fn f(value: f64) -> String {
    let mut s = String::new();
    write!(s, "{value}").expect("formatting floats never fails");
    s
}

pub fn opt_f(value: Option<f64>) -> String {
    value.map(f).unwrap_or_default()
}
