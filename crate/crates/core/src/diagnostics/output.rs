//! CSV and JSON artifacts.
//!
//! CSV files start with `#`-prefixed comment lines, then a header row; floats
//! are written like C's `%.17g`, lines end in `\n`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use super::FilterDiagnostics;
use crate::error::Result;

/// `%.17g` formatting.
pub fn fmt_g17(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return if x.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    let sci = format!("{x:.16e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..17).contains(&exp) {
        let m = strip_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    } else {
        let prec = (16 - exp) as usize;
        strip_zeros(&format!("{x:.prec$}")).to_string()
    }
}

fn strip_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// A CSV cell.
#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Int(i64),
    Float(f64),
    Bool(bool),
    Text(String),
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Int(v) => v.to_string(),
            Cell::Float(v) => fmt_g17(*v),
            Cell::Bool(v) => v.to_string(),
            Cell::Text(s) => s.clone(),
        }
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Float(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<u64> for Cell {
    fn from(v: u64) -> Self {
        Cell::Text(v.to_string())
    }
}

impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::Bool(v)
    }
}

/// Renders a CSV document: comments, header, rows.
pub fn render_csv(comments: &[String], header: &[&str], rows: &[Vec<Cell>]) -> String {
    let mut out = String::new();
    for c in comments {
        for line in c.lines() {
            let _ = writeln!(out, "# {line}");
        }
    }
    out.push_str(&header.join(","));
    out.push('\n');
    for row in rows {
        let cells: Vec<String> = row.iter().map(Cell::render).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

pub fn write_csv(path: &Path, comments: &[String], header: &[&str], rows: &[Vec<Cell>]) -> Result<()> {
    fs::write(path, render_csv(comments, header, rows))?;
    Ok(())
}

pub fn series_rows(series: &[FilterDiagnostics]) -> Vec<Vec<Cell>> {
    series
        .iter()
        .map(|r| {
            let mut row = vec![Cell::from(r.step)];
            row.extend(r.metrics().iter().map(|&v| Cell::from(v)));
            row
        })
        .collect()
}

/// Time-series CSV with the fixed diagnostic columns.
pub fn write_series_csv(path: &Path, comments: &[String], series: &[FilterDiagnostics]) -> Result<()> {
    write_csv(path, comments, &FilterDiagnostics::COLUMNS, &series_rows(series))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}
