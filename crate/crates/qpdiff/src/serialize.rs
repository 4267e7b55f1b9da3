//! Plain-text problem serialization.
//!
//! The format is line-oriented: `d_z` and `d_eq` first, then one line per
//! field with whitespace-separated entries (matrices row-major). Infinite
//! bounds are written as the literals `inf` / `-inf`, which Rust's float
//! parser accepts natively. `f64` Display round-trips exactly, so
//! write-then-read reproduces a problem bit for bit.
//!
//! ```text
//! d_z 2
//! d_eq 1
//! Q 2 0 0 2
//! p -1 -1
//! A 1 1
//! b 1
//! l 0 -inf
//! u 1 inf
//! ```

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::core::QpProblem;
use crate::error::{QpError, Result};

pub fn problem_to_string(problem: &QpProblem) -> String {
    let mut out = String::new();
    out.push_str(&format!("d_z {}\n", problem.dim()));
    out.push_str(&format!("d_eq {}\n", problem.n_eq()));
    push_row_major(&mut out, "Q", &problem.q);
    push_vector(&mut out, "p", &problem.p);
    push_row_major(&mut out, "A", &problem.a);
    push_vector(&mut out, "b", &problem.b);
    push_vector(&mut out, "l", &problem.l);
    push_vector(&mut out, "u", &problem.u);
    out
}

pub fn problem_from_str(text: &str) -> Result<QpProblem> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let d_z = parse_dim(lines.next(), "d_z")?;
    let d_eq = parse_dim(lines.next(), "d_eq")?;
    let q = parse_matrix(lines.next(), "Q", d_z, d_z)?;
    let p = parse_vector(lines.next(), "p", d_z)?;
    let a = parse_matrix(lines.next(), "A", d_eq, d_z)?;
    let b = parse_vector(lines.next(), "b", d_eq)?;
    let l = parse_vector(lines.next(), "l", d_z)?;
    let u = parse_vector(lines.next(), "u", d_z)?;
    QpProblem::new(q, p, a, b, l, u)
}

pub fn write_problem(path: &Path, problem: &QpProblem) -> Result<()> {
    fs::write(path, problem_to_string(problem))?;
    Ok(())
}

pub fn read_problem(path: &Path) -> Result<QpProblem> {
    problem_from_str(&fs::read_to_string(path)?)
}

fn push_vector(out: &mut String, tag: &str, v: &DVector<f64>) {
    out.push_str(tag);
    for x in v.iter() {
        out.push(' ');
        out.push_str(&format_entry(*x));
    }
    out.push('\n');
}

fn push_row_major(out: &mut String, tag: &str, m: &DMatrix<f64>) {
    out.push_str(tag);
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            out.push(' ');
            out.push_str(&format_entry(m[(r, c)]));
        }
    }
    out.push('\n');
}

fn format_entry(x: f64) -> String {
    if x == f64::INFINITY {
        "inf".to_string()
    } else if x == f64::NEG_INFINITY {
        "-inf".to_string()
    } else {
        format!("{x}")
    }
}

fn fields<'a>(line: Option<&'a str>, tag: &str) -> Result<Vec<&'a str>> {
    let line = line.ok_or_else(|| QpError::Parse(format!("missing line for {tag}")))?;
    let mut parts = line.split_whitespace();
    match parts.next() {
        Some(t) if t == tag => Ok(parts.collect()),
        other => Err(QpError::Parse(format!(
            "expected tag {tag}, got {other:?}"
        ))),
    }
}

fn parse_dim(line: Option<&str>, tag: &str) -> Result<usize> {
    let f = fields(line, tag)?;
    if f.len() != 1 {
        return Err(QpError::Parse(format!("{tag} takes one value")));
    }
    f[0]
        .parse()
        .map_err(|e| QpError::Parse(format!("{tag}: {e}")))
}

fn parse_entries(raw: &[&str], tag: &str, expected: usize) -> Result<Vec<f64>> {
    if raw.len() != expected {
        return Err(QpError::Parse(format!(
            "{tag} has {} entries, expected {expected}",
            raw.len()
        )));
    }
    raw.iter()
        .map(|s| s.parse().map_err(|e| QpError::Parse(format!("{tag}: {e}"))))
        .collect()
}

fn parse_vector(line: Option<&str>, tag: &str, len: usize) -> Result<DVector<f64>> {
    let raw = fields(line, tag)?;
    Ok(DVector::from_vec(parse_entries(&raw, tag, len)?))
}

fn parse_matrix(line: Option<&str>, tag: &str, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
    let raw = fields(line, tag)?;
    let entries = parse_entries(&raw, tag, rows * cols)?;
    Ok(DMatrix::from_row_slice(rows, cols, &entries))
}
