//! CSV artifacts for matrices and spectra.
//!
//! Numbers are written in the shortest form that parses back to the same
//! value, so a write/read cycle is exact and repeated exports are
//! byte-identical.

use std::io::{BufRead, Write};

use num_complex::Complex;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

pub fn format_scalar<T: Scalar>(x: T) -> String {
    format!("{x}")
}

fn parse_scalar<T: Scalar>(s: &str, line: usize) -> Result<T> {
    s.trim()
        .parse::<T>()
        .map_err(|_| Error::Parse(format!("line {line}: cannot parse number {s:?}")))
}

/// One matrix row per line, comma separated, no header.
pub fn write_matrix_csv<T: Scalar, W: Write>(mut w: W, a: &Matrix<T>) -> Result<()> {
    for i in 0..a.nrows() {
        let row: Vec<String> = (0..a.ncols()).map(|j| format_scalar(a[(i, j)])).collect();
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

pub fn matrix_csv<T: Scalar>(a: &Matrix<T>) -> String {
    let mut buf = Vec::new();
    write_matrix_csv(&mut buf, a).expect("writing to memory");
    String::from_utf8(buf).expect("ascii output")
}

pub fn read_matrix_csv<T: Scalar, R: BufRead>(r: R) -> Result<Matrix<T>> {
    let mut rows: Vec<Vec<T>> = Vec::new();
    for (k, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|s| parse_scalar(s, k + 1))
            .collect::<Result<Vec<T>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::Parse(format!(
                    "line {}: expected {} columns, found {}",
                    k + 1,
                    first.len(),
                    row.len()
                )));
            }
        }
        rows.push(row);
    }
    let ncols = rows.first().map_or(0, |r| r.len());
    Ok(Matrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

/// Header `re,im`, one eigenvalue per line.
pub fn write_eigenvalues_csv<T: Scalar, W: Write>(mut w: W, eig: &[Complex<T>]) -> Result<()> {
    writeln!(w, "re,im")?;
    for z in eig {
        writeln!(w, "{},{}", format_scalar(z.re), format_scalar(z.im))?;
    }
    Ok(())
}

pub fn eigenvalues_csv<T: Scalar>(eig: &[Complex<T>]) -> String {
    let mut buf = Vec::new();
    write_eigenvalues_csv(&mut buf, eig).expect("writing to memory");
    String::from_utf8(buf).expect("ascii output")
}

pub fn read_eigenvalues_csv<T: Scalar, R: BufRead>(r: R) -> Result<Vec<Complex<T>>> {
    let mut out = Vec::new();
    for (k, line) in r.lines().enumerate() {
        let line = line?;
        if k == 0 {
            if line.trim() != "re,im" {
                return Err(Error::Parse(format!("expected header re,im, found {line:?}")));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let (re, im) = line
            .split_once(',')
            .ok_or_else(|| Error::Parse(format!("line {}: expected re,im", k + 1)))?;
        out.push(Complex::new(parse_scalar(re, k + 1)?, parse_scalar(im, k + 1)?));
    }
    Ok(out)
}
