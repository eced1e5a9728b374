//! Plain-text artifacts: CSV matrices and flat `key=value` summaries.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Metadata written above an exported matrix.
#[derive(Debug, Clone, Copy)]
pub struct MatrixHeader {
    pub n: usize,
    pub dim: usize,
    pub radius: f64,
    pub lambda: f64,
}

/// Row-major CSV. The first line is `n,N,R,lambda`, the second their values,
/// then one line per matrix row.
pub fn matrix_csv(m: &DMatrix<f64>, header: MatrixHeader) -> String {
    let mut out = format!(
        "n,N,R,lambda\n{},{},{},{:.17e}\n",
        header.n, header.dim, header.radius, header.lambda
    );
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| format!("{:.12e}", m[(i, j)])).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Reads back a matrix written by [`matrix_csv`].
pub fn parse_matrix_csv(text: &str) -> Result<(MatrixHeader, DMatrix<f64>)> {
    let bad = |msg: &str| Error::InvalidArgument(format!("malformed matrix CSV: {msg}"));
    let mut lines = text.lines();
    if lines.next() != Some("n,N,R,lambda") {
        return Err(bad("missing header"));
    }
    let meta: Vec<&str> = lines.next().ok_or_else(|| bad("missing metadata"))?.split(',').collect();
    if meta.len() != 4 {
        return Err(bad("metadata needs four fields"));
    }
    let header = MatrixHeader {
        n: meta[0].parse().map_err(|_| bad("n"))?,
        dim: meta[1].parse().map_err(|_| bad("N"))?,
        radius: meta[2].parse().map_err(|_| bad("R"))?,
        lambda: meta[3].parse().map_err(|_| bad("lambda"))?,
    };
    let mut values = Vec::with_capacity(header.n * header.n);
    let mut rows = 0;
    for line in lines.filter(|l| !l.is_empty()) {
        for v in line.split(',') {
            values.push(v.trim().parse::<f64>().map_err(|_| bad("entry"))?);
        }
        rows += 1;
    }
    if rows == 0 || values.len() % rows != 0 {
        return Err(bad("ragged rows"));
    }
    let cols = values.len() / rows;
    Ok((header, DMatrix::from_row_slice(rows, cols, &values)))
}

/// One `key=value` per line, in the given order.
pub fn summary_text(pairs: &[(String, String)]) -> String {
    pairs.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

pub fn write_text(dir: &Path, name: &str, content: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(name);
    fs::write(&path, content).map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_csv_round_trip() {
        let m = DMatrix::from_fn(3, 3, |i, j| (i as f64 + 1.0) / (j as f64 + 7.0));
        let h = MatrixHeader {
            n: 3,
            dim: 3,
            radius: 1.0,
            lambda: 0.125,
        };
        let (h2, back) = parse_matrix_csv(&matrix_csv(&m, h)).unwrap();
        assert_eq!((h2.n, h2.dim), (3, 3));
        assert_eq!(h2.lambda, 0.125);
        assert!((&back - &m).amax() <= 1e-12);
        assert!(parse_matrix_csv("garbage").is_err());
    }

    #[test]
    fn summary_is_flat() {
        let s = summary_text(&[("a".into(), "1".into()), ("b.c".into(), "x".into())]);
        assert_eq!(s, "a=1\nb.c=x\n");
    }
}
