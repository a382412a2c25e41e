//! Column-oriented numeric CSV files.
//!
//! Numbers are written with 17 significant digits so that reading a file
//! back reproduces every `f64` exactly.

use std::path::Path;

use crate::error::{Error, Result};

pub fn format_value(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes equally long columns under `headers`.
pub fn write_csv(path: &Path, headers: &[String], columns: &[Vec<f64>]) -> Result<()> {
    if headers.len() != columns.len() {
        return Err(Error::invalid("one header is needed per column"));
    }
    let rows = columns.first().map_or(0, Vec::len);
    if columns.iter().any(|c| c.len() != rows) {
        return Err(Error::invalid("CSV columns differ in length"));
    }
    let to_err = |e: csv::Error| Error::format(path, e.to_string());
    let mut w = csv::Writer::from_path(path).map_err(to_err)?;
    w.write_record(headers).map_err(to_err)?;
    for r in 0..rows {
        w.write_record(columns.iter().map(|c| format_value(c[r])))
            .map_err(to_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a file written by [`write_csv`]; returns headers and columns.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let to_err = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::format(path, format!("{other:?}")),
    };
    let mut r = csv::Reader::from_path(path).map_err(to_err)?;
    let headers: Vec<String> = r.headers().map_err(to_err)?.iter().map(String::from).collect();
    let mut columns = vec![Vec::new(); headers.len()];
    for rec in r.records() {
        let rec = rec.map_err(to_err)?;
        for (col, cell) in columns.iter_mut().zip(rec.iter()) {
            let v = cell
                .trim()
                .parse::<f64>()
                .map_err(|e| Error::format(path, format!("bad number {cell:?}: {e}")))?;
            col.push(v);
        }
    }
    Ok((headers, columns))
}

/// Picks a named column out of a [`read_csv`] result.
pub fn column<'a>(headers: &[String], columns: &'a [Vec<f64>], name: &str) -> Option<&'a [f64]> {
    headers
        .iter()
        .position(|h| h == name)
        .map(|i| columns[i].as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let a = vec![0.1, 1.0 / 3.0, -2.5e-300, f64::MAX, 0.0];
        let b = vec![std::f64::consts::PI, -0.0, 1e-17, 123456789.0, f64::MIN_POSITIVE];
        let headers = vec!["a".to_string(), "b".to_string()];
        write_csv(&path, &headers, &[a.clone(), b.clone()]).unwrap();
        let (h, cols) = read_csv(&path).unwrap();
        assert_eq!(h, headers);
        assert_eq!(column(&h, &cols, "a").unwrap(), a.as_slice());
        for (x, y) in cols[1].iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn rejects_ragged_columns_and_missing_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let headers = vec!["a".to_string(), "b".to_string()];
        assert!(write_csv(&path, &headers, &[vec![1.0], vec![]]).is_err());
        assert!(matches!(read_csv(&dir.path().join("none.csv")), Err(Error::Io { .. })));
    }
}
