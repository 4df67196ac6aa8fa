//! Dense matrix files used for frame embeddings and exported features.
//!
//! Two encodings are accepted:
//! - CSV text: one row per line, comma-separated decimal values, no header.
//!   Lines that are empty or start with `#` are skipped.
//! - binary: the 4-byte magic `FEM1`, then `rows: u32` and `cols: u32`
//!   (little-endian), then `rows * cols` little-endian `f32` values in
//!   row-major order.
//!
//! [`read_matrix`] sniffs the magic, so either encoding can be passed
//! wherever a matrix file is expected.

use std::io::Write;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FEM1";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, clap::ValueEnum)]
pub enum MatrixFormat {
    #[default]
    Csv,
    /// `FEM1` binary; values are narrowed to `f32`.
    Bin,
}

impl MatrixFormat {
    pub fn extension(self) -> &'static str {
        match self {
            MatrixFormat::Csv => "csv",
            MatrixFormat::Bin => "bin",
        }
    }
}

pub fn write_matrix(path: &Path, m: &Array2<f64>, format: MatrixFormat) -> Result<()> {
    match format {
        MatrixFormat::Csv => write_matrix_csv(path, m),
        MatrixFormat::Bin => write_matrix_bin(path, m),
    }
}

fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format { path: path.to_path_buf(), msg: msg.into() }
}

pub fn read_matrix(path: &Path) -> Result<Array2<f64>> {
    let bytes = std::fs::read(path)?;
    if bytes.starts_with(MAGIC) {
        decode_binary(path, &bytes)
    } else {
        let text = String::from_utf8(bytes).map_err(|_| format_err(path, "neither FEM1 binary nor UTF-8 CSV"))?;
        parse_csv(path, &text)
    }
}

fn decode_binary(path: &Path, bytes: &[u8]) -> Result<Array2<f64>> {
    if bytes.len() < 12 {
        return Err(format_err(path, "truncated header"));
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = &bytes[12..];
    if body.len() != rows * cols * 4 {
        return Err(format_err(path, format!("expected {} payload bytes for {rows}x{cols}, found {}", rows * cols * 4, body.len())));
    }
    let values: Vec<f64> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Array2::from_shape_vec((rows, cols), values).map_err(|e| format_err(path, e.to_string()))
}

fn parse_csv(path: &Path, text: &str) -> Result<Array2<f64>> {
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| format_err(path, format!("line {}: {e}", lineno + 1)))?;
        match cols {
            None => cols = Some(row.len()),
            Some(c) if c != row.len() => {
                return Err(format_err(path, format!("line {}: {} values, expected {c}", lineno + 1, row.len())));
            }
            _ => {}
        }
        data.extend(row);
        rows += 1;
    }
    let cols = cols.ok_or_else(|| format_err(path, "no rows"))?;
    Array2::from_shape_vec((rows, cols), data).map_err(|e| format_err(path, e.to_string()))
}

/// Writes full-precision CSV (values round-trip exactly).
pub fn write_matrix_csv(path: &Path, m: &Array2<f64>) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for row in m.rows() {
        let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        writeln!(out, "{}", line.join(","))?;
    }
    out.flush()?;
    Ok(())
}

/// Writes the `FEM1` binary layout (values are narrowed to `f32`).
pub fn write_matrix_bin(path: &Path, m: &Array2<f64>) -> Result<()> {
    let mut bytes = Vec::with_capacity(12 + m.len() * 4);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(m.nrows() as u32).to_le_bytes());
    bytes.extend_from_slice(&(m.ncols() as u32).to_le_bytes());
    for v in m.iter() {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let m = array![[0.1, -1.0 / 3.0, 1e-300], [2.5, 0.0, -7.0]];
        write_matrix_csv(&p, &m).unwrap();
        assert_eq!(read_matrix(&p).unwrap(), m);
    }

    #[test]
    fn binary_round_trip_for_f32_values() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.bin");
        let m = array![[0.5, -1.25], [3.0, 0.0], [8.0, 1.0]];
        write_matrix_bin(&p, &m).unwrap();
        assert_eq!(read_matrix(&p).unwrap(), m);
    }

    #[test]
    fn ragged_csv_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        std::fs::write(&p, "1,2\n3\n").unwrap();
        assert!(read_matrix(&p).is_err());
    }

    #[test]
    fn truncated_binary_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.bin");
        let mut bytes = MAGIC.to_vec();
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&1f32.to_le_bytes());
        std::fs::write(&p, bytes).unwrap();
        assert!(read_matrix(&p).is_err());
    }
}
