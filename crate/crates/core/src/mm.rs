//! Matrix Market reading and writing for dense real matrices.
//!
//! Writing always produces `array real general` with 17 significant digits.
//! Reading accepts `array` and `coordinate` layouts with `general` or
//! `symmetric` symmetry.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub fn write_matrix<W: Write>(out: &mut W, m: &DMatrix<f64>) -> Result<()> {
    writeln!(out, "%%MatrixMarket matrix array real general")?;
    writeln!(out, "{} {}", m.nrows(), m.ncols())?;
    // column-major, as the format prescribes and as nalgebra stores it
    for v in m.iter() {
        writeln!(out, "{v:.16e}")?;
    }
    Ok(())
}

pub fn write_matrix_file(path: impl AsRef<Path>, m: &DMatrix<f64>) -> Result<()> {
    let mut buf = Vec::new();
    write_matrix(&mut buf, m)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_matrix_file(path: impl AsRef<Path>) -> Result<DMatrix<f64>> {
    parse_matrix(&fs::read_to_string(path)?)
}

fn bad(msg: impl Into<String>) -> Error {
    Error::MatrixMarket(msg.into())
}

pub fn parse_matrix(text: &str) -> Result<DMatrix<f64>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad("empty input"))?;
    let fields: Vec<String> = header.split_whitespace().map(|s| s.to_ascii_lowercase()).collect();
    if fields.len() != 5 || fields[0] != "%%matrixmarket" || fields[1] != "matrix" {
        return Err(bad(format!("unrecognized header `{header}`")));
    }
    let layout = fields[2].as_str();
    if !matches!(fields[3].as_str(), "real" | "integer" | "double") {
        return Err(bad(format!("unsupported field type `{}`", fields[3])));
    }
    let symmetric = match fields[4].as_str() {
        "general" => false,
        "symmetric" => true,
        other => return Err(bad(format!("unsupported symmetry `{other}`"))),
    };
    let mut body = lines.map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('%'));
    let size_line = body.next().ok_or_else(|| bad("missing size line"))?;
    let sizes = parse_usizes(size_line)?;

    let parse_f = |tok: &str| tok.parse::<f64>().map_err(|_| bad(format!("bad number `{tok}`")));
    match layout {
        "array" => {
            let [rows, cols] = sizes[..] else {
                return Err(bad("array size line needs two entries"));
            };
            if symmetric && rows != cols {
                return Err(bad("symmetric matrix must be square"));
            }
            let mut m = DMatrix::zeros(rows, cols);
            let mut values = body.flat_map(str::split_whitespace);
            for j in 0..cols {
                let start = if symmetric { j } else { 0 };
                for i in start..rows {
                    let tok = values.next().ok_or_else(|| bad("too few entries"))?;
                    let v = parse_f(tok)?;
                    m[(i, j)] = v;
                    if symmetric {
                        m[(j, i)] = v;
                    }
                }
            }
            if values.next().is_some() {
                return Err(bad("too many entries"));
            }
            Ok(m)
        }
        "coordinate" => {
            let [rows, cols, nnz] = sizes[..] else {
                return Err(bad("coordinate size line needs three entries"));
            };
            let mut m = DMatrix::zeros(rows, cols);
            let mut count = 0;
            for line in body {
                let toks: Vec<&str> = line.split_whitespace().collect();
                if toks.len() != 3 {
                    return Err(bad(format!("bad coordinate entry `{line}`")));
                }
                let i: usize = toks[0].parse().map_err(|_| bad(format!("bad row `{}`", toks[0])))?;
                let j: usize = toks[1].parse().map_err(|_| bad(format!("bad column `{}`", toks[1])))?;
                if i == 0 || j == 0 || i > rows || j > cols {
                    return Err(bad(format!("entry ({i}, {j}) out of range")));
                }
                let v = parse_f(toks[2])?;
                m[(i - 1, j - 1)] += v;
                if symmetric && i != j {
                    m[(j - 1, i - 1)] += v;
                }
                count += 1;
            }
            if count != nnz {
                return Err(bad(format!("expected {nnz} entries, found {count}")));
            }
            Ok(m)
        }
        other => Err(bad(format!("unsupported layout `{other}`"))),
    }
}

fn parse_usizes(line: &str) -> Result<Vec<usize>> {
    line.split_whitespace()
        .map(|t| t.parse().map_err(|_| bad(format!("bad size `{t}`"))))
        .collect()
}
