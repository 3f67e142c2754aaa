//! Dataset CSV IO. Format: comma-separated, UTF-8, '.' decimal separator,
//! header row exactly `y,x0..x{p-1},z0..z{q-1}`. Values are written with 17
//! significant digits so that save-then-load round-trips bitwise.

use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::data::Dataset;
use crate::error::{Error, Result};

/// Formats an f64 with 17 significant digits (lossless decimal round-trip).
pub fn fmt_f64(v: f64) -> String {
    format!("{:.16e}", v)
}

pub fn save_csv(data: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    let (p, q) = (data.p(), data.q());
    let mut header = String::from("y");
    for j in 0..p {
        header.push_str(&format!(",x{j}"));
    }
    for j in 0..q {
        header.push_str(&format!(",z{j}"));
    }
    writeln!(w, "{header}")?;
    for i in 0..data.n() {
        let mut line = fmt_f64(data.y()[i]);
        for j in 0..p {
            line.push(',');
            line.push_str(&fmt_f64(data.x()[[i, j]]));
        }
        for j in 0..q {
            line.push(',');
            line.push_str(&fmt_f64(data.z()[[i, j]]));
        }
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path.as_ref())
        .map_err(|e| Error::invalid(format!("cannot open {}: {e}", path.as_ref().display())))?;

    let headers: Vec<String> =
        reader.headers().map_err(csv_err)?.iter().map(|s| s.to_string()).collect();
    let (p, q) = parse_header(&headers)?;

    let mut y = Vec::new();
    let mut x = Vec::new();
    let mut z = Vec::new();
    for (row_idx, record) in reader.records().enumerate() {
        let record = record.map_err(csv_err)?;
        if record.len() != 1 + p + q {
            return Err(Error::Parse {
                row: row_idx + 1,
                col: "-".into(),
                msg: format!("expected {} fields, found {}", 1 + p + q, record.len()),
            });
        }
        for (col_idx, field) in record.iter().enumerate() {
            let v = parse_cell(field, row_idx + 1, &headers[col_idx])?;
            if col_idx == 0 {
                y.push(v);
            } else if col_idx <= p {
                x.push(v);
            } else {
                z.push(v);
            }
        }
    }
    let n = y.len();
    if n == 0 {
        return Err(Error::invalid("csv has a header but no data rows"));
    }
    let x = Array2::from_shape_vec((n, p), x).expect("shape checked per record");
    let z = Array2::from_shape_vec((n, q), z).expect("shape checked per record");
    Dataset::new(Array1::from(y), x, z)
}

fn csv_err(e: csv::Error) -> Error {
    match e.position() {
        Some(pos) => Error::Parse {
            row: pos.line() as usize,
            col: "-".into(),
            msg: e.to_string(),
        },
        None => Error::invalid(e.to_string()),
    }
}

fn parse_cell(field: &str, row: usize, col: &str) -> Result<f64> {
    let v: f64 = field.parse().map_err(|_| Error::Parse {
        row,
        col: col.to_string(),
        msg: format!("not a number: {field:?}"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse {
            row,
            col: col.to_string(),
            msg: format!("non-finite value: {field:?}"),
        });
    }
    Ok(v)
}

/// Validates the `y,x0..,z0..` header and returns (p, q).
fn parse_header(headers: &[String]) -> Result<(usize, usize)> {
    if headers.first().map(String::as_str) != Some("y") {
        return Err(Error::invalid("first csv column must be named 'y'"));
    }
    let mut i = 1;
    let mut p = 0;
    while i < headers.len() && headers[i] == format!("x{p}") {
        p += 1;
        i += 1;
    }
    let mut q = 0;
    while i < headers.len() && headers[i] == format!("z{q}") {
        q += 1;
        i += 1;
    }
    if i != headers.len() || p == 0 || q == 0 {
        return Err(Error::invalid(
            "csv header must be exactly y,x0..x{p-1},z0..z{q-1} with p, q >= 1",
        ));
    }
    Ok((p, q))
}
