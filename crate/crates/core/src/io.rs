//! CSV and JSON file helpers shared by the harness and the command line.
//!
//! Reals are written with 17 significant digits (`{:.16e}`), which round-trips
//! every finite `f64` exactly.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use serde::Serialize;

use crate::{Error, Result};

pub fn fmt_real(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else if v.is_nan() {
        "nan".into()
    } else if v > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

fn parse_real(s: &str) -> Option<f64> {
    match s {
        "nan" => Some(f64::NAN),
        "inf" => Some(f64::INFINITY),
        "-inf" => Some(f64::NEG_INFINITY),
        _ => s.parse().ok(),
    }
}

pub fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    Ok(())
}

/// Writes a header line and one line per row.
pub fn write_csv<I, R>(path: &Path, header: &[String], rows: I) -> Result<()>
where
    I: IntoIterator<Item = R>,
    R: AsRef<[f64]>,
{
    ensure_parent(path)?;
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut put = |line: &str| w.write_all(line.as_bytes()).map_err(|e| Error::io(path, e));
    put(&header.join(","))?;
    put("\n")?;
    let mut line = String::new();
    for row in rows {
        line.clear();
        for (i, v) in row.as_ref().iter().enumerate() {
            if i > 0 {
                line.push(',');
            }
            line.push_str(&fmt_real(*v));
        }
        line.push('\n');
        put(&line)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes a matrix with an optional extra trailing column.
pub fn write_matrix_csv(path: &Path, header: &[String], data: &Array2<f64>, extra: Option<&[f64]>) -> Result<()> {
    let expected = data.ncols() + usize::from(extra.is_some());
    if header.len() != expected {
        return Err(Error::DimensionMismatch {
            context: "csv header",
            expected,
            got: header.len(),
        });
    }
    let rows = data.rows().into_iter().enumerate().map(|(i, r)| {
        let mut v = r.to_vec();
        if let Some(e) = extra {
            v.push(e[i]);
        }
        v
    });
    write_csv(path, header, rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsvTable {
    pub header: Vec<String>,
    pub data: Array2<f64>,
}

impl CsvTable {
    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }
}

/// Reads a numeric CSV with a header line. Parse errors carry 1-based line numbers.
pub fn read_csv(path: &Path) -> Result<CsvTable> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text, path)
}

pub fn parse_csv(text: &str, path: &Path) -> Result<CsvTable> {
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate();
    let header: Vec<String> = match lines.next() {
        Some((_, h)) if !h.trim().is_empty() => h.split(',').map(|s| s.trim().to_string()).collect(),
        _ => return Err(parse_err(1, "missing header".into())),
    };
    let width = header.len();
    let mut values = Vec::new();
    let mut n_rows = 0;
    for (i, line) in lines {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != width {
            return Err(parse_err(lineno, format!("expected {width} fields, found {}", fields.len())));
        }
        for f in fields {
            let v = parse_real(f.trim()).ok_or_else(|| parse_err(lineno, format!("not a number: {f:?}")))?;
            values.push(v);
        }
        n_rows += 1;
    }
    let data = Array2::from_shape_vec((n_rows, width), values).expect("rectangular");
    Ok(CsvTable { header, data })
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path)?;
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    s.push('\n');
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn theta_header(dim: usize) -> Vec<String> {
    (0..dim).map(|i| format!("theta_{i}")).collect()
}
