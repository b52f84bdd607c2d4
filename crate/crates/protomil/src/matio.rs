//! Text matrix and key:value file helpers shared by cohort I/O, checkpoints,
//! and the interpretation exports.
//!
//! `.mat` layout: first line `N D`, then N lines of D space-separated
//! decimals. Values are written with the shortest representation that parses
//! back to the same float, so save∘load is the identity.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::tensor::{Real, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum FileError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{file}:{line}: {msg}")]
    Parse { file: String, line: usize, msg: String },
}

pub fn parse_err(file: &Path, line: usize, msg: impl Into<String>) -> FileError {
    FileError::Parse { file: file.display().to_string(), line, msg: msg.into() }
}

pub fn write_mat<T: Real>(path: &Path, t: &Tensor<T>) -> Result<(), FileError> {
    let mut s = String::new();
    let _ = writeln!(s, "{} {}", t.rows(), t.cols());
    for r in 0..t.rows() {
        let row = t.row(r);
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                s.push(' ');
            }
            let _ = write!(s, "{v}");
        }
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn read_mat<T: Real>(path: &Path) -> Result<Tensor<T>, FileError> {
    let content = fs::read_to_string(path)?;
    let mut lines = content.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "empty file"))?;
    let mut hp = header.split_whitespace();
    let rows: usize = hp
        .next()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| parse_err(path, 1, format!("malformed header '{header}'")))?;
    let cols: usize = hp
        .next()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| parse_err(path, 1, format!("malformed header '{header}'")))?;
    if hp.next().is_some() {
        return Err(parse_err(path, 1, format!("malformed header '{header}'")));
    }
    let mut data = Vec::with_capacity(rows * cols);
    let mut seen = 0usize;
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        if seen == rows {
            return Err(parse_err(path, idx + 1, format!("more than {rows} declared rows")));
        }
        let mut width = 0;
        for tok in line.split_whitespace() {
            let v: f64 = tok
                .parse()
                .map_err(|_| parse_err(path, idx + 1, format!("bad number '{tok}'")))?;
            data.push(T::from_f64(v));
            width += 1;
        }
        if width != cols {
            return Err(parse_err(
                path,
                idx + 1,
                format!("row has {width} values, header declares {cols}"),
            ));
        }
        seen += 1;
    }
    if seen != rows {
        return Err(parse_err(path, seen + 1, format!("header declares {rows} rows, found {seen}")));
    }
    Ok(Tensor::from_vec(rows, cols, data))
}

/// Flat `key: value` file (meta.txt, bank state).
pub fn write_kv(path: &Path, pairs: &[(String, String)]) -> Result<(), FileError> {
    let mut s = String::new();
    for (k, v) in pairs {
        let _ = writeln!(s, "{k}: {v}");
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn read_kv(path: &Path) -> Result<Vec<(String, String)>, FileError> {
    let content = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (idx, line) in content.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once(':')
            .ok_or_else(|| parse_err(path, idx + 1, format!("expected 'key: value', got '{line}'")))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Atomic text write: temp file in the same directory, then rename.
pub fn write_atomic(path: &Path, content: &str) -> Result<(), FileError> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(content.as_bytes())?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
