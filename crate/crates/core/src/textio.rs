//! CSV plumbing shared by the artifact formats. Floats are written with
//! `Display`, which is the shortest representation that parses back to the
//! identical value.

use std::fs::File;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Parsed CSV body with the header already checked.
pub(crate) struct Table {
    pub path: std::path::PathBuf,
    pub rows: Vec<(usize, Vec<String>)>,
}

impl Table {
    pub fn field<V: FromStr>(&self, line: usize, row: &[String], col: usize, name: &str) -> Result<V> {
        let raw = row
            .get(col)
            .ok_or_else(|| Error::parse(&self.path, line, format!("missing column `{name}`")))?;
        raw.trim()
            .parse()
            .map_err(|_| Error::parse(&self.path, line, format!("column `{name}`: cannot parse `{raw}`")))
    }
}

pub(crate) fn read_table(path: &Path, header: &[&str]) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let got: Vec<String> = rdr
        .headers()
        .map_err(|e| csv_err(path, e))?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();
    if got != header {
        return Err(Error::parse(
            path,
            1,
            format!("expected header `{}`, found `{}`", header.join(","), got.join(",")),
        ));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        rows.push((line, rec.iter().map(str::to_string).collect()));
    }
    Ok(Table {
        path: path.to_path_buf(),
        rows,
    })
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::parse(path, line, format!("{other:?}")),
    }
}

/// Writes `header` then each row, joined by commas.
pub(crate) fn write_table<I>(path: &Path, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = Vec<String>>,
{
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    for r in rows {
        out.push_str(&r.join(","));
        out.push('\n');
    }
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}
