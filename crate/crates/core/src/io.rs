//! CSV and JSON plumbing shared by every exporter.
//!
//! Every CSV file starts with `#`-prefixed `key=value` comment lines carrying
//! the config hash and the unit convention, followed by a regular header row.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{de::DeserializeOwned, Serialize};

use crate::error::{Error, Result};
use crate::units::{ENERGY_UNIT_LABEL, TIME_UNIT_LABEL};

/// Provenance written ahead of the column header.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CsvHeader {
    pub config_hash: String,
    pub extra: Vec<(String, String)>,
}

impl CsvHeader {
    pub fn new(config_hash: impl Into<String>) -> Self {
        Self { config_hash: config_hash.into(), extra: Vec::new() }
    }

    pub fn with(mut self, key: impl Into<String>, value: impl ToString) -> Self {
        self.extra.push((key.into(), value.to_string()));
        self
    }
}

pub fn write_csv<I>(path: &Path, header: &CsvHeader, columns: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = Vec<String>>,
{
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "# config_hash={}", header.config_hash)?;
    writeln!(out, "# energy_unit={ENERGY_UNIT_LABEL}")?;
    writeln!(out, "# time_unit={TIME_UNIT_LABEL}")?;
    for (k, v) in &header.extra {
        writeln!(out, "# {k}={v}")?;
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(columns)?;
    for row in rows {
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Parsed CSV file: comment metadata, column names, raw records.
#[derive(Debug, Clone)]
pub struct CsvTable {
    pub meta: Vec<(String, String)>,
    pub columns: Vec<String>,
    pub records: Vec<csv::StringRecord>,
}

impl CsvTable {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn config_hash(&self) -> Option<&str> {
        self.meta("config_hash")
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }
}

pub fn read_csv(path: &Path) -> Result<CsvTable> {
    let mut meta = Vec::new();
    {
        let reader = BufReader::new(File::open(path)?);
        for line in reader.lines() {
            let line = line?;
            let Some(rest) = line.strip_prefix('#') else { break };
            if let Some((k, v)) = rest.trim().split_once('=') {
                meta.push((k.trim().to_string(), v.trim().to_string()));
            }
        }
    }
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
    let columns = rdr.headers()?.iter().map(str::to_string).collect();
    let records = rdr.records().collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(CsvTable { meta, columns, records })
}

pub fn parse_f64(path: &Path, s: &str) -> Result<f64> {
    s.trim()
        .parse()
        .map_err(|_| Error::Format { path: path.to_path_buf(), reason: format!("not a number: {s:?}") })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    out.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let f = BufReader::new(File::open(path)?);
    Ok(serde_json::from_reader(f)?)
}

/// Fails unless `found` equals `expected`.
pub fn require_hash(path: &Path, expected: &str, found: Option<&str>) -> Result<()> {
    match found {
        Some(h) if h == expected => Ok(()),
        other => Err(Error::HashMismatch {
            path: path.to_path_buf(),
            expected: expected.to_string(),
            found: other.unwrap_or("<missing>").to_string(),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_keeps_bits_and_meta() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let xs = [0.1f64, std::f64::consts::PI, -1.0e-300, 123456.789];
        let header = CsvHeader::new("abc").with("seed", 7);
        write_csv(&path, &header, &["i", "x"], xs.iter().enumerate().map(|(i, x)| vec![i.to_string(), x.to_string()]))
            .unwrap();
        let t = read_csv(&path).unwrap();
        assert_eq!(t.config_hash(), Some("abc"));
        assert_eq!(t.meta("seed"), Some("7"));
        assert_eq!(t.columns, vec!["i", "x"]);
        for (rec, x) in t.records.iter().zip(xs) {
            assert_eq!(parse_f64(&path, &rec[1]).unwrap().to_bits(), x.to_bits());
        }
        assert!(require_hash(&path, "abc", t.config_hash()).is_ok());
        assert!(matches!(require_hash(&path, "abd", t.config_hash()), Err(Error::HashMismatch { .. })));
    }
}
