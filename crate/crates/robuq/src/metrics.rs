//! Per-epoch CSV metrics and the run manifest.
//!
//! The CSV has one fixed header; accuracy columns are left blank on
//! epochs without an evaluation pass, and the third attack column is
//! blank unless the margin attack ran. Floats are written with Rust's
//! shortest round-trip formatting, so reading a file back reproduces the
//! original values exactly.
//!
//! The manifest records everything needed to audit a run: the resolved
//! configuration, the seed, and a sha256 of every artifact the run wrote.
//! It is itself a `key=value` file parseable by the config reader.

use std::fs;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::config::{sha256_hex, Config};
use crate::error::{Error, Result};
use crate::train::{AccTable, EpochRow};

pub const CSV_HEADER: &str =
    "epoch,loss,N,A1,A2,A3,M_t,lambda,weight_sparsity,channel_sparsity,seconds";

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn format_row(row: &EpochRow) -> String {
    let (n, a1, a2, a3) = match row.acc {
        Some(acc) => (Some(acc.n), Some(acc.a1), Some(acc.a2), acc.a3),
        None => (None, None, None, None),
    };
    format!(
        "{},{},{},{},{},{},{},{},{},{},{}",
        row.epoch,
        row.loss,
        fmt_opt(n),
        fmt_opt(a1),
        fmt_opt(a2),
        fmt_opt(a3),
        row.m_t,
        row.lambda,
        row.weight_sparsity,
        row.channel_sparsity,
        row.seconds
    )
}

/// Append-only CSV writer; creates the file with its header on first use
/// and appends thereafter, so a resumed run extends the same file.
pub struct MetricsWriter {
    path: PathBuf,
}

impl MetricsWriter {
    pub fn open(path: &Path) -> Result<MetricsWriter> {
        if !path.exists() {
            fs::write(path, format!("{CSV_HEADER}\n"))?;
        }
        Ok(MetricsWriter {
            path: path.to_path_buf(),
        })
    }

    pub fn append(&self, row: &EpochRow) -> Result<()> {
        let mut f = OpenOptions::new().append(true).open(&self.path)?;
        writeln!(f, "{}", format_row(row))?;
        Ok(())
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

fn parse_field(field: &str, line: usize) -> Result<f64> {
    field
        .parse::<f64>()
        .map_err(|_| Error::Format(format!("metrics line {line}: '{field}' is not a number")))
}

fn parse_opt(field: &str, line: usize) -> Result<Option<f64>> {
    if field.is_empty() {
        Ok(None)
    } else {
        parse_field(field, line).map(Some)
    }
}

/// Read a metrics CSV back into rows, restoring every float exactly.
pub fn read_rows(path: &Path) -> Result<Vec<EpochRow>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == CSV_HEADER => {}
        Some((_, h)) => {
            return Err(Error::Format(format!("unexpected metrics header '{h}'")));
        }
        None => return Err(Error::Format("empty metrics file".into())),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 11 {
            return Err(Error::Format(format!(
                "metrics line {}: {} fields, expected 11",
                i + 1,
                fields.len()
            )));
        }
        let epoch = fields[0]
            .parse::<usize>()
            .map_err(|_| Error::Format(format!("metrics line {}: bad epoch", i + 1)))?;
        let n = parse_opt(fields[2], i + 1)?;
        let a1 = parse_opt(fields[3], i + 1)?;
        let a2 = parse_opt(fields[4], i + 1)?;
        let a3 = parse_opt(fields[5], i + 1)?;
        let acc = match (n, a1, a2) {
            (Some(n), Some(a1), Some(a2)) => Some(AccTable { n, a1, a2, a3 }),
            (None, None, None) => None,
            _ => {
                return Err(Error::Format(format!(
                    "metrics line {}: accuracy columns must be all present or all blank",
                    i + 1
                )))
            }
        };
        rows.push(EpochRow {
            epoch,
            loss: parse_field(fields[1], i + 1)?,
            acc,
            m_t: parse_field(fields[6], i + 1)?,
            lambda: parse_field(fields[7], i + 1)?,
            weight_sparsity: parse_field(fields[8], i + 1)?,
            channel_sparsity: parse_field(fields[9], i + 1)?,
            seconds: parse_field(fields[10], i + 1)?,
        });
    }
    Ok(rows)
}

/// Write the run manifest: resolved configuration under `config.`, the
/// seed, and a sha256 per artifact under `artifact.`.
pub fn write_manifest(
    path: &Path,
    cfg: &Config,
    seed: u64,
    artifacts: &[(&str, &Path)],
) -> Result<()> {
    let mut manifest = Config::new();
    manifest.set("seed", &seed.to_string());
    manifest.set("config_digest", &cfg.digest());
    for k in cfg.keys().collect::<Vec<_>>() {
        manifest.set(&format!("config.{k}"), cfg.get(k).unwrap());
    }
    for (name, p) in artifacts {
        let bytes = fs::read(p)?;
        manifest.set(&format!("artifact.{name}"), &sha256_hex(&bytes));
    }
    fs::write(path, manifest.resolved_string())?;
    Ok(())
}
