//! Reading count matrices and writing tabular artifacts.

use std::fs::File;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use mplnfa::{CountMatrix, NormalizationFactors};
use sha2::{Digest, Sha256};

use crate::{runtime, CliError, CliResult};

/// How per-sample normalization constants `C_i` are obtained.
#[derive(Debug, Clone, PartialEq)]
pub enum Normalization {
    /// `C_i = 1`.
    None,
    /// `C_i = rowsum_i / median rowsum`.
    LibSize,
    /// Second column of a CSV keyed by sample id.
    File(std::path::PathBuf),
}

impl Normalization {
    pub fn name(&self) -> &'static str {
        match self {
            Normalization::None => "none",
            Normalization::LibSize => "libsize",
            Normalization::File(_) => "file",
        }
    }
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

/// Parse a count CSV: header of variable names, first column sample ids,
/// non-negative integer entries.
pub fn parse_counts(text: &str, source: &str) -> CliResult<CountMatrix> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut records = reader.records();
    let header = match records.next() {
        None => return Err(invalid(format!("{source}: file is empty"))),
        Some(r) => r.map_err(|e| invalid(format!("{source}: {e}")))?,
    };
    let width = header.len();
    if width < 2 {
        return Err(invalid(format!(
            "{source}: header needs a sample-id column and at least one variable"
        )));
    }
    let variable_ids: Vec<String> = header.iter().skip(1).map(|s| s.trim().to_string()).collect();
    let mut sample_ids = Vec::new();
    let mut values = Vec::new();
    for (idx, record) in records.enumerate() {
        let line = idx + 2;
        let record = record.map_err(|e| invalid(format!("{source}: line {line}: {e}")))?;
        if record.len() == 1 && record[0].trim().is_empty() {
            continue;
        }
        if record.len() != width {
            return Err(invalid(format!(
                "{source}: ragged row at line {line}: {} fields, header has {width}",
                record.len()
            )));
        }
        let sample = record[0].trim().to_string();
        for (j, token) in record.iter().enumerate().skip(1) {
            values.push(parse_count(token.trim()).map_err(|why| {
                invalid(format!(
                    "{source}: row {line} (sample '{sample}'), column {} ('{}'): {why} '{token}'",
                    j + 1,
                    variable_ids[j - 1]
                ))
            })?);
        }
        sample_ids.push(sample);
    }
    if sample_ids.is_empty() {
        return Err(invalid(format!("{source}: no data rows")));
    }
    Ok(CountMatrix::new(values, sample_ids, variable_ids)?)
}

fn parse_count(token: &str) -> Result<u64, &'static str> {
    if let Ok(v) = u64::from_str(token) {
        return Ok(v);
    }
    match f64::from_str(token) {
        Ok(v) if v < 0.0 => Err("negative entry"),
        Ok(_) => Err("non-integer entry"),
        Err(_) if token.starts_with('-') && token[1..].bytes().all(|b| b.is_ascii_digit()) => {
            Err("negative entry")
        }
        Err(_) => Err("non-numeric entry"),
    }
}

/// Normalization factors for `counts` under `mode`.
pub fn normalization_factors(counts: &CountMatrix, mode: &Normalization) -> CliResult<NormalizationFactors> {
    match mode {
        Normalization::None => Ok(NormalizationFactors::ones(counts.n())),
        Normalization::LibSize => {
            let sums = counts.row_sums();
            if let Some(i) = sums.iter().position(|s| *s == 0) {
                return Err(invalid(format!(
                    "sample '{}' has zero library size; libsize normalization needs positive row sums",
                    counts.sample_ids()[i]
                )));
            }
            let mut sorted: Vec<f64> = sums.iter().map(|s| *s as f64).collect();
            sorted.sort_by(f64::total_cmp);
            let mid = sorted.len() / 2;
            let median = if sorted.len().is_multiple_of(2) {
                0.5 * (sorted[mid - 1] + sorted[mid])
            } else {
                sorted[mid]
            };
            Ok(NormalizationFactors::new(sums.iter().map(|s| *s as f64 / median).collect())?)
        }
        Normalization::File(path) => {
            let text = read_text(path)?;
            parse_factors(&text, &path.display().to_string(), counts.sample_ids())
        }
    }
}

/// Parse a factor CSV (header, then `sample_id,factor` rows) in the sample
/// order of the count matrix.
pub fn parse_factors(text: &str, source: &str, sample_ids: &[String]) -> CliResult<NormalizationFactors> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut found = std::collections::HashMap::new();
    for (idx, record) in reader.records().enumerate() {
        let line = idx + 2;
        let record = record.map_err(|e| invalid(format!("{source}: line {line}: {e}")))?;
        if record.len() < 2 {
            return Err(invalid(format!("{source}: line {line}: expected sample_id,factor")));
        }
        let token = record[1].trim();
        let value: f64 = token
            .parse()
            .map_err(|_| invalid(format!("{source}: line {line}: non-numeric factor '{token}'")))?;
        if !(value > 0.0) || !value.is_finite() {
            return Err(invalid(format!(
                "{source}: line {line}: normalization factor must be positive, got '{token}'"
            )));
        }
        found.insert(record[0].trim().to_string(), value);
    }
    let values = sample_ids
        .iter()
        .map(|id| {
            found
                .get(id)
                .copied()
                .ok_or_else(|| invalid(format!("{source}: no normalization factor for sample '{id}'")))
        })
        .collect::<CliResult<Vec<f64>>>()?;
    Ok(NormalizationFactors::new(values)?)
}

pub fn read_text(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| invalid(format!("cannot read {}: {e}", path.display())))
}

/// Read counts and compute factors from a CSV file.
pub fn read_counts(path: &Path, mode: &Normalization) -> CliResult<(CountMatrix, NormalizationFactors)> {
    let text = read_text(path)?;
    let counts = parse_counts(&text, &path.display().to_string())?;
    let factors = normalization_factors(&counts, mode)?;
    Ok((counts, factors))
}

/// Hex SHA-256 of a file's bytes.
pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path).map_err(|e| invalid(format!("cannot read {}: {e}", path.display())))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

/// Write rows of string cells as CSV.
pub fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| runtime(&path.display().to_string(), e))?;
    let ctx = path.display().to_string();
    w.write_record(header).map_err(|e| runtime(&ctx, e))?;
    for row in rows {
        w.write_record(row).map_err(|e| runtime(&ctx, e))?;
    }
    w.flush().map_err(|e| runtime(&ctx, e))
}

/// Write a count matrix in the format [`parse_counts`] reads.
pub fn write_counts(path: &Path, counts: &CountMatrix) -> CliResult<()> {
    let mut header = vec!["sample_id".to_string()];
    header.extend(counts.variable_ids().iter().cloned());
    let rows: Vec<Vec<String>> = (0..counts.n())
        .map(|i| {
            std::iter::once(counts.sample_ids()[i].clone())
                .chain(counts.row(i).iter().map(u64::to_string))
                .collect()
        })
        .collect();
    write_csv(path, &header, &rows)
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let ctx = path.display().to_string();
    let mut file = File::create(path).map_err(|e| runtime(&ctx, e))?;
    serde_json::to_writer_pretty(&mut file, value).map_err(|e| runtime(&ctx, e))?;
    file.write_all(b"\n").map_err(|e| runtime(&ctx, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

pub fn ensure_dir(path: &Path) -> CliResult<()> {
    std::fs::create_dir_all(path).map_err(|e| runtime(&format!("cannot create {}", path.display()), e))
}
