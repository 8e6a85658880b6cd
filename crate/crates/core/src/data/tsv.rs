//! Canonical impression format: UTF-8, tab-separated, one header row.
//!
//! Label columns are found by name (`y_ctr`, `y_cvr`), not by position. Every
//! other selected column is a categorical field whose raw string is hashed.

use std::fmt;
use std::io::BufRead;
use std::path::Path;
use std::str::FromStr;

use super::{hash_feature, Dataset, Sample};
use crate::error::{Error, Result};

pub const LABEL_CTR: &str = "y_ctr";
pub const LABEL_CVR: &str = "y_cvr";

/// Handling of rows that convert without a click.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LabelPolicy {
    /// Drop the row.
    Reject,
    /// Keep the row with `y_ctr` forced to 1.
    #[default]
    Coerce,
}

impl fmt::Display for LabelPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LabelPolicy::Reject => "reject",
            LabelPolicy::Coerce => "coerce",
        })
    }
}

impl FromStr for LabelPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "reject" => Ok(LabelPolicy::Reject),
            "coerce" => Ok(LabelPolicy::Coerce),
            other => Err(Error::Config(format!("unknown label policy '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadOutcome {
    pub dataset: Dataset,
    /// Rows that converted without a click (dropped or coerced per policy).
    pub violations: usize,
}

/// Load a canonical TSV file.
///
/// `schema` names the feature columns to use, in order; when empty, every
/// non-label column is used in header order.
pub fn load_tsv(
    path: &Path,
    schema: &[String],
    policy: LabelPolicy,
    vocab_size: usize,
) -> Result<LoadOutcome> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_tsv(std::io::BufReader::new(file), schema, policy, vocab_size).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

pub fn read_tsv<R: BufRead>(
    reader: R,
    schema: &[String],
    policy: LabelPolicy,
    vocab_size: usize,
) -> Result<LoadOutcome> {
    if vocab_size == 0 {
        return Err(Error::Config("vocab size must be at least 1".into()));
    }
    let mut lines = reader.lines();
    let header = match lines.next() {
        Some(line) => line.map_err(|e| Error::io("<input>", e))?,
        None => return Err(Error::Schema("missing header row".into())),
    };
    let columns: Vec<&str> = header.trim_end_matches('\r').split('\t').collect();
    let position = |name: &str| {
        columns
            .iter()
            .position(|c| *c == name)
            .ok_or_else(|| Error::Schema(format!("missing column '{name}'")))
    };
    let ctr_col = position(LABEL_CTR)?;
    let cvr_col = position(LABEL_CVR)?;
    let fields: Vec<String> = if schema.is_empty() {
        columns
            .iter()
            .filter(|c| **c != LABEL_CTR && **c != LABEL_CVR)
            .map(|c| c.to_string())
            .collect()
    } else {
        schema.to_vec()
    };
    let field_cols = fields
        .iter()
        .map(|f| position(f))
        .collect::<Result<Vec<_>>>()?;

    let mut dataset = Dataset::new(fields.clone(), vec![vocab_size; fields.len()]);
    let mut violations = 0;
    for (i, line) in lines.enumerate() {
        let row = i + 2; // file line number
        let line = line.map_err(|e| Error::io("<input>", e))?;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split('\t').collect();
        if cells.len() != columns.len() {
            return Err(Error::Parse {
                row,
                msg: format!("expected {} columns, found {}", columns.len(), cells.len()),
            });
        }
        let label = |col: usize, name: &str| match cells[col].trim() {
            "0" => Ok(0u8),
            "1" => Ok(1u8),
            other => Err(Error::Parse {
                row,
                msg: format!("{name} must be 0 or 1, found '{other}'"),
            }),
        };
        let mut y_ctr = label(ctr_col, LABEL_CTR)?;
        let y_cvr = label(cvr_col, LABEL_CVR)?;
        if y_cvr == 1 && y_ctr == 0 {
            violations += 1;
            match policy {
                LabelPolicy::Reject => continue,
                LabelPolicy::Coerce => y_ctr = 1,
            }
        }
        let feature_indices = fields
            .iter()
            .zip(&field_cols)
            .map(|(name, &col)| hash_feature(name, cells[col], vocab_size))
            .collect();
        dataset.samples.push(Sample {
            feature_indices,
            y_ctr,
            y_cvr,
        });
    }
    Ok(LoadOutcome {
        dataset,
        violations,
    })
}
