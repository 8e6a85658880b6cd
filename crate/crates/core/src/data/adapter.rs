//! Readers for the public Alibaba multi-task CSV releases.
//!
//! The adapters stream files without loading them, so label statistics can
//! be computed on the full releases (tens of millions of rows).
//!
//! Assumed layouts (header row required, columns matched by name):
//!
//! * `aliexpress` (FR / NL / US / ES country splits): comma-separated,
//!   `search_id`, `categorical_1..16`, `numerical_1..63`, `click`,
//!   `conversion`. Only the `categorical_*` columns become features.
//! * `aliccp`: comma-separated preprocessed release with `click` and
//!   `purchase` label columns; every other column except `sample_id` is a
//!   categorical feature.
//!
//! Mirrors differ; every name can be overridden on the command line.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use super::{DatasetStats, LABEL_CTR, LABEL_CVR};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub delimiter: char,
    pub click_column: String,
    pub conversion_column: String,
    /// Columns starting with this prefix are features; all non-label,
    /// non-excluded columns when `None`.
    pub feature_prefix: Option<String>,
    pub exclude: Vec<String>,
}

impl Layout {
    pub fn aliexpress() -> Self {
        Layout {
            delimiter: ',',
            click_column: "click".into(),
            conversion_column: "conversion".into(),
            feature_prefix: Some("categorical_".into()),
            exclude: vec!["search_id".into()],
        }
    }

    pub fn aliccp() -> Self {
        Layout {
            delimiter: ',',
            click_column: "click".into(),
            conversion_column: "purchase".into(),
            feature_prefix: None,
            exclude: vec!["sample_id".into()],
        }
    }

    /// The canonical tab-separated format.
    pub fn canonical() -> Self {
        Layout {
            delimiter: '\t',
            click_column: LABEL_CTR.into(),
            conversion_column: LABEL_CVR.into(),
            feature_prefix: None,
            exclude: Vec::new(),
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "tsv" => Ok(Layout::canonical()),
            "aliexpress" => Ok(Layout::aliexpress()),
            "aliccp" => Ok(Layout::aliccp()),
            other => Err(Error::Config(format!("unknown adapter layout '{other}'"))),
        }
    }
}

/// Label tallies over one or more files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LabelCounts {
    pub impressions: u64,
    pub clicks: u64,
    pub conversions: u64,
    /// Rows with a conversion but no click.
    pub violations: u64,
}

impl LabelCounts {
    pub fn stats(&self) -> DatasetStats {
        DatasetStats::from_counts(self.impressions, self.clicks, self.conversions)
    }
}

struct Columns {
    click: usize,
    conversion: usize,
    features: Vec<(usize, String)>,
    width: usize,
}

fn resolve(header: &str, layout: &Layout) -> Result<Columns> {
    let names: Vec<&str> = header
        .trim_end_matches('\r')
        .split(layout.delimiter)
        .map(str::trim)
        .collect();
    let find = |n: &str| {
        names
            .iter()
            .position(|c| *c == n)
            .ok_or_else(|| Error::Schema(format!("missing column '{n}'")))
    };
    let click = find(&layout.click_column)?;
    let conversion = find(&layout.conversion_column)?;
    let features = names
        .iter()
        .enumerate()
        .filter(|&(i, n)| {
            i != click
                && i != conversion
                && !layout.exclude.iter().any(|e| e == n)
                && layout
                    .feature_prefix
                    .as_ref()
                    .is_none_or(|p| n.starts_with(p.as_str()))
        })
        .map(|(i, n)| (i, n.to_string()))
        .collect();
    Ok(Columns {
        click,
        conversion,
        features,
        width: names.len(),
    })
}

fn parse_label(cell: &str, row: usize, name: &str) -> Result<u8> {
    match cell.trim().parse::<f64>() {
        Ok(0.0) => Ok(0),
        Ok(1.0) => Ok(1),
        _ => Err(Error::Parse {
            row,
            msg: format!("{name} must be 0 or 1, found '{cell}'"),
        }),
    }
}

fn for_each_row(
    path: &Path,
    layout: &Layout,
    mut visit: impl FnMut(&Columns, &[&str], u8, u8) -> Result<()>,
) -> Result<()> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::with_capacity(1 << 20, file).lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Schema(format!("{} has no header row", path.display())))?
        .map_err(|e| Error::io(path, e))?;
    let cols = resolve(&header, layout)?;
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let row = i + 2;
        let cells: Vec<&str> = line.split(layout.delimiter).collect();
        if cells.len() != cols.width {
            return Err(Error::Parse {
                row,
                msg: format!("expected {} columns, found {}", cols.width, cells.len()),
            });
        }
        let c = parse_label(cells[cols.click], row, &layout.click_column)?;
        let v = parse_label(cells[cols.conversion], row, &layout.conversion_column)?;
        visit(&cols, &cells, c, v)?;
    }
    Ok(())
}

/// Count impressions, clicks and conversions over `paths` (e.g. train + test).
pub fn scan_counts(paths: &[PathBuf], layout: &Layout) -> Result<LabelCounts> {
    let mut counts = LabelCounts::default();
    for path in paths {
        for_each_row(path, layout, |_, _, c, v| {
            counts.impressions += 1;
            counts.clicks += c as u64;
            counts.conversions += v as u64;
            counts.violations += (v == 1 && c == 0) as u64;
            Ok(())
        })?;
    }
    Ok(counts)
}

/// Rewrite a release file as canonical TSV. Returns the number of rows written.
pub fn convert_to_tsv(input: &Path, layout: &Layout, output: &Path) -> Result<usize> {
    let file = std::fs::File::create(output).map_err(|e| Error::io(output, e))?;
    let mut out = BufWriter::new(file);
    let mut rows = 0;
    let mut wrote_header = false;
    let io = |e| Error::io(output, e);
    for_each_row(input, layout, |cols, cells, c, v| {
        if !wrote_header {
            let mut names: Vec<&str> = cols.features.iter().map(|(_, n)| n.as_str()).collect();
            names.extend([LABEL_CTR, LABEL_CVR]);
            writeln!(out, "{}", names.join("\t")).map_err(io)?;
            wrote_header = true;
        }
        for (i, _) in &cols.features {
            write!(out, "{}\t", cells[*i].trim().replace('\t', " ")).map_err(io)?;
        }
        writeln!(out, "{c}\t{v}").map_err(io)?;
        rows += 1;
        Ok(())
    })?;
    out.flush().map_err(io)?;
    Ok(rows)
}
