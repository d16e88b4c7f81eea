use std::io::Read;
use std::path::Path;

use csv::{ReaderBuilder, Trim};

use super::schema::{ColumnKind, DataSchema};
use crate::error::{Error, Result};

/// Validated string cells, one row per kept record.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RawDataset {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
    /// Rows dropped because a cell held the missing token.
    pub dropped_missing: usize,
    /// Rows dropped because the sensitive value is outside the schema's groups.
    pub dropped_other_group: usize,
}

impl RawDataset {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Records read from the source, kept or dropped.
    pub fn rows_read(&self) -> usize {
        self.rows.len() + self.dropped_missing + self.dropped_other_group
    }
}

pub fn load_csv_dataset(path: impl AsRef<Path>, schema: &DataSchema) -> Result<RawDataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv_dataset(file, schema)
}

/// Reads comma-separated records. Cells are trimmed; lines starting with `|`
/// are comments. Reported row numbers are 1-based source line numbers.
pub fn read_csv_dataset<R: Read>(input: R, schema: &DataSchema) -> Result<RawDataset> {
    schema.validate()?;
    let mut reader = ReaderBuilder::new()
        .has_headers(schema.has_header)
        .trim(Trim::All)
        .comment(Some(b'|'))
        .flexible(true)
        .from_reader(input);

    let expected = schema.names();
    if schema.has_header {
        let header: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
        if header != expected {
            return Err(Error::Schema(format!(
                "header {header:?} does not match schema columns {expected:?}"
            )));
        }
    }

    let sensitive = schema.sensitive_index();
    let mut out = RawDataset {
        columns: expected,
        ..RawDataset::default()
    };
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() == 1 && record.get(0) == Some("") {
            continue;
        }
        if record.len() != schema.columns.len() {
            return Err(Error::Row {
                row: line,
                message: format!("expected {} fields, found {}", schema.columns.len(), record.len()),
            });
        }
        if schema.drop_missing && record.iter().any(|c| c == schema.missing_token) {
            out.dropped_missing += 1;
            continue;
        }
        if schema.group_id(&record[sensitive]).is_none() {
            out.dropped_other_group += 1;
            continue;
        }
        for (cell, spec) in record.iter().zip(&schema.columns) {
            match spec.kind {
                ColumnKind::Categorical | ColumnKind::Label => {
                    if !spec.values.is_empty() && !spec.values.iter().any(|v| v == cell) {
                        return Err(Error::Row {
                            row: line,
                            message: format!("unknown value `{cell}` in column `{}`", spec.name),
                        });
                    }
                }
                ColumnKind::Continuous => {
                    let v: f64 = cell.parse().map_err(|_| Error::Row {
                        row: line,
                        message: format!("`{cell}` in column `{}` is not a number", spec.name),
                    })?;
                    if !v.is_finite() {
                        return Err(Error::Row {
                            row: line,
                            message: format!("non-finite value in column `{}`", spec.name),
                        });
                    }
                }
                ColumnKind::Sensitive | ColumnKind::Ignore => {}
            }
        }
        out.rows.push(record.iter().map(str::to_owned).collect());
    }
    if out.dropped_missing + out.dropped_other_group > 0 {
        log::info!(
            "dropped {} rows with missing cells and {} rows outside the sensitive groups",
            out.dropped_missing,
            out.dropped_other_group
        );
    }
    Ok(out)
}
