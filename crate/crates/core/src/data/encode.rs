use serde::{Deserialize, Serialize};

use super::csv_io::RawDataset;
use super::schema::{ColumnKind, DataSchema};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

/// Encoded rows: features, binary labels and sensitive-group ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub features: Matrix<T>,
    pub labels: Vec<u8>,
    pub groups: Vec<usize>,
    pub n_groups: usize,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(features: Matrix<T>, labels: Vec<u8>, groups: Vec<usize>, n_groups: usize) -> Result<Self> {
        if features.rows() != labels.len() || labels.len() != groups.len() {
            return Err(Error::Shape(format!(
                "{} feature rows, {} labels, {} group ids",
                features.rows(),
                labels.len(),
                groups.len()
            )));
        }
        if let Some(&y) = labels.iter().find(|&&y| y > 1) {
            return Err(Error::InvalidArgument(format!("label {y} is not binary")));
        }
        if let Some(&a) = groups.iter().find(|&&a| a >= n_groups) {
            return Err(Error::InvalidArgument(format!("group id {a} >= group count {n_groups}")));
        }
        Ok(Self {
            features,
            labels,
            groups,
            n_groups,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.features.cols()
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            groups: idx.iter().map(|&i| self.groups[i]).collect(),
            n_groups: self.n_groups,
        }
    }

    pub fn positive_rate(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.labels.iter().filter(|&&y| y == 1).count() as f64 / self.len() as f64
    }

    pub fn group_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.n_groups];
        for &a in &self.groups {
            c[a] += 1;
        }
        c
    }

    pub fn cast<U: Scalar>(&self) -> Dataset<U> {
        Dataset {
            features: self.features.cast(),
            labels: self.labels.clone(),
            groups: self.groups.clone(),
            n_groups: self.n_groups,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum ColumnEncoding {
    Continuous { column: usize, min: f64, max: f64 },
    OneHot { column: usize, values: Vec<String> },
}

/// Feature encoder fitted on training rows. Encoding other splits reuses the
/// training statistics, so test rows may scale outside `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    schema: DataSchema,
    encodings: Vec<ColumnEncoding>,
    feature_names: Vec<String>,
}

impl Encoder {
    pub fn fit(raw: &RawDataset, schema: &DataSchema) -> Result<Self> {
        schema.validate()?;
        check_columns(raw, schema)?;
        let mut encodings = Vec::new();
        let mut feature_names = Vec::new();
        for (j, spec) in schema.columns.iter().enumerate() {
            match spec.kind {
                ColumnKind::Continuous => {
                    let mut min = f64::INFINITY;
                    let mut max = f64::NEG_INFINITY;
                    for row in &raw.rows {
                        let v = parse_cell(&row[j], &spec.name)?;
                        min = min.min(v);
                        max = max.max(v);
                    }
                    if raw.rows.is_empty() {
                        min = 0.0;
                        max = 0.0;
                    }
                    if min == max {
                        log::warn!("continuous column `{}` is constant; emitting 0.0", spec.name);
                    }
                    encodings.push(ColumnEncoding::Continuous { column: j, min, max });
                    feature_names.push(spec.name.clone());
                }
                ColumnKind::Categorical => {
                    encodings.push(ColumnEncoding::OneHot {
                        column: j,
                        values: spec.values.clone(),
                    });
                    feature_names.extend(spec.values.iter().map(|v| format!("{}={v}", spec.name)));
                }
                _ => {}
            }
        }
        Ok(Self {
            schema: schema.clone(),
            encodings,
            feature_names,
        })
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    /// Names of continuous columns whose training range is degenerate.
    pub fn constant_columns(&self) -> Vec<String> {
        self.encodings
            .iter()
            .filter_map(|e| match e {
                ColumnEncoding::Continuous { column, min, max } if min == max => {
                    Some(self.schema.columns[*column].name.clone())
                }
                _ => None,
            })
            .collect()
    }

    pub fn encode<T: Scalar>(&self, raw: &RawDataset) -> Result<Dataset<T>> {
        check_columns(raw, &self.schema)?;
        let label_col = self.schema.label_index();
        let sens_col = self.schema.sensitive_index();
        let width = self.n_features();
        let mut data = Vec::with_capacity(raw.len() * width);
        let mut labels = Vec::with_capacity(raw.len());
        let mut groups = Vec::with_capacity(raw.len());
        for (r, row) in raw.rows.iter().enumerate() {
            for enc in &self.encodings {
                match enc {
                    ColumnEncoding::Continuous { column, min, max } => {
                        let v = parse_cell(&row[*column], &self.schema.columns[*column].name)?;
                        let scaled = if max > min { (v - min) / (max - min) } else { 0.0 };
                        data.push(T::lit(scaled));
                    }
                    ColumnEncoding::OneHot { column, values } => {
                        let cell = &row[*column];
                        let hit = values.iter().position(|v| v == cell).ok_or_else(|| Error::Row {
                            row: r + 1,
                            message: format!(
                                "unknown value `{cell}` in column `{}`",
                                self.schema.columns[*column].name
                            ),
                        })?;
                        data.extend((0..values.len()).map(|k| if k == hit { T::one() } else { T::zero() }));
                    }
                }
            }
            labels.push(u8::from(self.schema.positive_label.iter().any(|p| *p == row[label_col])));
            let g = self.schema.group_id(&row[sens_col]).ok_or_else(|| Error::Row {
                row: r + 1,
                message: format!("sensitive value `{}` maps to no group", row[sens_col]),
            })?;
            groups.push(g);
        }
        Dataset::new(Matrix::from_vec(raw.len(), width, data)?, labels, groups, self.schema.n_groups())
    }
}

/// Fits on `raw` and encodes it.
pub fn encode_features<T: Scalar>(raw: &RawDataset, schema: &DataSchema) -> Result<(Dataset<T>, Encoder)> {
    let encoder = Encoder::fit(raw, schema)?;
    let data = encoder.encode(raw)?;
    Ok((data, encoder))
}

fn check_columns(raw: &RawDataset, schema: &DataSchema) -> Result<()> {
    if raw.columns != schema.names() {
        return Err(Error::Schema(format!(
            "dataset columns {:?} do not match schema {:?}",
            raw.columns,
            schema.names()
        )));
    }
    Ok(())
}

fn parse_cell(cell: &str, column: &str) -> Result<f64> {
    cell.parse()
        .map_err(|_| Error::Schema(format!("`{cell}` in column `{column}` is not a number")))
}
