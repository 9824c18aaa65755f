use super::schema::ColumnKind;
use super::table::RecordTable;
use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    /// Standardized numeric passthrough.
    Numeric,
    Binary,
    /// One-hot indicator of a categorical level.
    Indicator,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub values: Matrix,
    pub names: Vec<String>,
    pub kinds: Vec<FeatureKind>,
}

impl FeatureMatrix {
    pub fn rows(&self) -> usize {
        self.values.rows()
    }

    pub fn cols(&self) -> usize {
        self.values.cols()
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        Self {
            values: self.values.select_rows(idx),
            names: self.names.clone(),
            kinds: self.kinds.clone(),
        }
    }
}

/// Binary targets, one per example.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVector(pub Vec<u8>);

impl LabelVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&y| f64::from(y)).collect()
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self(idx.iter().map(|&i| self.0[i]).collect())
    }
}

fn level_label(v: f64) -> String {
    if v.fract() == 0.0 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

/// One-hot encodes categorical columns (levels in sorted order) and passes the
/// rest through in schema order. The table must be imputed and binarized.
pub fn encode_features(table: &RecordTable) -> Result<(FeatureMatrix, LabelVector)> {
    let schema = &table.schema;
    let mut names = Vec::new();
    let mut kinds = Vec::new();
    for col in schema.columns() {
        match &col.kind {
            ColumnKind::Numeric => {
                names.push(col.name.clone());
                kinds.push(FeatureKind::Numeric);
            }
            ColumnKind::Binary => {
                names.push(col.name.clone());
                kinds.push(FeatureKind::Binary);
            }
            ColumnKind::Categorical(levels) => {
                for &l in levels {
                    names.push(format!("{}={}", col.name, level_label(l)));
                    kinds.push(FeatureKind::Indicator);
                }
            }
            ColumnKind::Target => {}
        }
    }

    let mut values = Matrix::zeros(table.len(), names.len());
    for (i, rec) in table.rows.iter().enumerate() {
        let out = values.row_mut(i);
        let mut j = 0;
        for (cell, col) in rec.cells.iter().zip(schema.columns()) {
            if col.kind == ColumnKind::Target {
                continue;
            }
            let v = cell.ok_or_else(|| {
                Error::Validation(format!(
                    "row {i}: column `{}` is missing; impute first",
                    col.name
                ))
            })?;
            match &col.kind {
                ColumnKind::Categorical(levels) => {
                    let pos = levels.iter().position(|&l| l == v).ok_or_else(|| {
                        Error::Validation(format!(
                            "row {i}: value {v} is not a declared level of `{}`",
                            col.name
                        ))
                    })?;
                    out[j + pos] = 1.0;
                    j += levels.len();
                }
                _ => {
                    out[j] = v;
                    j += 1;
                }
            }
        }
    }
    let labels = LabelVector(table.binary_labels()?);
    Ok((
        FeatureMatrix {
            values,
            names,
            kinds,
        },
        labels,
    ))
}

/// Mean and population standard deviation of each numeric feature.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalerParams {
    /// (feature column, mean, std) with std > 0.
    pub columns: Vec<(usize, f64, f64)>,
}

/// Fits on numeric columns only; a constant column gets std = 1.
pub fn fit_standardize(train: &FeatureMatrix) -> ScalerParams {
    let n = train.rows() as f64;
    let columns = train
        .kinds
        .iter()
        .enumerate()
        .filter(|(_, k)| **k == FeatureKind::Numeric)
        .map(|(c, _)| {
            if train.rows() == 0 {
                return (c, 0.0, 1.0);
            }
            let mean = train.values.column(c).sum::<f64>() / n;
            let var = train
                .values
                .column(c)
                .map(|x| (x - mean).powi(2))
                .sum::<f64>()
                / n;
            let std = var.sqrt();
            (c, mean, if std > 0.0 { std } else { 1.0 })
        })
        .collect();
    ScalerParams { columns }
}

pub fn apply_standardize(m: &FeatureMatrix, s: &ScalerParams) -> FeatureMatrix {
    let mut out = m.clone();
    for r in 0..out.rows() {
        let row = out.values.row_mut(r);
        for &(c, mean, std) in &s.columns {
            row[c] = (row[c] - mean) / std;
        }
    }
    out
}
