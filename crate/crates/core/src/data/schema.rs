use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum ColumnKind {
    Numeric,
    /// Sorted, non-empty set of admissible codes.
    Categorical(Vec<f64>),
    Binary,
    Target,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColumnSchema {
    pub name: String,
    pub kind: ColumnKind,
    pub missing_marker: String,
}

impl ColumnSchema {
    pub fn new(name: &str, kind: ColumnKind) -> Self {
        let kind = match kind {
            ColumnKind::Categorical(mut levels) => {
                levels.sort_by(f64::total_cmp);
                levels.dedup();
                ColumnKind::Categorical(levels)
            }
            k => k,
        };
        Self {
            name: name.to_string(),
            kind,
            missing_marker: "?".to_string(),
        }
    }

    pub fn is_categorical(&self) -> bool {
        matches!(self.kind, ColumnKind::Categorical(_))
    }
}

/// Validated list of columns with exactly one target.
#[derive(Debug, Clone, PartialEq)]
pub struct Schema {
    columns: Vec<ColumnSchema>,
    target: usize,
}

impl Schema {
    pub fn new(columns: Vec<ColumnSchema>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for c in &columns {
            if !seen.insert(c.name.as_str()) {
                return Err(Error::Validation(format!(
                    "duplicate column name `{}`",
                    c.name
                )));
            }
            if let ColumnKind::Categorical(levels) = &c.kind {
                if levels.is_empty() {
                    return Err(Error::Validation(format!(
                        "categorical column `{}` has an empty level set",
                        c.name
                    )));
                }
            }
        }
        let targets: Vec<usize> = columns
            .iter()
            .enumerate()
            .filter(|(_, c)| c.kind == ColumnKind::Target)
            .map(|(i, _)| i)
            .collect();
        if targets.len() != 1 {
            return Err(Error::Validation(format!(
                "schema must have exactly one target column, found {}",
                targets.len()
            )));
        }
        Ok(Self {
            columns,
            target: targets[0],
        })
    }

    /// The 14-column processed heart-disease layout.
    pub fn heart_disease() -> Self {
        use ColumnKind::*;
        let cat = |levels: &[f64]| Categorical(levels.to_vec());
        Self::new(vec![
            ColumnSchema::new("age", Numeric),
            ColumnSchema::new("sex", Binary),
            ColumnSchema::new("cp", cat(&[1.0, 2.0, 3.0, 4.0])),
            ColumnSchema::new("trestbps", Numeric),
            ColumnSchema::new("chol", Numeric),
            ColumnSchema::new("fbs", Binary),
            ColumnSchema::new("restecg", cat(&[0.0, 1.0, 2.0])),
            ColumnSchema::new("thalach", Numeric),
            ColumnSchema::new("exang", Binary),
            ColumnSchema::new("oldpeak", Numeric),
            ColumnSchema::new("slope", cat(&[1.0, 2.0, 3.0])),
            ColumnSchema::new("ca", cat(&[0.0, 1.0, 2.0, 3.0])),
            ColumnSchema::new("thal", cat(&[3.0, 6.0, 7.0])),
            ColumnSchema::new("num", Target),
        ])
        .expect("static schema is valid")
    }

    pub fn columns(&self) -> &[ColumnSchema] {
        &self.columns
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn target_index(&self) -> usize {
        self.target
    }

    pub fn names(&self) -> Vec<&str> {
        self.columns.iter().map(|c| c.name.as_str()).collect()
    }

    /// Feature count after one-hot encoding (target excluded).
    pub fn encoded_width(&self) -> usize {
        self.columns
            .iter()
            .map(|c| match &c.kind {
                ColumnKind::Categorical(levels) => levels.len(),
                ColumnKind::Target => 0,
                _ => 1,
            })
            .sum()
    }

    /// Names of columns that differ between two schemas (by position).
    pub fn diff(&self, other: &Schema) -> Vec<String> {
        let n = self.len().max(other.len());
        (0..n)
            .filter_map(|i| match (self.columns.get(i), other.columns.get(i)) {
                (Some(a), Some(b)) if a == b => None,
                (Some(a), _) => Some(a.name.clone()),
                (None, Some(b)) => Some(b.name.clone()),
                (None, None) => None,
            })
            .collect()
    }
}
