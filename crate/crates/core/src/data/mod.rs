//! Heart-disease ingestion: parsing, cleaning, encoding, standardization, and
//! seeded row assignment for splits, folds, and federated clients.

mod encode;
mod schema;
mod split;
mod table;

use std::path::{Path, PathBuf};

pub use encode::{
    apply_standardize, encode_features, fit_standardize, FeatureKind, FeatureMatrix, LabelVector,
    ScalerParams,
};
pub use schema::{ColumnKind, ColumnSchema, Schema};
pub use split::{
    kfold, kfold_indices, partition_clients, partition_indices, split_indices, split_train_test,
    PartitionStrategy,
};
pub use table::{
    binarize_target, concat_sites, impute_missing, integrate, load_csv, parse_csv, to_csv_string,
    write_csv, Cell, ImputeStats, Record, RecordTable, SourceTag,
};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Cleveland,
    Uci,
    Integrated,
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cleveland" => Ok(Self::Cleveland),
            "uci" => Ok(Self::Uci),
            "integrated" => Ok(Self::Integrated),
            _ => Err(Error::Config(format!("unknown dataset `{s}`"))),
        }
    }
}

impl std::fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Cleveland => "cleveland",
            Self::Uci => "uci",
            Self::Integrated => "integrated",
        })
    }
}

fn site_tag(path: &Path) -> SourceTag {
    let stem = path
        .file_name()
        .and_then(|s| s.to_str())
        .unwrap_or("site")
        .trim_start_matches("processed.")
        .trim_end_matches(".data")
        .trim_end_matches(".csv")
        .to_string();
    if stem == "cleveland" {
        SourceTag::Cleveland
    } else {
        SourceTag::UciSite(stem)
    }
}

/// Loads one dataset identity from user-supplied files and binarizes the target.
///
/// * `cleveland`: exactly one file.
/// * `uci`: one file per site, concatenated with site labels.
/// * `integrated`: all files unioned with exact-duplicate removal.
pub fn load_dataset(kind: DatasetKind, inputs: &[PathBuf]) -> Result<RecordTable> {
    if inputs.is_empty() {
        return Err(Error::Config("no input files given".into()));
    }
    let schema = Schema::heart_disease();
    let table = match kind {
        DatasetKind::Cleveland => {
            if inputs.len() != 1 {
                return Err(Error::Config(format!(
                    "cleveland takes exactly one input file, got {}",
                    inputs.len()
                )));
            }
            load_csv(&inputs[0], &schema, SourceTag::Cleveland)?
        }
        DatasetKind::Uci | DatasetKind::Integrated => {
            let tables = inputs
                .iter()
                .map(|p| load_csv(p, &schema, site_tag(p)))
                .collect::<Result<Vec<_>>>()?;
            if kind == DatasetKind::Uci {
                concat_sites(&tables)?
            } else {
                integrate(&tables)?
            }
        }
    };
    binarize_target(&table)
}

/// Model-ready train/test matrices. Imputation and scaling statistics come
/// from the training rows only.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub x_train: FeatureMatrix,
    pub y_train: LabelVector,
    pub x_test: FeatureMatrix,
    pub y_test: LabelVector,
    pub scaler: ScalerParams,
}

pub fn prepare(train: &RecordTable, test: &RecordTable) -> Result<Prepared> {
    let stats = ImputeStats::fit(train)?;
    let (x_train, y_train) = encode_features(&stats.apply(train)?)?;
    let (x_test, y_test) = encode_features(&stats.apply(test)?)?;
    let scaler = fit_standardize(&x_train);
    Ok(Prepared {
        x_train: apply_standardize(&x_train, &scaler),
        y_train,
        x_test: apply_standardize(&x_test, &scaler),
        y_test,
        scaler,
    })
}

/// Prepares a single table against its own statistics (a client's local shard).
pub fn prepare_local(table: &RecordTable) -> Result<(FeatureMatrix, LabelVector)> {
    let p = prepare(table, table)?;
    Ok((p.x_train, p.y_train))
}
