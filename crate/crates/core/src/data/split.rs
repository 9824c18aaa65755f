//! Seeded, stratified row assignment: train/test split, k-fold, and client partitioning.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::table::RecordTable;
use crate::error::{Error, Result};

/// Row indices of each class, each list shuffled with `rng`.
fn shuffled_classes(table: &RecordTable, rng: &mut ChaCha8Rng) -> Result<[Vec<usize>; 2]> {
    let labels = table.binary_labels()?;
    let mut classes = [Vec::new(), Vec::new()];
    for (i, y) in labels.into_iter().enumerate() {
        classes[usize::from(y)].push(i);
    }
    for c in &mut classes {
        c.shuffle(rng);
    }
    Ok(classes)
}

/// Stratified split; test takes round(test_frac * n_c) rows of each class,
/// clamped so both sides keep at least one row per class.
pub fn split_indices(
    table: &RecordTable,
    test_frac: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(test_frac > 0.0 && test_frac < 1.0) {
        return Err(Error::Config(format!(
            "test fraction {test_frac} must be in (0, 1)"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = shuffled_classes(table, &mut rng)?;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (label, rows) in classes.iter().enumerate() {
        if rows.len() < 2 {
            return Err(Error::Validation(format!(
                "class {label} has {} examples; stratified split needs at least 2",
                rows.len()
            )));
        }
        let n_test = ((rows.len() as f64 * test_frac).round() as usize).clamp(1, rows.len() - 1);
        test.extend_from_slice(&rows[..n_test]);
        train.extend_from_slice(&rows[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

pub fn split_train_test(
    table: &RecordTable,
    test_frac: f64,
    seed: u64,
) -> Result<(RecordTable, RecordTable)> {
    let (train, test) = split_indices(table, test_frac, seed)?;
    Ok((table.select(&train), table.select(&test)))
}

/// Assigns every row a fold in `0..k`, dealing each class round-robin and
/// carrying the position across classes so fold sizes differ by at most one.
fn deal(classes: &[Vec<usize>; 2], k: usize) -> Vec<Vec<usize>> {
    let mut folds = vec![Vec::new(); k];
    let mut pos = 0;
    for rows in classes {
        for &r in rows {
            folds[pos % k].push(r);
            pos += 1;
        }
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    folds
}

/// `(train, validation)` row indices for each fold.
pub fn kfold_indices(
    table: &RecordTable,
    k: usize,
    seed: u64,
) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if k < 2 {
        return Err(Error::Config(format!("k = {k}; k-fold needs k >= 2")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = shuffled_classes(table, &mut rng)?;
    for (label, rows) in classes.iter().enumerate() {
        if rows.len() < k {
            return Err(Error::Validation(format!(
                "class {label} has {} examples, fewer than k = {k}",
                rows.len()
            )));
        }
    }
    let folds = deal(&classes, k);
    Ok((0..k)
        .map(|v| {
            let mut train: Vec<usize> = folds
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != v)
                .flat_map(|(_, f)| f.iter().copied())
                .collect();
            train.sort_unstable();
            (train, folds[v].clone())
        })
        .collect())
}

pub fn kfold(table: &RecordTable, k: usize, seed: u64) -> Result<Vec<(RecordTable, RecordTable)>> {
    Ok(kfold_indices(table, k, seed)?
        .into_iter()
        .map(|(tr, va)| (table.select(&tr), table.select(&va)))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartitionStrategy {
    Iid,
    BySite,
}

impl std::str::FromStr for PartitionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "iid" => Ok(Self::Iid),
            "by_site" | "by-site" => Ok(Self::BySite),
            _ => Err(Error::Config(format!("unknown partition strategy `{s}`"))),
        }
    }
}

pub fn partition_indices(
    table: &RecordTable,
    n_clients: usize,
    strategy: PartitionStrategy,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if n_clients == 0 {
        return Err(Error::Config("need at least one client".into()));
    }
    if n_clients > table.len() {
        return Err(Error::Validation(format!(
            "{n_clients} clients but only {} rows",
            table.len()
        )));
    }
    match strategy {
        PartitionStrategy::Iid => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let classes = shuffled_classes(table, &mut rng)?;
            Ok(deal(&classes, n_clients))
        }
        PartitionStrategy::BySite => {
            let mut sites: Vec<String> = Vec::new();
            let mut shards: Vec<Vec<usize>> = Vec::new();
            for (i, r) in table.rows.iter().enumerate() {
                let site = r.site.as_deref().ok_or_else(|| {
                    Error::Validation(format!(
                        "row {i} has no site tag; by_site needs site-tagged rows"
                    ))
                })?;
                match sites.iter().position(|s| s == site) {
                    Some(p) => shards[p].push(i),
                    None => {
                        sites.push(site.to_string());
                        shards.push(vec![i]);
                    }
                }
            }
            if shards.len() != n_clients {
                return Err(Error::Config(format!(
                    "by_site found {} sites but {n_clients} clients were requested",
                    shards.len()
                )));
            }
            Ok(shards)
        }
    }
}

pub fn partition_clients(
    table: &RecordTable,
    n_clients: usize,
    strategy: PartitionStrategy,
    seed: u64,
) -> Result<Vec<RecordTable>> {
    Ok(partition_indices(table, n_clients, strategy, seed)?
        .iter()
        .map(|idx| table.select(idx))
        .collect())
}
