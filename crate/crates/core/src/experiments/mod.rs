//! Experiment harness: single runs, sweeps over ε / epochs / optimizer, grid
//! search with k-fold scoring, the logistic-regression baseline, and CSV output.

mod config;
mod csv;

use std::time::Instant;

use rayon::prelude::*;

pub use config::{ExperimentConfig, ModelKind, RunMode, CLEVELAND_FILE, OTHER_SITES_FILE};
pub use csv::{
    emit_csv, format_g, ledger_csv, trajectory_csv, write_text, TrajectoryRow, LEDGER_HEADER,
    TRAJECTORY_HEADER,
};

use crate::data::{
    self, kfold, partition_indices, prepare, split_train_test, Prepared, RecordTable,
};
use crate::dp::{make_private, PrivacyLedger};
use crate::error::{Error, Result};
use crate::federation::{simulate, ClientRunner, FedConfig, Hyperparams, Metrics};
use crate::nn::{self, ModelParams};
use crate::optim::OptimizerKind;
use crate::train::LocalTrainer;

/// Reference accuracy of the differentially private logistic baseline.
pub const LOGREG_REFERENCE_ACCURACY: f64 = 0.47;

#[derive(Debug, Clone)]
pub struct RunResult {
    pub run_id: String,
    pub seed: u64,
    pub rows: Vec<TrajectoryRow>,
    /// Largest per-holder noise multiplier, when private.
    pub noise_multiplier: Option<f64>,
    pub params: ModelParams,
    /// Step ledger of a centralized private run.
    pub ledger: Option<PrivacyLedger>,
}

impl RunResult {
    pub fn last(&self) -> &TrajectoryRow {
        self.rows.last().expect("a run has at least one epoch")
    }

    pub fn final_test_acc(&self) -> f64 {
        self.last().test_acc
    }

    pub fn final_epsilon(&self) -> Option<f64> {
        self.last().spent_epsilon
    }
}

pub fn load_table(cfg: &ExperimentConfig) -> Result<RecordTable> {
    data::load_dataset(cfg.dataset, &cfg.input_paths())
}

pub fn layer_sizes(cfg: &ExperimentConfig, input_dim: usize) -> Vec<usize> {
    let mut sizes = vec![input_dim];
    if cfg.model == ModelKind::Mlp {
        sizes.extend(&cfg.hidden);
    }
    sizes.push(1);
    sizes
}

/// One run on the seed's stratified train/test split.
pub fn run_seed(cfg: &ExperimentConfig, table: &RecordTable, seed: u64) -> Result<RunResult> {
    let (train, test) = split_train_test(table, cfg.test_frac, seed)?;
    run_split(cfg, &train, &test, seed)
}

fn run_split(
    cfg: &ExperimentConfig,
    train: &RecordTable,
    test: &RecordTable,
    seed: u64,
) -> Result<RunResult> {
    cfg.validate()?;
    let prep = prepare(train, test)?;
    match cfg.mode {
        RunMode::Centralized => run_centralized(cfg, &prep, seed),
        RunMode::Federated { clients } => run_federated(cfg, train, &prep, clients, seed),
    }
}

fn evaluate_both(params: &ModelParams, prep: &Prepared) -> Result<[f64; 4]> {
    let (train_loss, train_acc) = nn::evaluate(params, &prep.x_train.values, &prep.y_train.0)?;
    let (test_loss, test_acc) = nn::evaluate(params, &prep.x_test.values, &prep.y_test.0)?;
    Ok([train_loss, test_loss, train_acc, test_acc])
}

fn elapsed_ms(cfg: &ExperimentConfig, start: Instant) -> u64 {
    if cfg.timing {
        start.elapsed().as_millis() as u64
    } else {
        0
    }
}

fn run_centralized(cfg: &ExperimentConfig, prep: &Prepared, seed: u64) -> Result<RunResult> {
    let start = Instant::now();
    let n = prep.x_train.rows();
    let dp = match &cfg.privacy {
        Some(spec) => Some(make_private(spec, n, cfg.train.batch_size, cfg.epochs)?),
        None => None,
    };
    let params = nn::init_model(&layer_sizes(cfg, prep.x_train.cols()), seed)?;
    let mut trainer = LocalTrainer::new(params, cfg.train, dp, seed)?;
    let y = prep.y_train.as_f64();
    let mut rows = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        trainer.train_epoch(&prep.x_train.values, &y)?;
        let [train_loss, test_loss, train_acc, test_acc] = evaluate_both(&trainer.params, prep)?;
        rows.push(TrajectoryRow {
            run_id: cfg.run_id.clone(),
            seed,
            epoch,
            spent_epsilon: trainer.spent_epsilon()?,
            train_loss,
            test_loss,
            train_acc,
            test_acc,
            wall_ms: elapsed_ms(cfg, start),
        });
    }
    Ok(RunResult {
        run_id: cfg.run_id.clone(),
        seed,
        rows,
        noise_multiplier: dp.map(|d| d.noise_multiplier),
        ledger: dp.map(|_| trainer.ledger.clone()),
        params: trainer.params,
    })
}

fn run_federated(
    cfg: &ExperimentConfig,
    train: &RecordTable,
    prep: &Prepared,
    k: usize,
    seed: u64,
) -> Result<RunResult> {
    let start = Instant::now();
    let shards = partition_indices(train, k, cfg.partition, seed)?;
    let rounds = u32::try_from(cfg.epochs).map_err(|_| Error::Config("too many rounds".into()))?;
    let hyper = Hyperparams {
        local_epochs: cfg.local_epochs,
        total_rounds: rounds,
        train: cfg.train,
        privacy: cfg.privacy,
    };
    let mut sigma: Option<f64> = None;
    let mut clients = Vec::with_capacity(k);
    for (i, idx) in shards.iter().enumerate() {
        if let Some(spec) = &cfg.privacy {
            let local = cfg.local_epochs as usize * cfg.epochs;
            let s = make_private(spec, idx.len(), cfg.train.batch_size, local)?.noise_multiplier;
            sigma = Some(sigma.map_or(s, |m| m.max(s)));
        }
        clients.push(ClientRunner::new(
            i as u32,
            prep.x_train.values.select_rows(idx),
            prep.y_train.select(idx).0,
            seed.wrapping_add(i as u64),
        )?);
    }
    let fed = FedConfig {
        clients: k,
        layer_sizes: layer_sizes(cfg, prep.x_train.cols()),
        init_seed: seed,
        hyper,
    };
    let evaluator = |p: &ModelParams| -> Result<Metrics> {
        let [train_loss, test_loss, train_acc, test_acc] = evaluate_both(p, prep)?;
        Ok(Metrics::new()
            .with("train_loss", train_loss)
            .with("test_loss", test_loss)
            .with("train_acc", train_acc)
            .with("test_acc", test_acc)
            .with("wall_ms", elapsed_ms(cfg, start) as f64))
    };
    let (outcome, _) = simulate(&fed, clients, Some(&evaluator))?;
    let rows = outcome
        .log
        .iter()
        .map(|r| {
            let g = |k: &str| r.global.get(k).expect("evaluator sets every key");
            TrajectoryRow {
                run_id: cfg.run_id.clone(),
                seed,
                epoch: r.round as usize,
                spent_epsilon: r.spent_epsilon,
                train_loss: g("train_loss"),
                test_loss: g("test_loss"),
                train_acc: g("train_acc"),
                test_acc: g("test_acc"),
                wall_ms: g("wall_ms") as u64,
            }
        })
        .collect();
    Ok(RunResult {
        run_id: cfg.run_id.clone(),
        seed,
        rows,
        noise_multiplier: sigma,
        params: outcome.global,
        ledger: None,
    })
}

/// One run per configured seed, in seed order.
pub fn run_all(cfg: &ExperimentConfig, table: &RecordTable) -> Result<Vec<RunResult>> {
    cfg.seeds
        .par_iter()
        .map(|&s| run_seed(cfg, table, s))
        .collect()
}

pub fn run_training(cfg: &ExperimentConfig) -> Result<Vec<TrajectoryRow>> {
    let table = load_table(cfg)?;
    Ok(run_all(cfg, &table)?
        .into_iter()
        .flat_map(|r| r.rows)
        .collect())
}

/// Runs every (variant, seed) pair in parallel; results grouped per variant.
fn run_variants(variants: &[ExperimentConfig], table: &RecordTable) -> Result<Vec<Vec<RunResult>>> {
    let jobs: Vec<(usize, u64)> = variants
        .iter()
        .enumerate()
        .flat_map(|(i, v)| v.seeds.iter().map(move |&s| (i, s)))
        .collect();
    let results: Vec<(usize, RunResult)> = jobs
        .par_iter()
        .map(|&(i, s)| run_seed(&variants[i], table, s).map(|r| (i, r)))
        .collect::<Result<_>>()?;
    let mut grouped: Vec<Vec<RunResult>> = variants.iter().map(|_| Vec::new()).collect();
    for (i, r) in results {
        grouped[i].push(r);
    }
    Ok(grouped)
}

#[derive(Debug, Clone)]
pub struct SweepGroup {
    /// Swept value (target ε or epoch count).
    pub value: f64,
    pub runs: Vec<RunResult>,
}

impl SweepGroup {
    pub fn mean_final_test_acc(&self) -> f64 {
        mean(
            &self
                .runs
                .iter()
                .map(RunResult::final_test_acc)
                .collect::<Vec<_>>(),
        )
    }
}

pub fn rows_of(groups: &[SweepGroup]) -> Vec<TrajectoryRow> {
    groups
        .iter()
        .flat_map(|g| g.runs.iter().flat_map(|r| r.rows.clone()))
        .collect()
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

/// One group per target ε, all on the same per-seed splits.
pub fn sweep_epsilon(
    cfg: &ExperimentConfig,
    table: &RecordTable,
    targets: &[f64],
) -> Result<Vec<SweepGroup>> {
    if let Some(t) = targets.iter().find(|t| !(**t > 0.0)) {
        return Err(Error::Config(format!(
            "target epsilon {t} must be positive"
        )));
    }
    let variants: Vec<ExperimentConfig> = targets
        .iter()
        .map(|&t| {
            let mut c = cfg.with_target(t);
            c.run_id = format!("{}_eps{}", cfg.run_id, t);
            c
        })
        .collect();
    let groups: Vec<SweepGroup> = run_variants(&variants, table)?
        .into_iter()
        .zip(targets)
        .map(|(runs, &value)| SweepGroup { value, runs })
        .collect();

    // Distinct targets at a fixed step budget must calibrate to distinct σ.
    let mut by_target: Vec<&SweepGroup> = groups.iter().collect();
    by_target.sort_by(|a, b| a.value.total_cmp(&b.value));
    for pair in by_target.windows(2) {
        if pair[0].value == pair[1].value {
            continue;
        }
        for (a, b) in pair[0].runs.iter().zip(&pair[1].runs) {
            if !(a.noise_multiplier > b.noise_multiplier) {
                return Err(Error::Calibration(format!(
                    "targets {} and {} did not give strictly decreasing noise ({:?} vs {:?})",
                    pair[0].value, pair[1].value, a.noise_multiplier, b.noise_multiplier
                )));
            }
        }
    }
    Ok(groups)
}

/// One group per epoch budget; σ is recalibrated for each.
pub fn sweep_epochs(
    cfg: &ExperimentConfig,
    table: &RecordTable,
    counts: &[usize],
) -> Result<Vec<SweepGroup>> {
    let variants: Vec<ExperimentConfig> = counts
        .iter()
        .map(|&e| {
            let mut c = cfg.clone();
            c.epochs = e;
            c.run_id = format!("{}_epochs{}", cfg.run_id, e);
            c
        })
        .collect();
    Ok(run_variants(&variants, table)?
        .into_iter()
        .zip(counts)
        .map(|(runs, &e)| SweepGroup {
            value: e as f64,
            runs,
        })
        .collect())
}

/// Identical data, seeds and privacy for both members; returns (adam, sgd).
pub fn compare_optimizers(
    cfg: &ExperimentConfig,
    table: &RecordTable,
) -> Result<(Vec<RunResult>, Vec<RunResult>)> {
    let variants: Vec<ExperimentConfig> = [OptimizerKind::Adam, OptimizerKind::Sgd]
        .into_iter()
        .map(|o| {
            let mut c = cfg.clone();
            c.train.optimizer = o;
            c.run_id = format!("{}_{}", cfg.run_id, o);
            c
        })
        .collect();
    let mut groups = run_variants(&variants, table)?.into_iter();
    Ok((
        groups.next().expect("two variants"),
        groups.next().expect("two variants"),
    ))
}

/// First epoch whose test accuracy reaches `threshold`.
pub fn epochs_to_reach(rows: &[TrajectoryRow], threshold: f64) -> Option<usize> {
    rows.iter()
        .find(|r| r.test_acc >= threshold)
        .map(|r| r.epoch)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldRecord {
    pub fold: usize,
    pub test_acc: f64,
    pub test_loss: f64,
    pub spent_epsilon: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KfoldResult {
    pub folds: Vec<FoldRecord>,
    pub mean: f64,
    /// Population standard deviation of fold accuracies.
    pub std: f64,
}

/// Trains on each fold's complement and scores the held-out fold. Uses the
/// first configured seed for fold assignment and training.
pub fn kfold_eval(cfg: &ExperimentConfig, table: &RecordTable, k: usize) -> Result<KfoldResult> {
    if k < 2 {
        return Err(Error::Config(format!("k = {k}; need at least 2 folds")));
    }
    let seed = *cfg
        .seeds
        .first()
        .ok_or_else(|| Error::Config("no seeds".into()))?;
    let folds = kfold(table, k, seed)?;
    let records = folds
        .par_iter()
        .enumerate()
        .map(|(i, (train, val))| {
            let r = run_split(cfg, train, val, seed)?;
            let last = r.last();
            Ok(FoldRecord {
                fold: i + 1,
                test_acc: last.test_acc,
                test_loss: last.test_loss,
                spent_epsilon: last.spent_epsilon,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let accs: Vec<f64> = records.iter().map(|f| f.test_acc).collect();
    let m = mean(&accs);
    let std = (accs.iter().map(|a| (a - m).powi(2)).sum::<f64>() / accs.len() as f64).sqrt();
    Ok(KfoldResult {
        folds: records,
        mean: m,
        std,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub lrs: Vec<f64>,
    pub batch_sizes: Vec<usize>,
    pub dropouts: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridCell {
    pub lr: f64,
    pub batch_size: usize,
    pub dropout: f64,
    pub mean_val_acc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridResult {
    pub best: GridCell,
    /// Every cell, ordered by (lr, batch size, dropout).
    pub cells: Vec<GridCell>,
}

pub fn best_cell(cells: &[GridCell]) -> Option<GridCell> {
    let mut sorted = cells.to_vec();
    sorted.sort_by(|a, b| {
        a.lr.total_cmp(&b.lr)
            .then(a.batch_size.cmp(&b.batch_size))
            .then(a.dropout.total_cmp(&b.dropout))
    });
    sorted.into_iter().reduce(|best, c| {
        if c.mean_val_acc > best.mean_val_acc {
            c
        } else {
            best
        }
    })
}

/// Scores each (lr, batch, dropout) cell by mean k-fold validation accuracy.
pub fn grid_search(cfg: &ExperimentConfig, table: &RecordTable, grid: &Grid) -> Result<GridResult> {
    let mut points = Vec::new();
    for &lr in &grid.lrs {
        for &batch_size in &grid.batch_sizes {
            for &dropout in &grid.dropouts {
                points.push((lr, batch_size, dropout));
            }
        }
    }
    if points.is_empty() {
        return Err(Error::Config("empty hyperparameter grid".into()));
    }
    let cells = points
        .par_iter()
        .map(|&(lr, batch_size, dropout)| {
            let mut c = cfg.clone();
            c.train.lr = lr;
            c.train.batch_size = batch_size;
            c.train.dropout = dropout;
            Ok(GridCell {
                lr,
                batch_size,
                dropout,
                mean_val_acc: kfold_eval(&c, table, cfg.k_folds)?.mean,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let best = best_cell(&cells).expect("grid is non-empty");
    let mut cells = cells;
    cells.sort_by(|a, b| {
        a.lr.total_cmp(&b.lr)
            .then(a.batch_size.cmp(&b.batch_size))
            .then(a.dropout.total_cmp(&b.dropout))
    });
    Ok(GridResult { best, cells })
}

#[derive(Debug, Clone)]
pub struct BaselineReport {
    pub target_epsilon: f64,
    pub centralized: Vec<RunResult>,
    pub federated: Vec<RunResult>,
    pub reference_accuracy: f64,
}

impl BaselineReport {
    pub fn mean_centralized_acc(&self) -> f64 {
        mean(
            &self
                .centralized
                .iter()
                .map(RunResult::final_test_acc)
                .collect::<Vec<_>>(),
        )
    }

    pub fn mean_federated_acc(&self) -> f64 {
        mean(
            &self
                .federated
                .iter()
                .map(RunResult::final_test_acc)
                .collect::<Vec<_>>(),
        )
    }

    /// Largest spent ε over every run.
    pub fn max_spent_epsilon(&self) -> f64 {
        self.centralized
            .iter()
            .chain(&self.federated)
            .filter_map(RunResult::final_epsilon)
            .fold(0.0, f64::max)
    }
}

pub const BASELINE_CLIENTS: usize = 4;

/// DP-SGD logistic regression at ε = 1, centralized and over four iid clients.
pub fn run_logreg_baseline(cfg: &ExperimentConfig, table: &RecordTable) -> Result<BaselineReport> {
    let target = 1.0;
    let mut central = cfg.with_target(target);
    central.model = ModelKind::Logreg;
    central.mode = RunMode::Centralized;
    central.run_id = format!("{}_logreg", cfg.run_id);
    let mut fed = central.clone();
    fed.mode = RunMode::Federated {
        clients: BASELINE_CLIENTS,
    };
    fed.partition = data::PartitionStrategy::Iid;
    fed.run_id = format!("{}_logreg_fed{}", cfg.run_id, BASELINE_CLIENTS);
    let mut groups = run_variants(&[central, fed], table)?.into_iter();
    Ok(BaselineReport {
        target_epsilon: target,
        centralized: groups.next().expect("two variants"),
        federated: groups.next().expect("two variants"),
        reference_accuracy: LOGREG_REFERENCE_ACCURACY,
    })
}
