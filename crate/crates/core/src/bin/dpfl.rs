use std::io::Write as _;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dpfl::data::{self, load_csv, prepare_local, Schema, SourceTag};
use dpfl::experiments::{
    self, compare_optimizers, epochs_to_reach, format_g, grid_search, kfold_eval, ledger_csv,
    median, rows_of, run_all, run_logreg_baseline, sweep_epochs, sweep_epsilon, trajectory_csv,
    write_text, ExperimentConfig, Grid, RunMode, TrajectoryRow,
};
use dpfl::federation::{run_client, run_server, ClientRunner, FedConfig, Hyperparams};
use dpfl::{Error, Result};

#[derive(Parser)]
#[command(
    name = "dpfl",
    version,
    about = "Differentially-private federated learning on tabular data"
)]
struct Cli {
    /// `key = value` experiment config applied before command-line overrides.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run with this single seed instead of the configured list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file; stdout when omitted.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Default)]
struct RunArgs {
    #[arg(long)]
    dataset: Option<String>,
    /// Input file (repeatable); defaults to the bundled files under --data-dir.
    #[arg(long = "input")]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// centralized or federated.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    clients: Option<usize>,
    /// iid or by_site.
    #[arg(long)]
    partition: Option<String>,
    /// mlp or logreg.
    #[arg(long)]
    model: Option<String>,
    /// Comma-separated hidden layer widths.
    #[arg(long)]
    hidden: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    local_epochs: Option<u32>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    no_dp: bool,
    #[arg(long, conflicts_with = "noise_multiplier")]
    target_epsilon: Option<f64>,
    #[arg(long)]
    noise_multiplier: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    clip_norm: Option<f64>,
    /// poisson or fixed.
    #[arg(long)]
    sampling: Option<String>,
    /// `1..5` or a comma list.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    test_frac: Option<f64>,
    #[arg(long)]
    run_id: Option<String>,
    /// Record wall-clock milliseconds in trajectories.
    #[arg(long)]
    timing: bool,
}

impl RunArgs {
    fn overrides(&self) -> Vec<(&'static str, String)> {
        let mut o: Vec<(&'static str, String)> = Vec::new();
        macro_rules! opt {
            ($($field:ident => $key:literal),* $(,)?) => {
                $(if let Some(v) = &self.$field { o.push(($key, v.to_string())); })*
            };
        }
        opt!(
            dataset => "dataset", mode => "mode", clients => "clients", partition => "partition",
            model => "model", hidden => "hidden", epochs => "epochs", local_epochs => "local_epochs",
            batch_size => "batch_size", lr => "lr", optimizer => "optimizer", dropout => "dropout",
            target_epsilon => "target_epsilon", noise_multiplier => "noise_multiplier", delta => "delta",
            clip_norm => "clip_norm", sampling => "sampling", seeds => "seeds", test_frac => "test_frac",
            run_id => "run_id",
        );
        if let Some(d) = &self.data_dir {
            o.push(("data_dir", d.display().to_string()));
        }
        if !self.inputs.is_empty() {
            let joined: Vec<String> = self
                .inputs
                .iter()
                .map(|p| p.display().to_string())
                .collect();
            o.push(("inputs", joined.join(",")));
        }
        if self.no_dp {
            o.push(("dp", "false".into()));
        }
        if self.timing {
            o.push(("timing", "true".into()));
        }
        o
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Load, binarize and (for integrated) deduplicate a dataset; write it as CSV.
    PrepareData {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Train over each seed and write per-epoch trajectories.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Write the per-step privacy ledger of each seed here.
        #[arg(long)]
        ledger_out: Option<PathBuf>,
    },
    SweepEpsilon {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value = "0.5,1,3,5,10")]
        targets: String,
    },
    SweepEpochs {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value = "10,25,50")]
        counts: String,
    },
    CompareOptimizers {
        #[command(flatten)]
        run: RunArgs,
        /// Test accuracy used for the epochs-to-reach summary.
        #[arg(long, default_value_t = 0.75)]
        threshold: f64,
    },
    GridSearch {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value = "0.0001,0.001,0.01,0.1")]
        lrs: String,
        #[arg(long, default_value = "16,32,64")]
        batch_sizes: String,
        #[arg(long, default_value = "0,0.2,0.5")]
        dropouts: String,
        #[arg(long)]
        k: Option<usize>,
    },
    Kfold {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        k: Option<usize>,
    },
    BaselineLogreg {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Coordinate a federated session over TCP.
    FlServer {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        listen: String,
        #[arg(long)]
        rounds: Option<u32>,
        /// Encoded feature count; defaults to the heart-disease schema width.
        #[arg(long)]
        input_dim: Option<usize>,
    },
    /// Join a federated session with a local shard file.
    FlClient {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        connect: String,
        #[arg(long)]
        shard: PathBuf,
        #[arg(long, default_value_t = 0)]
        client_id: u32,
    },
    /// Run a federated session in one process.
    Simulate {
        #[command(flatten)]
        run: RunArgs,
    },
}

fn parse_list<T: std::str::FromStr>(what: &str, s: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(|v| {
            v.parse()
                .map_err(|_| Error::Config(format!("--{what}: cannot parse `{v}`")))
        })
        .collect()
}

fn build_config(cli: &Cli, run: &RunArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    for (k, v) in run.overrides() {
        cfg.set(k, &v)
            .map_err(|e| Error::Config(format!("--{}: {e}", k.replace('_', "-"))))?;
    }
    if let Some(s) = cli.seed {
        cfg.seeds = vec![s];
    }
    if let Some(o) = &cli.out {
        cfg.out = Some(o.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn emit(cfg: &ExperimentConfig, text: &str) -> Result<()> {
    match &cfg.out {
        Some(p) => write_text(p, text),
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn trajectories(cfg: &ExperimentConfig, rows: &[TrajectoryRow]) -> Result<()> {
    emit(cfg, &trajectory_csv(rows))
}

fn warn_privacy(cfg: &ExperimentConfig, n: usize) {
    if let Some(spec) = &cfg.privacy {
        if let Ok(dp) = dpfl::dp::make_private(spec, n, cfg.train.batch_size, cfg.epochs) {
            for w in dp.warnings(n) {
                eprintln!("warning: {w}");
            }
        }
    }
}

fn ledger_path(base: &Path, seed: u64, many: bool) -> PathBuf {
    if !many {
        return base.to_path_buf();
    }
    let stem = base
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("ledger");
    let name = match base.extension().and_then(|e| e.to_str()) {
        Some(ext) => format!("{stem}_seed{seed}.{ext}"),
        None => format!("{stem}_seed{seed}"),
    };
    base.with_file_name(name)
}

fn run(cli: Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::PrepareData { run } => {
            let cfg = build_config(&cli, run)?;
            let table = experiments::load_table(&cfg)?;
            eprintln!(
                "{}: {} rows, {} with missing values",
                cfg.dataset,
                table.len(),
                table.count_missing_rows()
            );
            emit(&cfg, &data::to_csv_string(&table))
        }
        Cmd::Train { run, ledger_out } => {
            let cfg = build_config(&cli, run)?;
            let table = experiments::load_table(&cfg)?;
            warn_privacy(&cfg, table.len());
            let runs = run_all(&cfg, &table)?;
            if let (Some(base), Some(spec)) = (ledger_out, &cfg.privacy) {
                for r in &runs {
                    if let Some(l) = &r.ledger {
                        write_text(
                            &ledger_path(base, r.seed, runs.len() > 1),
                            &ledger_csv(l, spec.delta)?,
                        )?;
                    }
                }
            }
            for r in &runs {
                eprintln!(
                    "seed {}: test_acc {} spent_epsilon {}",
                    r.seed,
                    format_g(r.final_test_acc(), 4),
                    r.final_epsilon().map_or("-".into(), |e| format_g(e, 4))
                );
            }
            trajectories(
                &cfg,
                &runs.into_iter().flat_map(|r| r.rows).collect::<Vec<_>>(),
            )
        }
        Cmd::SweepEpsilon { run, targets } => {
            let cfg = build_config(&cli, run)?;
            let table = experiments::load_table(&cfg)?;
            let groups = sweep_epsilon(&cfg, &table, &parse_list("targets", targets)?)?;
            for g in &groups {
                eprintln!(
                    "epsilon {}: mean test_acc {}",
                    g.value,
                    format_g(g.mean_final_test_acc(), 4)
                );
            }
            trajectories(&cfg, &rows_of(&groups))
        }
        Cmd::SweepEpochs { run, counts } => {
            let cfg = build_config(&cli, run)?;
            let table = experiments::load_table(&cfg)?;
            let groups = sweep_epochs(&cfg, &table, &parse_list("counts", counts)?)?;
            for g in &groups {
                let sigma = g.runs.first().and_then(|r| r.noise_multiplier);
                eprintln!(
                    "epochs {}: sigma {} mean test_acc {}",
                    g.value,
                    sigma.map_or("-".into(), |s| format_g(s, 4)),
                    format_g(g.mean_final_test_acc(), 4)
                );
            }
            trajectories(&cfg, &rows_of(&groups))
        }
        Cmd::CompareOptimizers { run, threshold } => {
            let cfg = build_config(&cli, run)?;
            let table = experiments::load_table(&cfg)?;
            let (adam, sgd) = compare_optimizers(&cfg, &table)?;
            for (name, runs) in [("adam", &adam), ("sgd", &sgd)] {
                // Runs that never reach the threshold count as epochs + 1.
                let reach: Vec<f64> = runs
                    .iter()
                    .map(|r| epochs_to_reach(&r.rows, *threshold).unwrap_or(cfg.epochs + 1) as f64)
                    .collect();
                eprintln!("{name}: median epochs to {threshold}: {}", median(&reach));
            }
            let rows: Vec<TrajectoryRow> =
                adam.into_iter().chain(sgd).flat_map(|r| r.rows).collect();
            trajectories(&cfg, &rows)
        }
        Cmd::GridSearch {
            run,
            lrs,
            batch_sizes,
            dropouts,
            k,
        } => {
            let mut cfg = build_config(&cli, run)?;
            if let Some(k) = k {
                cfg.k_folds = *k;
            }
            let table = experiments::load_table(&cfg)?;
            let grid = Grid {
                lrs: parse_list("lrs", lrs)?,
                batch_sizes: parse_list("batch-sizes", batch_sizes)?,
                dropouts: parse_list("dropouts", dropouts)?,
            };
            let res = grid_search(&cfg, &table, &grid)?;
            let mut out = String::from("lr,batch_size,dropout,mean_val_acc\n");
            for c in &res.cells {
                out += &format!(
                    "{},{},{},{}\n",
                    c.lr,
                    c.batch_size,
                    c.dropout,
                    format_g(c.mean_val_acc, 6)
                );
            }
            eprintln!(
                "best: lr {} batch_size {} dropout {} mean_val_acc {}",
                res.best.lr,
                res.best.batch_size,
                res.best.dropout,
                format_g(res.best.mean_val_acc, 4)
            );
            emit(&cfg, &out)
        }
        Cmd::Kfold { run, k } => {
            let cfg = build_config(&cli, run)?;
            let table = experiments::load_table(&cfg)?;
            let res = kfold_eval(&cfg, &table, k.unwrap_or(cfg.k_folds))?;
            let mut out = String::from("fold,test_acc,test_loss,spent_epsilon\n");
            for f in &res.folds {
                out += &format!(
                    "{},{},{},{}\n",
                    f.fold,
                    format_g(f.test_acc, 6),
                    format_g(f.test_loss, 6),
                    f.spent_epsilon.map(|e| format_g(e, 6)).unwrap_or_default()
                );
            }
            eprintln!(
                "mean {} std {}",
                format_g(res.mean, 4),
                format_g(res.std, 4)
            );
            emit(&cfg, &out)
        }
        Cmd::BaselineLogreg { run } => {
            let cfg = build_config(&cli, run)?;
            let table = experiments::load_table(&cfg)?;
            let rep = run_logreg_baseline(&cfg, &table)?;
            eprintln!(
                "logreg at epsilon {}: centralized {} federated({}) {} reference {} max spent epsilon {}",
                rep.target_epsilon,
                format_g(rep.mean_centralized_acc(), 4),
                experiments::BASELINE_CLIENTS,
                format_g(rep.mean_federated_acc(), 4),
                rep.reference_accuracy,
                format_g(rep.max_spent_epsilon(), 4)
            );
            let rows: Vec<TrajectoryRow> = rep
                .centralized
                .iter()
                .chain(&rep.federated)
                .flat_map(|r| r.rows.clone())
                .collect();
            trajectories(&cfg, &rows)
        }
        Cmd::Simulate { run } => {
            let mut cfg = build_config(&cli, run)?;
            if cfg.mode == RunMode::Centralized {
                cfg.mode = RunMode::Federated { clients: 4 };
            }
            let table = experiments::load_table(&cfg)?;
            let runs = run_all(&cfg, &table)?;
            trajectories(
                &cfg,
                &runs.into_iter().flat_map(|r| r.rows).collect::<Vec<_>>(),
            )
        }
        Cmd::FlServer {
            run,
            listen,
            rounds,
            input_dim,
        } => {
            let mut cfg = build_config(&cli, run)?;
            if let Some(r) = rounds {
                cfg.epochs = *r as usize;
            }
            let clients = match cfg.mode {
                RunMode::Federated { clients } => clients,
                RunMode::Centralized => 1,
            };
            let dim = input_dim.unwrap_or_else(|| Schema::heart_disease().encoded_width());
            let fed = FedConfig {
                clients,
                layer_sizes: experiments::layer_sizes(&cfg, dim),
                init_seed: cfg.seeds[0],
                hyper: Hyperparams {
                    local_epochs: cfg.local_epochs,
                    total_rounds: u32::try_from(cfg.epochs)
                        .map_err(|_| Error::Config("too many rounds".into()))?,
                    train: cfg.train,
                    privacy: cfg.privacy,
                },
            };
            let listener = TcpListener::bind(listen)?;
            eprintln!("listening on {}", listener.local_addr()?);
            let outcome = run_server(&listener, &fed, None)?;
            let mut out = String::from("round,spent_epsilon,eval_loss,eval_acc\n");
            for r in &outcome.log {
                out += &format!(
                    "{},{},{},{}\n",
                    r.round,
                    r.spent_epsilon.map(|e| format_g(e, 6)).unwrap_or_default(),
                    r.weighted_eval("loss")
                        .map(|v| format_g(v, 6))
                        .unwrap_or_default(),
                    r.weighted_eval("accuracy")
                        .map(|v| format_g(v, 6))
                        .unwrap_or_default(),
                );
            }
            emit(&cfg, &out)
        }
        Cmd::FlClient {
            run,
            connect,
            shard,
            client_id,
        } => {
            let cfg = build_config(&cli, run)?;
            let table = data::binarize_target(&load_csv(
                shard,
                &Schema::heart_disease(),
                SourceTag::Integrated,
            )?)?;
            let (x, y) = prepare_local(&table)?;
            let runner = ClientRunner::new(*client_id, x.values, y.0, cfg.seeds[0])?;
            let report = run_client(connect.as_str(), runner)?;
            eprintln!(
                "client {}: {} updates sent, final spent epsilon {}",
                report.client_id,
                report.updates_sent(),
                report
                    .spent_epsilon
                    .last()
                    .map_or("-".into(), |e| format_g(*e, 4))
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
