use std::path::{Path, PathBuf};

use crate::data::{DatasetKind, PartitionStrategy};
use crate::dp::{NoiseSpec, PrivacySpec, Sampling, DEFAULT_CLIP_NORM, DEFAULT_DELTA};
use crate::error::{Error, Result};
use crate::nn::{DEFAULT_DROPOUT, DEFAULT_HIDDEN};
use crate::optim::{OptimizerKind, DEFAULT_LR};
use crate::train::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    Centralized,
    Federated { clients: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Mlp,
    /// One dense layer straight into the sigmoid.
    Logreg,
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(Self::Mlp),
            "logreg" => Ok(Self::Logreg),
            _ => Err(Error::Config(format!("unknown model `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetKind,
    /// Input files; empty means the default files under `data_dir`.
    pub inputs: Vec<PathBuf>,
    pub data_dir: PathBuf,
    pub mode: RunMode,
    pub partition: PartitionStrategy,
    pub model: ModelKind,
    pub hidden: Vec<usize>,
    /// Epochs, or rounds in federated mode.
    pub epochs: usize,
    pub local_epochs: u32,
    pub train: TrainConfig,
    /// `None` disables differential privacy.
    pub privacy: Option<PrivacySpec>,
    pub seeds: Vec<u64>,
    pub test_frac: f64,
    pub k_folds: usize,
    pub run_id: String,
    pub out: Option<PathBuf>,
    /// Record wall-clock time per epoch; off keeps CSV output reproducible.
    pub timing: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetKind::Integrated,
            inputs: Vec::new(),
            data_dir: PathBuf::from("data"),
            mode: RunMode::Centralized,
            partition: PartitionStrategy::Iid,
            model: ModelKind::Mlp,
            hidden: DEFAULT_HIDDEN.to_vec(),
            epochs: 25,
            local_epochs: 1,
            train: TrainConfig {
                batch_size: 32,
                lr: DEFAULT_LR,
                optimizer: OptimizerKind::Adam,
                dropout: DEFAULT_DROPOUT,
            },
            privacy: Some(PrivacySpec::target(1.0)),
            seeds: (1..=5).collect(),
            test_frac: 0.2,
            k_folds: 5,
            run_id: "run".into(),
            out: None,
            timing: false,
        }
    }
}

pub const CLEVELAND_FILE: &str = "processed.cleveland.data";
pub const OTHER_SITES_FILE: &str = "processed.other-sites.data";

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::Config(format!(
            "`{key}`: expected a boolean, got `{v}`"
        ))),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

/// `1..5` (inclusive) or a comma list.
fn parse_seeds(v: &str) -> Result<Vec<u64>> {
    if let Some((a, b)) = v.split_once("..") {
        let (a, b): (u64, u64) = (parse("seeds", a.trim())?, parse("seeds", b.trim())?);
        if a > b {
            return Err(Error::Config(format!("`seeds`: empty range {v}")));
        }
        return Ok((a..=b).collect());
    }
    parse_list("seeds", v)
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    /// Applies `key = value` lines on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            self.set(key.trim(), value.trim()).map_err(|e| {
                Error::Config(format!(
                    "line {}: {}",
                    i + 1,
                    e.to_string().trim_start_matches("config error: ")
                ))
            })?;
        }
        self.validate()
    }

    fn privacy_mut(&mut self) -> &mut PrivacySpec {
        self.privacy.get_or_insert(PrivacySpec::target(1.0))
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "dataset" => self.dataset = v.parse()?,
            "inputs" => {
                self.inputs = v
                    .split(',')
                    .map(|s| PathBuf::from(s.trim()))
                    .filter(|p| !p.as_os_str().is_empty())
                    .collect()
            }
            "data_dir" => self.data_dir = PathBuf::from(v),
            "mode" => {
                self.mode = match v {
                    "centralized" => RunMode::Centralized,
                    "federated" => RunMode::Federated {
                        clients: match self.mode {
                            RunMode::Federated { clients } => clients,
                            RunMode::Centralized => 4,
                        },
                    },
                    _ => return Err(Error::Config(format!("unknown mode `{v}`"))),
                }
            }
            "clients" => {
                self.mode = RunMode::Federated {
                    clients: parse(key, v)?,
                }
            }
            "partition" => self.partition = v.parse()?,
            "model" => self.model = v.parse()?,
            "hidden" => self.hidden = parse_list(key, v)?,
            "epochs" | "rounds" => self.epochs = parse(key, v)?,
            "local_epochs" => self.local_epochs = parse(key, v)?,
            "batch_size" => self.train.batch_size = parse(key, v)?,
            "lr" => self.train.lr = parse(key, v)?,
            "optimizer" => self.train.optimizer = v.parse()?,
            "dropout" => self.train.dropout = parse(key, v)?,
            "dp" => {
                if parse_bool(key, v)? {
                    self.privacy_mut();
                } else {
                    self.privacy = None;
                }
            }
            "target_epsilon" => self.privacy_mut().noise = NoiseSpec::TargetEpsilon(parse(key, v)?),
            "noise_multiplier" => self.privacy_mut().noise = NoiseSpec::Multiplier(parse(key, v)?),
            "delta" => self.privacy_mut().delta = parse(key, v)?,
            "clip_norm" => self.privacy_mut().clip_norm = parse(key, v)?,
            "sampling" => self.privacy_mut().sampling = v.parse::<Sampling>()?,
            "seeds" => self.seeds = parse_seeds(v)?,
            "test_frac" => self.test_frac = parse(key, v)?,
            "k" | "k_folds" => self.k_folds = parse(key, v)?,
            "run_id" => self.run_id = v.to_string(),
            "out" => self.out = Some(PathBuf::from(v)),
            "timing" => self.timing = parse_bool(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.local_epochs == 0 {
            return bad("local_epochs must be at least 1".into());
        }
        if self.train.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.train.lr > 0.0 && self.train.lr.is_finite()) {
            return bad(format!("lr {} must be positive", self.train.lr));
        }
        if !(0.0..1.0).contains(&self.train.dropout) {
            return bad(format!("dropout {} must be in [0, 1)", self.train.dropout));
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        if !(self.test_frac > 0.0 && self.test_frac < 1.0) {
            return bad(format!("test_frac {} must be in (0, 1)", self.test_frac));
        }
        if self.hidden.contains(&0) {
            return bad("hidden layer sizes must be positive".into());
        }
        if let RunMode::Federated { clients: 0 } = self.mode {
            return bad("clients must be at least 1".into());
        }
        if let Some(p) = &self.privacy {
            if let NoiseSpec::TargetEpsilon(t) = p.noise {
                if !(t > 0.0) {
                    return bad(format!("target_epsilon {t} must be positive"));
                }
            }
        }
        Ok(())
    }

    /// Explicit inputs, or the bundled files for the chosen dataset.
    pub fn input_paths(&self) -> Vec<PathBuf> {
        if !self.inputs.is_empty() {
            return self.inputs.clone();
        }
        match self.dataset {
            DatasetKind::Cleveland => vec![self.data_dir.join(CLEVELAND_FILE)],
            DatasetKind::Uci | DatasetKind::Integrated => {
                vec![
                    self.data_dir.join(CLEVELAND_FILE),
                    self.data_dir.join(OTHER_SITES_FILE),
                ]
            }
        }
    }

    /// Sets the privacy target, keeping δ, C and sampling (or the defaults).
    pub fn with_target(&self, epsilon: f64) -> Self {
        let mut c = self.clone();
        let base = self.privacy.unwrap_or(PrivacySpec {
            noise: NoiseSpec::TargetEpsilon(epsilon),
            delta: DEFAULT_DELTA,
            clip_norm: DEFAULT_CLIP_NORM,
            sampling: Sampling::Poisson,
        });
        c.privacy = Some(PrivacySpec {
            noise: NoiseSpec::TargetEpsilon(epsilon),
            ..base
        });
        c
    }
}
