//! Differentially private training: per-example clipping, Gaussian noising,
//! RDP accounting, and noise calibration to a target ε.

mod accountant;
mod mechanism;

pub use accountant::{
    convert, epsilon_for_steps, epsilon_from_ledger, rdp_subsampled_gaussian, PrivacyLedger,
    StepRecord, DEFAULT_ORDERS,
};
pub use mechanism::{clip_per_sample, noisy_aggregate};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{self, Mode, ModelParams};
use crate::optim::OptimizerState;

pub const DEFAULT_DELTA: f64 = 1e-5;
pub const DEFAULT_CLIP_NORM: f64 = 1.0;
pub const SIGMA_BRACKET: (f64, f64) = (0.01, 1e4);
pub const SIGMA_REL_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sampling {
    /// Each example joins a step's batch independently with probability q.
    Poisson,
    /// Shuffled mini-batches; accounting with q = B/N is then an approximation.
    Fixed,
}

impl std::str::FromStr for Sampling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "poisson" => Ok(Self::Poisson),
            "fixed" => Ok(Self::Fixed),
            _ => Err(Error::Config(format!("unknown sampling mode `{s}`"))),
        }
    }
}

impl std::fmt::Display for Sampling {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Poisson => "poisson",
            Self::Fixed => "fixed",
        })
    }
}

/// How noise is chosen before training: either a target ε to calibrate
/// against, or an explicit noise multiplier.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseSpec {
    TargetEpsilon(f64),
    Multiplier(f64),
}

/// User-facing privacy settings, resolved into a [`DpConfig`] once the
/// dataset size and step count are known.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrivacySpec {
    pub noise: NoiseSpec,
    pub delta: f64,
    pub clip_norm: f64,
    pub sampling: Sampling,
}

impl PrivacySpec {
    pub fn target(epsilon: f64) -> Self {
        Self {
            noise: NoiseSpec::TargetEpsilon(epsilon),
            delta: DEFAULT_DELTA,
            clip_norm: DEFAULT_CLIP_NORM,
            sampling: Sampling::Poisson,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DpConfig {
    pub target_epsilon: Option<f64>,
    pub delta: f64,
    pub clip_norm: f64,
    pub noise_multiplier: f64,
    pub sample_rate: f64,
    pub sampling: Sampling,
}

impl DpConfig {
    /// Warnings for settings that are legal but weak.
    pub fn warnings(&self, dataset_size: usize) -> Vec<String> {
        let mut w = Vec::new();
        if dataset_size > 0 && self.delta >= 1.0 / dataset_size as f64 {
            w.push(format!(
                "delta {} is not below 1/N = {:.3e}",
                self.delta,
                1.0 / dataset_size as f64
            ));
        }
        if self.sampling == Sampling::Fixed {
            w.push(
                "fixed-size batches: reported epsilon assumes Poisson sampling and is approximate"
                    .into(),
            );
        }
        w
    }
}

/// Steps per epoch for a dataset of `n` rows at batch size `batch`.
pub fn steps_per_epoch(n: usize, batch: usize) -> usize {
    n.div_ceil(batch.max(1))
}

/// Smallest σ in the search bracket (to relative tolerance) whose ε after
/// `total_steps` steps at rate `q` does not exceed `target_epsilon`.
pub fn calibrate_sigma(target_epsilon: f64, delta: f64, q: f64, total_steps: u64) -> Result<f64> {
    if !(target_epsilon > 0.0) {
        return Err(Error::Calibration(format!(
            "target epsilon {target_epsilon} must be positive"
        )));
    }
    if total_steps == 0 {
        return Err(Error::Calibration("total steps must be at least 1".into()));
    }
    let orders: Vec<u32> = DEFAULT_ORDERS.collect();
    let eps = |sigma: f64| epsilon_for_steps(q, sigma, total_steps, delta, &orders).map(|e| e.0);
    let (mut lo, mut hi) = SIGMA_BRACKET;
    if eps(hi)? > target_epsilon {
        return Err(Error::Calibration(format!(
            "target epsilon {target_epsilon} is unreachable with sigma <= {hi} over {total_steps} steps"
        )));
    }
    if eps(lo)? <= target_epsilon {
        return Ok(lo);
    }
    while hi / lo > 1.0 + SIGMA_REL_TOL {
        let mid = (lo * hi).sqrt();
        if eps(mid)? <= target_epsilon {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Resolves privacy settings for a training run over `n` rows: fixes
/// q = B/N and, given a target ε, calibrates σ for the full step budget.
pub fn make_private(spec: &PrivacySpec, n: usize, batch: usize, epochs: usize) -> Result<DpConfig> {
    if n == 0 {
        return Err(Error::Validation("cannot train on an empty dataset".into()));
    }
    if !(spec.clip_norm > 0.0) {
        return Err(Error::Config(format!(
            "clip norm {} must be positive",
            spec.clip_norm
        )));
    }
    if !(spec.delta > 0.0 && spec.delta < 1.0) {
        return Err(Error::Config(format!(
            "delta {} must be in (0, 1)",
            spec.delta
        )));
    }
    let q = (batch as f64 / n as f64).min(1.0);
    let total_steps = (epochs * steps_per_epoch(n, batch)) as u64;
    let (target, sigma) = match spec.noise {
        NoiseSpec::TargetEpsilon(t) => (Some(t), calibrate_sigma(t, spec.delta, q, total_steps)?),
        NoiseSpec::Multiplier(s) => {
            if !(s >= 0.0) {
                return Err(Error::Config(format!(
                    "noise multiplier {s} must be non-negative"
                )));
            }
            (None, s)
        }
    };
    Ok(DpConfig {
        target_epsilon: target,
        delta: spec.delta,
        clip_norm: spec.clip_norm,
        noise_multiplier: sigma,
        sample_rate: q,
        sampling: spec.sampling,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepSeeds {
    pub dropout: u64,
    pub noise: u64,
}

/// One DP-SGD step: per-example gradients, clipping, noisy aggregation over
/// `expected_batch`, optimizer update, and a ledger entry.
#[allow(clippy::too_many_arguments)]
pub fn private_training_step(
    params: &mut ModelParams,
    x: &Matrix,
    y: &[f64],
    cfg: &DpConfig,
    expected_batch: f64,
    dropout: f64,
    optimizer: &mut OptimizerState,
    ledger: &mut PrivacyLedger,
    seeds: StepSeeds,
) -> Result<()> {
    let grads = if x.rows() == 0 {
        Vec::new()
    } else {
        nn::per_sample_grads(
            params,
            x,
            y,
            Mode::Train {
                dropout,
                seed: seeds.dropout,
            },
        )?
    };
    let (clipped, _) = clip_per_sample(&grads, cfg.clip_norm)?;
    let g = noisy_aggregate(
        &clipped,
        params,
        cfg.clip_norm,
        cfg.noise_multiplier,
        expected_batch,
        seeds.noise,
    )?;
    optimizer.step(params, &g)?;
    ledger.record(cfg.sample_rate, cfg.noise_multiplier);
    Ok(())
}
