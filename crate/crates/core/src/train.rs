//! Epoch loop shared by centralized runs and federated clients.

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dp::{
    private_training_step, steps_per_epoch, DpConfig, PrivacyLedger, Sampling, StepSeeds,
};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{self, Mode, ModelParams};
use crate::optim::{OptimizerKind, OptimizerState};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub dropout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            lr: crate::optim::DEFAULT_LR,
            optimizer: OptimizerKind::Adam,
            dropout: nn::DEFAULT_DROPOUT,
        }
    }
}

/// Independent random streams derived from one seed: batch sampling,
/// dropout masks, and gradient noise.
#[derive(Debug, Clone)]
pub struct RngStreams {
    sampling: ChaCha8Rng,
    dropout: ChaCha8Rng,
    noise: ChaCha8Rng,
}

impl RngStreams {
    pub fn from_seed(seed: u64) -> Self {
        let stream = |s: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(s);
            r
        };
        Self {
            sampling: stream(1),
            dropout: stream(2),
            noise: stream(3),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LocalTrainer {
    pub params: ModelParams,
    pub ledger: PrivacyLedger,
    optimizer: OptimizerState,
    streams: RngStreams,
    cfg: TrainConfig,
    dp: Option<DpConfig>,
}

impl LocalTrainer {
    pub fn new(
        params: ModelParams,
        cfg: TrainConfig,
        dp: Option<DpConfig>,
        seed: u64,
    ) -> Result<Self> {
        if cfg.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        let optimizer = OptimizerState::new(cfg.optimizer, cfg.lr, &params)?;
        Ok(Self {
            params,
            ledger: PrivacyLedger::new(),
            optimizer,
            streams: RngStreams::from_seed(seed),
            cfg,
            dp,
        })
    }

    pub fn dp(&self) -> Option<&DpConfig> {
        self.dp.as_ref()
    }

    /// Replaces the weights at the start of a federated round. Optimizer
    /// moments, RNG streams and the ledger carry over.
    pub fn load_global(&mut self, params: ModelParams) -> Result<()> {
        if !params.same_shape(&self.params) {
            return Err(Error::Shape(
                "global model does not match the local model".into(),
            ));
        }
        self.params = params;
        Ok(())
    }

    pub fn spent_epsilon(&self) -> Result<Option<f64>> {
        match &self.dp {
            Some(dp) => Ok(Some(self.ledger.epsilon(dp.delta)?.0)),
            None => Ok(None),
        }
    }

    fn next_seeds(&mut self) -> StepSeeds {
        StepSeeds {
            dropout: self.streams.dropout.next_u64(),
            noise: self.streams.noise.next_u64(),
        }
    }

    /// One pass of `ceil(N/B)` optimizer steps over `(x, y)`.
    pub fn train_epoch(&mut self, x: &Matrix, y: &[f64]) -> Result<()> {
        let n = x.rows();
        if n == 0 || n != y.len() {
            return Err(Error::Shape(format!("{n} examples vs {} labels", y.len())));
        }
        let steps = steps_per_epoch(n, self.cfg.batch_size);
        match self.dp {
            Some(dp) if dp.sampling == Sampling::Poisson => {
                let expected = dp.sample_rate * n as f64;
                for _ in 0..steps {
                    let idx: Vec<usize> = (0..n)
                        .filter(|_| self.streams.sampling.random::<f64>() < dp.sample_rate)
                        .collect();
                    let (bx, by) = gather(x, y, &idx);
                    let seeds = self.next_seeds();
                    private_training_step(
                        &mut self.params,
                        &bx,
                        &by,
                        &dp,
                        expected,
                        self.cfg.dropout,
                        &mut self.optimizer,
                        &mut self.ledger,
                        seeds,
                    )?;
                }
            }
            dp => {
                let mut order: Vec<usize> = (0..n).collect();
                order.shuffle(&mut self.streams.sampling);
                for chunk in order.chunks(self.cfg.batch_size) {
                    let (bx, by) = gather(x, y, chunk);
                    let seeds = self.next_seeds();
                    match &dp {
                        Some(dp) => private_training_step(
                            &mut self.params,
                            &bx,
                            &by,
                            dp,
                            chunk.len() as f64,
                            self.cfg.dropout,
                            &mut self.optimizer,
                            &mut self.ledger,
                            seeds,
                        )?,
                        None => self.plain_step(&bx, &by, seeds)?,
                    }
                }
            }
        }
        Ok(())
    }

    /// Non-private step on the mean of per-example gradients.
    fn plain_step(&mut self, x: &Matrix, y: &[f64], seeds: StepSeeds) -> Result<()> {
        let grads = nn::per_sample_grads(
            &self.params,
            x,
            y,
            Mode::Train {
                dropout: self.cfg.dropout,
                seed: seeds.dropout,
            },
        )?;
        let mut sum = self.params.zeros_like();
        for g in &grads {
            sum.add_assign(g);
        }
        let b = grads.len() as f64;
        for v in sum.values_mut() {
            *v /= b;
        }
        self.optimizer.step(&mut self.params, &sum)
    }
}

fn gather(x: &Matrix, y: &[f64], idx: &[usize]) -> (Matrix, Vec<f64>) {
    (x.select_rows(idx), idx.iter().map(|&i| y[i]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dp::{make_private, NoiseSpec, PrivacySpec};

    fn toy() -> (Matrix, Vec<f64>) {
        let rows: Vec<Vec<f64>> = (0..40)
            .map(|i| vec![(i as f64 / 10.0) - 2.0, ((i * 7) % 5) as f64 / 5.0])
            .collect();
        let y = rows
            .iter()
            .map(|r| if r[0] > 0.0 { 1.0 } else { 0.0 })
            .collect();
        (Matrix::from_rows(&rows), y)
    }

    #[test]
    fn ledger_counts_steps() {
        let (x, y) = toy();
        let params = nn::init_model(&[2, 4, 1], 1).unwrap();
        let cfg = TrainConfig {
            batch_size: 8,
            ..TrainConfig::default()
        };
        let dp = make_private(&PrivacySpec::target(2.0), 40, 8, 3).unwrap();
        let mut t = LocalTrainer::new(params, cfg, Some(dp), 5).unwrap();
        for _ in 0..3 {
            t.train_epoch(&x, &y).unwrap();
        }
        assert_eq!(t.ledger.len(), 15);
        assert!(t.spent_epsilon().unwrap().unwrap() <= 2.0);
    }

    #[test]
    fn degenerate_dp_equals_plain_training() {
        let (x, y) = toy();
        let params = nn::init_model(&[2, 4, 1], 1).unwrap();
        let cfg = TrainConfig {
            batch_size: 6,
            ..TrainConfig::default()
        };
        let spec = PrivacySpec {
            noise: NoiseSpec::Multiplier(0.0),
            delta: 1e-5,
            clip_norm: 1e9,
            sampling: Sampling::Fixed,
        };
        let dp = make_private(&spec, 40, 6, 2).unwrap();
        let mut a = LocalTrainer::new(params.clone(), cfg, Some(dp), 3).unwrap();
        let mut b = LocalTrainer::new(params, cfg, None, 3).unwrap();
        for _ in 0..2 {
            a.train_epoch(&x, &y).unwrap();
            b.train_epoch(&x, &y).unwrap();
        }
        assert_eq!(
            nn::serialize_params(&a.params),
            nn::serialize_params(&b.params)
        );
    }
}
