use crate::dp::make_private;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{self, ModelParams};
use crate::train::LocalTrainer;

use super::protocol::{ClientUpdate, EvalReport, Message, Metrics, RoundConfig};

/// Client-side half of a session: holds the local shard and trains on the
/// weights each round brings. Transport-agnostic; see [`ClientRunner::handle`].
#[derive(Debug, Clone)]
pub struct ClientRunner {
    id: u32,
    seed: u64,
    x: Matrix,
    y: Vec<u8>,
    y_f64: Vec<f64>,
    eval: Option<(Matrix, Vec<u8>)>,
    trainer: Option<LocalTrainer>,
    last_round: u32,
    report: SessionReport,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SessionReport {
    pub client_id: u32,
    pub rounds: Vec<u32>,
    /// Ledger ε after each round, when training is private.
    pub spent_epsilon: Vec<f64>,
}

impl SessionReport {
    pub fn updates_sent(&self) -> usize {
        self.rounds.len()
    }
}

impl ClientRunner {
    pub fn new(id: u32, x: Matrix, y: Vec<u8>, seed: u64) -> Result<Self> {
        if x.rows() == 0 {
            return Err(Error::Validation(format!("client {id} has an empty shard")));
        }
        if x.rows() != y.len() {
            return Err(Error::Shape(format!(
                "{} rows vs {} labels",
                x.rows(),
                y.len()
            )));
        }
        let y_f64 = y.iter().map(|&v| f64::from(v)).collect();
        Ok(Self {
            id,
            seed,
            x,
            y,
            y_f64,
            eval: None,
            trainer: None,
            last_round: 0,
            report: SessionReport {
                client_id: id,
                ..SessionReport::default()
            },
        })
    }

    /// Local held-out set for evaluation requests; defaults to the training shard.
    pub fn with_eval(mut self, x: Matrix, y: Vec<u8>) -> Self {
        self.eval = Some((x, y));
        self
    }

    pub fn id(&self) -> u32 {
        self.id
    }

    pub fn num_examples(&self) -> usize {
        self.x.rows()
    }

    pub fn hello(&self) -> Message {
        Message::Hello { client_id: self.id }
    }

    pub fn report(&self) -> &SessionReport {
        &self.report
    }

    /// Reacts to one server message. `Ok(None)` means the session is over.
    pub fn handle(&mut self, msg: Message) -> Result<Option<Message>> {
        match msg {
            Message::RoundConfig(cfg) => self.fit(cfg).map(|u| Some(Message::FitResult(u))),
            Message::EvalRequest { round, weights } => {
                if round != self.last_round {
                    return Err(Error::Protocol(format!(
                        "evaluation requested for round {round}, last trained round is {}",
                        self.last_round
                    )));
                }
                self.evaluate(round, &weights)
                    .map(|e| Some(Message::EvalResult(e)))
            }
            Message::Shutdown => Ok(None),
            other => Err(Error::Protocol(format!(
                "client received unexpected {:?}",
                other.kind()
            ))),
        }
    }

    fn fit(&mut self, cfg: RoundConfig) -> Result<ClientUpdate> {
        if cfg.round <= self.last_round {
            return Err(Error::Protocol(format!(
                "round {} does not follow round {}",
                cfg.round, self.last_round
            )));
        }
        if cfg.weights.input_dim() != self.x.cols() {
            return Err(Error::Shape(format!(
                "global model expects {} features, shard has {}",
                cfg.weights.input_dim(),
                self.x.cols()
            )));
        }
        let hyper = cfg.hyper;
        match &mut self.trainer {
            Some(t) => t.load_global(cfg.weights)?,
            None => {
                let n = self.x.rows();
                let epochs = hyper.local_epochs as usize * hyper.total_rounds as usize;
                let dp = match &hyper.privacy {
                    Some(spec) => Some(make_private(spec, n, hyper.train.batch_size, epochs)?),
                    None => None,
                };
                self.trainer = Some(LocalTrainer::new(cfg.weights, hyper.train, dp, self.seed)?);
            }
        }
        let trainer = self.trainer.as_mut().expect("initialized above");
        for _ in 0..hyper.local_epochs {
            trainer.train_epoch(&self.x, &self.y_f64)?;
        }
        let (loss, acc) = nn::evaluate(&trainer.params, &self.x, &self.y)?;
        let mut metrics = Metrics::new().with("loss", loss).with("accuracy", acc);
        if let Some(eps) = trainer.spent_epsilon()? {
            metrics.insert("spent_epsilon", eps);
            self.report.spent_epsilon.push(eps);
        }
        self.last_round = cfg.round;
        self.report.rounds.push(cfg.round);
        Ok(ClientUpdate {
            client_id: self.id,
            round: cfg.round,
            num_examples: count(self.x.rows())?,
            metrics,
            weights: trainer.params.clone(),
        })
    }

    fn evaluate(&self, round: u32, weights: &ModelParams) -> Result<EvalReport> {
        let (x, y) = match &self.eval {
            Some((x, y)) => (x, y),
            None => (&self.x, &self.y),
        };
        let (loss, acc) = nn::evaluate(weights, x, y)?;
        Ok(EvalReport {
            client_id: self.id,
            round,
            num_examples: count(x.rows())?,
            metrics: Metrics::new().with("loss", loss).with("accuracy", acc),
        })
    }
}

fn count(n: usize) -> Result<u32> {
    u32::try_from(n)
        .map_err(|_| Error::Protocol(format!("{n} examples do not fit the wire format")))
}
