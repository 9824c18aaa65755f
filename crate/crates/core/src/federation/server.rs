use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::nn::{init_model, ModelParams};

use super::aggregate::fedavg_aggregate;
use super::protocol::{ClientUpdate, EvalReport, Hyperparams, Message, Metrics, RoundConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    WaitingForClients,
    Configuring,
    Collecting,
    Aggregated,
    Done,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FedConfig {
    /// Expected client count K.
    pub clients: usize,
    /// Full layer sizes of the global model, input first.
    pub layer_sizes: Vec<usize>,
    pub init_seed: u64,
    /// `hyper.total_rounds` is the round count R.
    pub hyper: Hyperparams,
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 {
            return Err(Error::Config("need at least one client".into()));
        }
        if self.hyper.total_rounds == 0 {
            return Err(Error::Config("need at least one round".into()));
        }
        if self.hyper.local_epochs == 0 {
            return Err(Error::Config("need at least one local epoch".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitRecord {
    pub client_id: u32,
    pub num_examples: u32,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: u32,
    pub fits: Vec<FitRecord>,
    pub evals: Vec<EvalReport>,
    /// Server-side evaluation of the new global model, if an evaluator was given.
    pub global: Metrics,
    /// Largest client ledger ε; clients hold disjoint data.
    pub spent_epsilon: Option<f64>,
}

impl RoundRecord {
    /// Example-weighted mean of a client-side evaluation metric.
    pub fn weighted_eval(&self, key: &str) -> Option<f64> {
        let total: f64 = self.evals.iter().map(|e| f64::from(e.num_examples)).sum();
        if total == 0.0 {
            return None;
        }
        self.evals
            .iter()
            .map(|e| {
                e.metrics
                    .get(key)
                    .map(|v| v * f64::from(e.num_examples) / total)
            })
            .sum()
    }
}

/// Synchronous FedAvg coordinator. Knows nothing about transport.
#[derive(Debug, Clone)]
pub struct Server {
    cfg: FedConfig,
    phase: Phase,
    clients: BTreeSet<u32>,
    global: ModelParams,
    round: u32,
    pending: Option<RoundRecord>,
    log: Vec<RoundRecord>,
}

impl Server {
    pub fn new(cfg: FedConfig) -> Result<Self> {
        cfg.validate()?;
        let global = init_model(&cfg.layer_sizes, cfg.init_seed)?;
        Ok(Self {
            cfg,
            phase: Phase::WaitingForClients,
            clients: BTreeSet::new(),
            global,
            round: 0,
            pending: None,
            log: Vec::new(),
        })
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn round(&self) -> u32 {
        self.round
    }

    pub fn global(&self) -> &ModelParams {
        &self.global
    }

    pub fn log(&self) -> &[RoundRecord] {
        &self.log
    }

    pub fn clients(&self) -> impl Iterator<Item = u32> + '_ {
        self.clients.iter().copied()
    }

    fn expect(&self, phase: Phase) -> Result<()> {
        if self.phase != phase {
            return Err(Error::Protocol(format!(
                "server is {:?}, operation needs {phase:?}",
                self.phase
            )));
        }
        Ok(())
    }

    /// Accepts a HELLO. Duplicate ids are rejected.
    pub fn register(&mut self, client_id: u32) -> Result<()> {
        self.expect(Phase::WaitingForClients)?;
        if !self.clients.insert(client_id) {
            return Err(Error::Protocol(format!(
                "client id {client_id} is already registered"
            )));
        }
        if self.clients.len() == self.cfg.clients {
            self.phase = Phase::Configuring;
        }
        Ok(())
    }

    /// Opens the next round and returns the config to broadcast.
    pub fn begin_round(&mut self) -> Result<Message> {
        self.expect(Phase::Configuring)?;
        self.round += 1;
        self.phase = Phase::Collecting;
        Ok(Message::RoundConfig(RoundConfig {
            round: self.round,
            hyper: self.cfg.hyper,
            weights: self.global.clone(),
        }))
    }

    /// Aggregates a complete set of updates for the current round.
    pub fn aggregate(&mut self, updates: Vec<ClientUpdate>) -> Result<()> {
        self.expect(Phase::Collecting)?;
        let ids: BTreeSet<u32> = updates.iter().map(|u| u.client_id).collect();
        if updates.len() != self.cfg.clients || ids != self.clients {
            return Err(Error::RoundFailure {
                round: self.round,
                reason: format!("expected updates from {:?}, got {:?}", self.clients, ids),
            });
        }
        if let Some(u) = updates.iter().find(|u| u.round != self.round) {
            return Err(Error::RoundFailure {
                round: self.round,
                reason: format!("client {} answered for round {}", u.client_id, u.round),
            });
        }
        self.global = fedavg_aggregate(&updates)?;
        let mut fits: Vec<FitRecord> = updates
            .into_iter()
            .map(|u| FitRecord {
                client_id: u.client_id,
                num_examples: u.num_examples,
                metrics: u.metrics,
            })
            .collect();
        fits.sort_by_key(|f| f.client_id);
        let spent_epsilon = fits
            .iter()
            .filter_map(|f| f.metrics.get("spent_epsilon"))
            .reduce(f64::max);
        self.pending = Some(RoundRecord {
            round: self.round,
            fits,
            evals: Vec::new(),
            global: Metrics::new(),
            spent_epsilon,
        });
        self.phase = Phase::Aggregated;
        Ok(())
    }

    pub fn eval_request(&self) -> Result<Message> {
        self.expect(Phase::Aggregated)?;
        Ok(Message::EvalRequest {
            round: self.round,
            weights: self.global.clone(),
        })
    }

    /// Closes the round with evaluation results; moves to `Done` after round R.
    pub fn finish_round(&mut self, mut evals: Vec<EvalReport>, global: Metrics) -> Result<()> {
        self.expect(Phase::Aggregated)?;
        evals.sort_by_key(|e| e.client_id);
        let mut rec = self.pending.take().expect("aggregated round has a record");
        rec.evals = evals;
        rec.global = global;
        self.log.push(rec);
        self.phase = if self.round == self.cfg.hyper.total_rounds {
            Phase::Done
        } else {
            Phase::Configuring
        };
        Ok(())
    }
}

/// Server-side scoring hook for the aggregated model.
pub type Evaluator<'a> = dyn Fn(&ModelParams) -> Result<Metrics> + Sync + 'a;

/// One request/response channel to a registered client.
pub trait Link: Send {
    fn client_id(&self) -> u32;
    fn exchange(&mut self, msg: &Message) -> Result<Message>;
    fn shutdown(&mut self) -> Result<()>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct FedOutcome {
    pub global: ModelParams,
    pub log: Vec<RoundRecord>,
}

fn exchange_all<L: Link>(links: &mut [L], msg: &Message) -> Vec<(u32, Result<Message>)> {
    std::thread::scope(|s| {
        let handles: Vec<_> = links
            .iter_mut()
            .map(|l| s.spawn(move || (l.client_id(), l.exchange(msg))))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("client exchange thread panicked"))
            .collect()
    })
}

fn round_failure(round: u32, id: u32, e: Error) -> Error {
    Error::RoundFailure {
        round,
        reason: format!("client {id}: {e}"),
    }
}

/// Runs every round against registered links, shared by the socket and
/// in-process deployments. Any client error aborts the session.
pub fn drive<L: Link>(
    server: &mut Server,
    links: &mut [L],
    evaluator: Option<&Evaluator<'_>>,
) -> Result<FedOutcome> {
    let result = drive_rounds(server, links, evaluator);
    for l in links.iter_mut() {
        // Best effort: a failed session may already have lost some links.
        let _ = l.shutdown();
    }
    result?;
    Ok(FedOutcome {
        global: server.global().clone(),
        log: server.log().to_vec(),
    })
}

fn drive_rounds<L: Link>(
    server: &mut Server,
    links: &mut [L],
    evaluator: Option<&Evaluator<'_>>,
) -> Result<()> {
    while server.phase() != Phase::Done {
        let cfg = server.begin_round()?;
        let round = server.round();
        let mut updates = Vec::with_capacity(links.len());
        for (id, reply) in exchange_all(links, &cfg) {
            match reply.map_err(|e| round_failure(round, id, e))? {
                Message::FitResult(u) if u.client_id == id => updates.push(u),
                other => {
                    return Err(round_failure(
                        round,
                        id,
                        Error::Protocol(format!("expected FIT_RESULT, got {:?}", other.kind())),
                    ))
                }
            }
        }
        server.aggregate(updates)?;

        let req = server.eval_request()?;
        let mut evals = Vec::with_capacity(links.len());
        for (id, reply) in exchange_all(links, &req) {
            match reply.map_err(|e| round_failure(round, id, e))? {
                Message::EvalResult(e) if e.client_id == id && e.round == round => evals.push(e),
                other => {
                    return Err(round_failure(
                        round,
                        id,
                        Error::Protocol(format!("expected EVAL_RESULT, got {:?}", other.kind())),
                    ))
                }
            }
        }
        let global = match evaluator {
            Some(f) => f(server.global())?,
            None => Metrics::new(),
        };
        server.finish_round(evals, global)?;
    }
    Ok(())
}
