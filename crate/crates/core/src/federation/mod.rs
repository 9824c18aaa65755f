//! Synchronous FedAvg: wire protocol, coordinator state machine, client
//! runner, and two deployments (TCP sockets and in-process simulation) that
//! share one round driver.

mod aggregate;
mod client;
pub mod protocol;
mod server;

use std::net::{TcpListener, TcpStream, ToSocketAddrs};

pub use aggregate::fedavg_aggregate;
pub use client::{ClientRunner, SessionReport};
pub use protocol::{
    decode_message, encode_message, read_message, write_message, ClientUpdate, EvalReport,
    Hyperparams, Message, MessageType, Metrics, RoundConfig,
};
pub use server::{
    drive, Evaluator, FedConfig, FedOutcome, FitRecord, Link, Phase, RoundRecord, Server,
};

use crate::error::{Error, Result};

/// A client living in the same process as the server.
struct InProcess(ClientRunner);

impl Link for InProcess {
    fn client_id(&self) -> u32 {
        self.0.id()
    }

    fn exchange(&mut self, msg: &Message) -> Result<Message> {
        self.0
            .handle(msg.clone())?
            .ok_or_else(|| Error::Protocol("client ended the session early".into()))
    }

    fn shutdown(&mut self) -> Result<()> {
        self.0.handle(Message::Shutdown).map(|_| ())
    }
}

/// Runs server and clients in one process. Given the same clients and seeds,
/// the result is bit-identical to [`run_server`] with remote [`run_client`]s.
pub fn simulate(
    cfg: &FedConfig,
    clients: Vec<ClientRunner>,
    evaluator: Option<&Evaluator<'_>>,
) -> Result<(FedOutcome, Vec<SessionReport>)> {
    if clients.len() != cfg.clients {
        return Err(Error::Config(format!(
            "configured for {} clients, got {}",
            cfg.clients,
            clients.len()
        )));
    }
    let mut server = Server::new(cfg.clone())?;
    for c in &clients {
        server.register(c.id())?;
    }
    let mut links: Vec<InProcess> = clients.into_iter().map(InProcess).collect();
    let outcome = drive(&mut server, &mut links, evaluator)?;
    Ok((
        outcome,
        links.into_iter().map(|l| l.0.report().clone()).collect(),
    ))
}

struct TcpLink {
    id: u32,
    stream: TcpStream,
}

impl Link for TcpLink {
    fn client_id(&self) -> u32 {
        self.id
    }

    fn exchange(&mut self, msg: &Message) -> Result<Message> {
        write_message(&mut self.stream, msg)?;
        read_message(&mut self.stream)
    }

    fn shutdown(&mut self) -> Result<()> {
        write_message(&mut self.stream, &Message::Shutdown)
    }
}

/// Accepts connections until K distinct clients said HELLO, then runs all
/// rounds. Connections with a malformed or duplicate HELLO are turned away.
pub fn run_server(
    listener: &TcpListener,
    cfg: &FedConfig,
    evaluator: Option<&Evaluator<'_>>,
) -> Result<FedOutcome> {
    let mut server = Server::new(cfg.clone())?;
    let mut links = Vec::with_capacity(cfg.clients);
    while server.phase() == Phase::WaitingForClients {
        let (mut stream, _) = listener.accept()?;
        stream.set_nodelay(true)?;
        let id = match read_message(&mut stream) {
            Ok(Message::Hello { client_id }) => client_id,
            _ => continue,
        };
        if server.register(id).is_err() {
            let _ = write_message(&mut stream, &Message::Shutdown);
            continue;
        }
        write_message(&mut stream, &Message::Hello { client_id: id })?;
        links.push(TcpLink { id, stream });
    }
    drive(&mut server, &mut links, evaluator)
}

fn lost(e: Error) -> Error {
    match e {
        Error::Io(io) => Error::Protocol(format!("connection lost: {io}")),
        other => other,
    }
}

/// Connects, registers, and serves rounds until SHUTDOWN.
pub fn run_client(addr: impl ToSocketAddrs, mut runner: ClientRunner) -> Result<SessionReport> {
    let mut stream =
        TcpStream::connect(addr).map_err(|e| Error::Protocol(format!("cannot connect: {e}")))?;
    stream.set_nodelay(true)?;
    write_message(&mut stream, &runner.hello()).map_err(lost)?;
    match read_message(&mut stream).map_err(lost)? {
        Message::Hello { client_id } if client_id == runner.id() => {}
        Message::Shutdown => {
            return Err(Error::Protocol(format!(
                "server rejected client id {}",
                runner.id()
            )));
        }
        other => {
            return Err(Error::Protocol(format!(
                "expected HELLO ack, got {:?}",
                other.kind()
            )))
        }
    }
    loop {
        let msg = read_message(&mut stream).map_err(lost)?;
        match runner.handle(msg)? {
            Some(reply) => write_message(&mut stream, &reply).map_err(lost)?,
            None => break,
        }
    }
    Ok(runner.report().clone())
}
