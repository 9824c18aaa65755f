//! Length-prefixed binary framing for the server/client session.
//!
//! Frame: `DPFL` | version | type | payload length (u32 LE) | payload.
//! No message carries dataset rows; clients only ever send weights and
//! scalar metrics.

use std::io::{Read, Write};

use crate::bytes::Reader;
use crate::dp::{NoiseSpec, PrivacySpec, Sampling};
use crate::error::{Error, Result};
use crate::nn::{read_params, write_params, ModelParams};
use crate::optim::OptimizerKind;
use crate::train::TrainConfig;

pub const MAGIC: [u8; 4] = *b"DPFL";
pub const VERSION: u8 = 0x01;
pub const HEADER_LEN: usize = 10;
/// Upper bound on a single payload; protects against hostile length fields.
pub const MAX_PAYLOAD: u32 = 1 << 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum MessageType {
    Hello = 0x01,
    RoundConfig = 0x02,
    FitResult = 0x03,
    EvalRequest = 0x04,
    EvalResult = 0x05,
    Shutdown = 0x06,
}

impl TryFrom<u8> for MessageType {
    type Error = Error;

    fn try_from(b: u8) -> Result<Self> {
        Ok(match b {
            0x01 => Self::Hello,
            0x02 => Self::RoundConfig,
            0x03 => Self::FitResult,
            0x04 => Self::EvalRequest,
            0x05 => Self::EvalResult,
            0x06 => Self::Shutdown,
            _ => return Err(Error::Decode(format!("unknown message type 0x{b:02x}"))),
        })
    }
}

/// Ordered key/value scalars. Order is preserved on the wire.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Metrics(pub Vec<(String, f64)>);

impl Metrics {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, key: &str, value: f64) -> Self {
        self.insert(key, value);
        self
    }

    /// Replaces an existing key in place or appends.
    pub fn insert(&mut self, key: &str, value: f64) {
        match self.0.iter_mut().find(|(k, _)| k == key) {
            Some(e) => e.1 = value,
            None => self.0.push((key.to_string(), value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.0.iter().find(|(k, _)| k == key).map(|e| e.1)
    }

    fn require(&self, key: &str) -> Result<f64> {
        self.get(key)
            .ok_or_else(|| Error::Decode(format!("missing hyperparameter `{key}`")))
    }
}

/// Training settings the server pushes to every client each round.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hyperparams {
    pub local_epochs: u32,
    pub total_rounds: u32,
    pub train: TrainConfig,
    /// `None` trains without privacy.
    pub privacy: Option<PrivacySpec>,
}

impl Hyperparams {
    pub fn to_metrics(&self) -> Metrics {
        let mut m = Metrics::new()
            .with("local_epochs", f64::from(self.local_epochs))
            .with("total_rounds", f64::from(self.total_rounds))
            .with("batch_size", self.train.batch_size as f64)
            .with("lr", self.train.lr)
            .with(
                "optimizer",
                match self.train.optimizer {
                    OptimizerKind::Sgd => 0.0,
                    OptimizerKind::Adam => 1.0,
                },
            )
            .with("dropout", self.train.dropout);
        if let Some(p) = &self.privacy {
            match p.noise {
                NoiseSpec::TargetEpsilon(e) => m.insert("target_epsilon", e),
                NoiseSpec::Multiplier(s) => m.insert("noise_multiplier", s),
            }
            m.insert("delta", p.delta);
            m.insert("clip_norm", p.clip_norm);
            m.insert(
                "sampling",
                match p.sampling {
                    Sampling::Poisson => 0.0,
                    Sampling::Fixed => 1.0,
                },
            );
        }
        m
    }

    pub fn from_metrics(m: &Metrics) -> Result<Self> {
        let count = |key: &str| -> Result<u32> {
            let v = m.require(key)?;
            if v.fract() != 0.0 || !(0.0..=f64::from(u32::MAX)).contains(&v) {
                return Err(Error::Decode(format!("`{key}` = {v} is not a count")));
            }
            Ok(v as u32)
        };
        let optimizer = match m.require("optimizer")? {
            0.0 => OptimizerKind::Sgd,
            1.0 => OptimizerKind::Adam,
            v => return Err(Error::Decode(format!("unknown optimizer code {v}"))),
        };
        let noise = match (m.get("target_epsilon"), m.get("noise_multiplier")) {
            (None, None) => None,
            (Some(e), None) => Some(NoiseSpec::TargetEpsilon(e)),
            (None, Some(s)) => Some(NoiseSpec::Multiplier(s)),
            (Some(_), Some(_)) => {
                return Err(Error::Decode(
                    "both target_epsilon and noise_multiplier set".into(),
                ))
            }
        };
        let privacy = match noise {
            None => None,
            Some(noise) => Some(PrivacySpec {
                noise,
                delta: m.require("delta")?,
                clip_norm: m.require("clip_norm")?,
                sampling: match m.require("sampling")? {
                    0.0 => Sampling::Poisson,
                    1.0 => Sampling::Fixed,
                    v => return Err(Error::Decode(format!("unknown sampling code {v}"))),
                },
            }),
        };
        Ok(Self {
            local_epochs: count("local_epochs")?,
            total_rounds: count("total_rounds")?,
            train: TrainConfig {
                batch_size: count("batch_size")? as usize,
                lr: m.require("lr")?,
                optimizer,
                dropout: m.require("dropout")?,
            },
            privacy,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundConfig {
    pub round: u32,
    pub hyper: Hyperparams,
    pub weights: ModelParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: u32,
    pub round: u32,
    pub num_examples: u32,
    pub metrics: Metrics,
    pub weights: ModelParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub client_id: u32,
    pub round: u32,
    pub num_examples: u32,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    /// Client registration; the server echoes it back as the acknowledgement.
    Hello {
        client_id: u32,
    },
    RoundConfig(RoundConfig),
    FitResult(ClientUpdate),
    EvalRequest {
        round: u32,
        weights: ModelParams,
    },
    EvalResult(EvalReport),
    Shutdown,
}

impl Message {
    pub fn kind(&self) -> MessageType {
        match self {
            Message::Hello { .. } => MessageType::Hello,
            Message::RoundConfig(_) => MessageType::RoundConfig,
            Message::FitResult(_) => MessageType::FitResult,
            Message::EvalRequest { .. } => MessageType::EvalRequest,
            Message::EvalResult(_) => MessageType::EvalResult,
            Message::Shutdown => MessageType::Shutdown,
        }
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn write_metrics(m: &Metrics, out: &mut Vec<u8>) -> Result<()> {
    let count = u32::try_from(m.0.len()).map_err(|_| Error::Protocol("too many metrics".into()))?;
    put_u32(out, count);
    for (k, v) in &m.0 {
        let len = u16::try_from(k.len())
            .map_err(|_| Error::Protocol(format!("metric key of {} bytes is too long", k.len())))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(k.as_bytes());
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

fn read_metrics(r: &mut Reader<'_>) -> Result<Metrics> {
    let count = r.u32()? as usize;
    // Each entry takes at least 10 bytes; reject impossible counts before allocating.
    if count > r.remaining() / 10 {
        return Err(Error::Decode(format!(
            "metric count {count} exceeds payload"
        )));
    }
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u16()? as usize;
        let key = std::str::from_utf8(r.take(len)?)
            .map_err(|e| Error::Decode(format!("metric key is not UTF-8: {e}")))?
            .to_string();
        entries.push((key, r.f64()?));
    }
    Ok(Metrics(entries))
}

fn encode_payload(msg: &Message) -> Result<Vec<u8>> {
    let mut p = Vec::new();
    match msg {
        Message::Hello { client_id } => put_u32(&mut p, *client_id),
        Message::RoundConfig(c) => {
            put_u32(&mut p, c.round);
            write_metrics(&c.hyper.to_metrics(), &mut p)?;
            write_params(&c.weights, &mut p);
        }
        Message::FitResult(u) => {
            put_u32(&mut p, u.client_id);
            put_u32(&mut p, u.round);
            put_u32(&mut p, u.num_examples);
            write_metrics(&u.metrics, &mut p)?;
            write_params(&u.weights, &mut p);
        }
        Message::EvalRequest { round, weights } => {
            put_u32(&mut p, *round);
            write_params(weights, &mut p);
        }
        Message::EvalResult(e) => {
            put_u32(&mut p, e.client_id);
            put_u32(&mut p, e.round);
            put_u32(&mut p, e.num_examples);
            write_metrics(&e.metrics, &mut p)?;
        }
        Message::Shutdown => {}
    }
    Ok(p)
}

pub fn encode_message(msg: &Message) -> Result<Vec<u8>> {
    let payload = encode_payload(msg)?;
    let len = u32::try_from(payload.len())
        .ok()
        .filter(|&l| l <= MAX_PAYLOAD)
        .ok_or_else(|| {
            Error::Protocol(format!("payload of {} bytes is too large", payload.len()))
        })?;
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(msg.kind() as u8);
    put_u32(&mut out, len);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Validates a frame header and returns the message type and payload length.
pub fn decode_header(h: &[u8; HEADER_LEN]) -> Result<(MessageType, u32)> {
    if h[..4] != MAGIC {
        return Err(Error::Decode(format!("bad magic {:?}", &h[..4])));
    }
    if h[4] != VERSION {
        return Err(Error::Decode(format!("unsupported version {}", h[4])));
    }
    let kind = MessageType::try_from(h[5])?;
    let len = u32::from_le_bytes(h[6..10].try_into().unwrap());
    if len > MAX_PAYLOAD {
        return Err(Error::Decode(format!("payload length {len} exceeds limit")));
    }
    Ok((kind, len))
}

pub fn decode_payload(kind: MessageType, payload: &[u8]) -> Result<Message> {
    let mut r = Reader::new(payload);
    let msg = match kind {
        MessageType::Hello => Message::Hello {
            client_id: r.u32()?,
        },
        MessageType::RoundConfig => Message::RoundConfig(RoundConfig {
            round: r.u32()?,
            hyper: Hyperparams::from_metrics(&read_metrics(&mut r)?)?,
            weights: read_params(&mut r)?,
        }),
        MessageType::FitResult => Message::FitResult(ClientUpdate {
            client_id: r.u32()?,
            round: r.u32()?,
            num_examples: r.u32()?,
            metrics: read_metrics(&mut r)?,
            weights: read_params(&mut r)?,
        }),
        MessageType::EvalRequest => Message::EvalRequest {
            round: r.u32()?,
            weights: read_params(&mut r)?,
        },
        MessageType::EvalResult => Message::EvalResult(EvalReport {
            client_id: r.u32()?,
            round: r.u32()?,
            num_examples: r.u32()?,
            metrics: read_metrics(&mut r)?,
        }),
        MessageType::Shutdown => Message::Shutdown,
    };
    r.finish()?;
    Ok(msg)
}

/// Decodes exactly one frame; the buffer must contain nothing else.
pub fn decode_message(bytes: &[u8]) -> Result<Message> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Decode(format!(
            "frame of {} bytes is shorter than the header",
            bytes.len()
        )));
    }
    let (kind, len) = decode_header(bytes[..HEADER_LEN].try_into().unwrap())?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != len as usize {
        return Err(Error::Decode(format!(
            "length field says {len} bytes, frame carries {}",
            payload.len()
        )));
    }
    decode_payload(kind, payload)
}

pub fn write_message(w: &mut impl Write, msg: &Message) -> Result<()> {
    w.write_all(&encode_message(msg)?)?;
    w.flush()?;
    Ok(())
}

pub fn read_message(r: &mut impl Read) -> Result<Message> {
    let mut h = [0u8; HEADER_LEN];
    r.read_exact(&mut h)?;
    let (kind, len) = decode_header(&h)?;
    let mut payload = vec![0u8; len as usize];
    r.read_exact(&mut payload)?;
    decode_payload(kind, &payload)
}
