//! FFTAG/1, a UTF-8 line protocol standing in for the PLC's tag server.
//!
//! ```text
//! client: READ <tag>\n
//! client: SUBSCRIBE <tag> <interval_ms>\n
//! server: VALUE <tag> <int> <epoch_ms>\n
//! server: ERR <message>\n
//! ```
//!
//! A subscription answers immediately and then every `interval_ms` until
//! the client disconnects.

use crate::error::{Error, Result};

pub const DEFAULT_PORT: u16 = 14840;
pub const CYCLE_STATE_TAG: &str = "cycle_state";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Request {
    Read { tag: String },
    Subscribe { tag: String, interval_ms: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Response {
    Value { tag: String, value: i64, epoch_ms: u64 },
    Err(String),
}

/// Parses one request line (without or with its newline). The error is
/// the message to send back.
pub fn parse_request(line: &str) -> std::result::Result<Request, String> {
    let line = line.trim_end_matches(['\n', '\r']);
    let parts: Vec<&str> = line.split(' ').collect();
    match parts.as_slice() {
        ["READ", tag] if !tag.is_empty() => Ok(Request::Read { tag: tag.to_string() }),
        ["SUBSCRIBE", tag, ms] if !tag.is_empty() => match ms.parse::<u64>() {
            Ok(interval_ms) if interval_ms > 0 => Ok(Request::Subscribe {
                tag: tag.to_string(),
                interval_ms,
            }),
            _ => Err("bad interval".into()),
        },
        ["READ", ..] | ["SUBSCRIBE", ..] => Err("malformed request".into()),
        _ => Err("unknown command".into()),
    }
}

impl Request {
    pub fn encode(&self) -> String {
        match self {
            Request::Read { tag } => format!("READ {tag}\n"),
            Request::Subscribe { tag, interval_ms } => format!("SUBSCRIBE {tag} {interval_ms}\n"),
        }
    }
}

impl Response {
    pub fn encode(&self) -> String {
        match self {
            Response::Value { tag, value, epoch_ms } => format!("VALUE {tag} {value} {epoch_ms}\n"),
            Response::Err(msg) => format!("ERR {msg}\n"),
        }
    }

    /// Parses a complete response line; a missing newline is a protocol error.
    pub fn parse(line: &str) -> Result<Response> {
        let body = line
            .strip_suffix('\n')
            .ok_or_else(|| Error::Protocol(format!("unterminated line {line:?}")))?;
        if let Some(msg) = body.strip_prefix("ERR ") {
            return Ok(Response::Err(msg.to_string()));
        }
        let parts: Vec<&str> = body.split(' ').collect();
        match parts.as_slice() {
            ["VALUE", tag, v, ms] => {
                let value = v.parse().map_err(|_| Error::Protocol(format!("bad value in {body:?}")))?;
                let epoch_ms = ms.parse().map_err(|_| Error::Protocol(format!("bad timestamp in {body:?}")))?;
                Ok(Response::Value {
                    tag: tag.to_string(),
                    value,
                    epoch_ms,
                })
            }
            _ => Err(Error::Protocol(format!("unrecognized response {body:?}"))),
        }
    }
}
