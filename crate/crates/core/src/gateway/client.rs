use std::io::{BufRead, BufReader, ErrorKind, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::time::Duration;

use super::protocol::{Request, Response};
use crate::error::{Error, Result};
use crate::types::CycleState;

const CONNECT_TIMEOUT: Duration = Duration::from_secs(1);
const RETRY_HINT_MS: u64 = 100;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TagReading {
    pub tag: String,
    pub value: CycleState,
    pub server_time_ms: u64,
}

fn transport(message: String) -> Error {
    Error::Transport {
        message,
        retry_after_ms: RETRY_HINT_MS,
    }
}

fn connect(address: &str, read_timeout: Duration) -> Result<TcpStream> {
    let addrs = address
        .to_socket_addrs()
        .map_err(|e| transport(format!("cannot resolve {address}: {e}")))?;
    let mut last = None;
    for a in addrs {
        match TcpStream::connect_timeout(&a, CONNECT_TIMEOUT) {
            Ok(s) => {
                s.set_read_timeout(Some(read_timeout))?;
                s.set_nodelay(true)?;
                return Ok(s);
            }
            Err(e) => last = Some(e),
        }
    }
    Err(transport(match last {
        Some(e) => format!("cannot connect to {address}: {e}"),
        None => format!("{address} resolved to no address"),
    }))
}

fn read_response(reader: &mut BufReader<TcpStream>, tag: &str) -> Result<TagReading> {
    let mut line = String::new();
    match reader.read_line(&mut line) {
        Ok(0) => return Err(transport("connection closed by server".into())),
        Ok(_) if !line.ends_with('\n') => return Err(transport("connection closed mid-line".into())),
        Ok(_) => {}
        Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {
            return Err(transport("timed out waiting for the server".into()))
        }
        Err(e) => return Err(transport(format!("read failed: {e}"))),
    }
    match Response::parse(&line)? {
        Response::Err(msg) => Err(Error::Protocol(format!("server error: {msg}"))),
        Response::Value { tag: t, value, epoch_ms } => {
            if t != tag {
                return Err(Error::Protocol(format!("asked for {tag}, got {t}")));
            }
            let value = u8::try_from(value)
                .ok()
                .and_then(|v| CycleState::new(v).ok())
                .ok_or_else(|| Error::Protocol(format!("state {value} outside 1..=21")))?;
            Ok(TagReading {
                tag: t,
                value,
                server_time_ms: epoch_ms,
            })
        }
    }
}

/// One-shot read of `tag`.
pub fn read_tag(address: &str, tag: &str) -> Result<TagReading> {
    let mut s = connect(address, Duration::from_secs(2))?;
    s.write_all(Request::Read { tag: tag.into() }.encode().as_bytes())
        .map_err(|e| transport(format!("write failed: {e}")))?;
    read_response(&mut BufReader::new(s), tag)
}

/// Stream of readings pushed by the server. After the first error the
/// iterator is exhausted.
pub struct Subscription {
    reader: BufReader<TcpStream>,
    tag: String,
    done: bool,
}

pub fn subscribe_tag(address: &str, tag: &str, interval_ms: u64) -> Result<Subscription> {
    let timeout = Duration::from_millis((interval_ms * 10).max(2000));
    let mut s = connect(address, timeout)?;
    s.write_all(
        Request::Subscribe {
            tag: tag.into(),
            interval_ms,
        }
        .encode()
        .as_bytes(),
    )
    .map_err(|e| transport(format!("write failed: {e}")))?;
    Ok(Subscription {
        reader: BufReader::new(s),
        tag: tag.into(),
        done: false,
    })
}

impl Iterator for Subscription {
    type Item = Result<TagReading>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let r = read_response(&mut self.reader, &self.tag);
        self.done = r.is_err();
        Some(r)
    }
}
