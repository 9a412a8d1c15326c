//! Simulated PLC: serves the `cycle_state` tag over FFTAG/1, advancing
//! through the cycle according to a [`CycleTiming`] from server start.

use std::io::{BufRead, BufReader, ErrorKind, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use super::protocol::{parse_request, Request, Response, CYCLE_STATE_TAG};
use crate::error::{Error, Result};
use crate::preprocess::{map_timestamp_to_state, CycleTiming};

/// Millisecond time source for the server.
pub trait Clock: Send + Sync {
    fn now_ms(&self) -> u64;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0)
    }
}

/// Returns `start`, `start + step`, `start + 2·step`, … on successive
/// calls. Makes server output independent of wall time.
#[derive(Debug)]
pub struct SteppingClock {
    next: AtomicU64,
    step: u64,
}

impl SteppingClock {
    pub fn new(start: u64, step: u64) -> Self {
        SteppingClock {
            next: AtomicU64::new(start),
            step,
        }
    }
}

impl Clock for SteppingClock {
    fn now_ms(&self) -> u64 {
        self.next.fetch_add(self.step, Ordering::SeqCst)
    }
}

struct Shared {
    timing: CycleTiming,
    clock: Arc<dyn Clock>,
    start_ms: u64,
    stop: AtomicBool,
}

impl Shared {
    fn value_line(&self) -> String {
        let now = self.clock.now_ms();
        let (_, state) = map_timestamp_to_state(now.saturating_sub(self.start_ms), &self.timing);
        Response::Value {
            tag: CYCLE_STATE_TAG.into(),
            value: state.value() as i64,
            epoch_ms: now,
        }
        .encode()
    }
}

const POLL: Duration = Duration::from_millis(10);

/// A running tag server. Dropping it stops the server.
pub struct PlcServer {
    addr: SocketAddr,
    shared: Arc<Shared>,
    accept: Option<JoinHandle<()>>,
}

impl PlcServer {
    /// Binds and starts serving. The clock is read once here to fix the
    /// cycle origin.
    pub fn start(timing: CycleTiming, bind: &str, clock: Arc<dyn Clock>) -> Result<Self> {
        timing.validate()?;
        let listener = TcpListener::bind(bind).map_err(|e| Error::Transport {
            message: format!("cannot bind {bind}: {e}"),
            retry_after_ms: 0,
        })?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let shared = Arc::new(Shared {
            start_ms: clock.now_ms(),
            timing,
            clock,
            stop: AtomicBool::new(false),
        });
        let s = Arc::clone(&shared);
        let accept = thread::spawn(move || accept_loop(listener, s));
        Ok(PlcServer {
            addr,
            shared,
            accept: Some(accept),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn start_ms(&self) -> u64 {
        self.shared.start_ms
    }

    /// Stops accepting, closes every connection and waits for the acceptor.
    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        self.shared.stop.store(true, Ordering::SeqCst);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for PlcServer {
    fn drop(&mut self) {
        self.stop();
    }
}

fn accept_loop(listener: TcpListener, shared: Arc<Shared>) {
    let mut workers = Vec::new();
    while !shared.stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, _)) => {
                let s = Arc::clone(&shared);
                workers.push(thread::spawn(move || {
                    let _ = serve_connection(stream, &s);
                }));
                workers.retain(|w| !w.is_finished());
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => thread::sleep(POLL),
            Err(_) => thread::sleep(POLL),
        }
    }
    for w in workers {
        let _ = w.join();
    }
}

fn serve_connection(stream: TcpStream, shared: &Shared) -> std::io::Result<()> {
    stream.set_nonblocking(false)?;
    stream.set_nodelay(true)?;
    stream.set_read_timeout(Some(POLL * 5))?;
    let mut writer = stream.try_clone()?;
    let mut reader = BufReader::new(stream);
    let mut line = String::new();
    loop {
        if shared.stop.load(Ordering::SeqCst) {
            return Ok(());
        }
        match reader.read_line(&mut line) {
            Ok(0) => return Ok(()),
            Ok(_) if !line.ends_with('\n') => continue,
            Ok(_) => {}
            Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => continue,
            Err(e) => return Err(e),
        }
        let req = parse_request(&line);
        line.clear();
        match req {
            Err(msg) => writer.write_all(Response::Err(msg).encode().as_bytes())?,
            Ok(Request::Read { tag } | Request::Subscribe { tag, .. }) if tag != CYCLE_STATE_TAG => {
                writer.write_all(Response::Err("unknown tag".into()).encode().as_bytes())?
            }
            Ok(Request::Read { .. }) => writer.write_all(shared.value_line().as_bytes())?,
            Ok(Request::Subscribe { interval_ms, .. }) => {
                // Streams until the peer goes away or the server stops.
                loop {
                    writer.write_all(shared.value_line().as_bytes())?;
                    let mut left = Duration::from_millis(interval_ms);
                    while !left.is_zero() {
                        if shared.stop.load(Ordering::SeqCst) {
                            return Ok(());
                        }
                        let d = left.min(POLL);
                        thread::sleep(d);
                        left -= d;
                    }
                }
            }
        }
    }
}
