//! Online inference: watch the PLC's cycle state, capture a frame on each
//! entry into a camera state, classify it and append the result to a log.
//!
//! Three threads connected by bounded queues: the tag subscriber, the
//! capture/inference stage and the log writer (the caller's thread, sole
//! owner of the log file).

pub mod client;
pub mod log;
pub mod plc;
pub mod protocol;

use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{sync_channel, Receiver, SyncSender};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nnet::{model_id, predict_one, prepare_input, ModelParams};
use crate::ontology::{verify, OntologySpec};
use crate::preprocess::{crop, RoiDetector};
use crate::raster::ImageRaster;
use crate::synthgen::{default_class_fractions, sample_seed, splitmix64, Renderer, SceneConfig};
use crate::types::{AnomalyClass, CycleState, NUM_CLASSES};

pub use client::{read_tag, subscribe_tag, Subscription, TagReading};
pub use log::{append_entry, append_record, read_log, DetectionRecord, ErrorRecord, LogContents, LogEntry, LogWriter};
pub use plc::{Clock, PlcServer, SteppingClock, SystemClock};
pub use protocol::{CYCLE_STATE_TAG, DEFAULT_PORT};

/// Camera stand-in: yields the frame seen at a given cycle and state.
pub trait FrameSource: Send {
    fn capture(&mut self, cycle_index: u64, state: CycleState) -> Result<ImageRaster>;
}

/// Renders generator frames with a label drawn per (cycle, state) from the
/// given class fractions.
pub struct SyntheticFrameSource {
    renderer: Renderer,
    seed: u64,
    fractions: [f64; NUM_CLASSES],
}

impl SyntheticFrameSource {
    pub fn new(scene: SceneConfig, seed: u64) -> Result<Self> {
        Ok(SyntheticFrameSource {
            renderer: Renderer::new(scene)?,
            seed,
            fractions: default_class_fractions(),
        })
    }

    fn frame_seed(&self, cycle_index: u64, state: CycleState) -> u64 {
        sample_seed(self.seed, cycle_index * 32 + state.value() as u64)
    }

    /// Ground-truth class of the frame at (cycle, state).
    pub fn label_for(&self, cycle_index: u64, state: CycleState) -> AnomalyClass {
        let u = (splitmix64(self.frame_seed(cycle_index, state)) >> 11) as f64 / (1u64 << 53) as f64;
        let mut acc = 0.0;
        for (c, f) in self.fractions.iter().enumerate() {
            acc += f;
            if u < acc {
                return AnomalyClass::ALL[c];
            }
        }
        AnomalyClass::NoAnomaly
    }
}

impl FrameSource for SyntheticFrameSource {
    fn capture(&mut self, cycle_index: u64, state: CycleState) -> Result<ImageRaster> {
        let label = self.label_for(cycle_index, state);
        let (img, _) = self
            .renderer
            .render_frame(cycle_index, state, label, self.frame_seed(cycle_index, state))?;
        Ok(img)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewayConfig {
    pub plc_address: String,
    pub poll_interval_ms: u64,
    pub backoff_initial_ms: u64,
    pub backoff_max_ms: u64,
    /// Consecutive failed connection attempts before giving up.
    pub retry_budget: u32,
    /// Stop once the PLC starts cycle `max_cycles + 1`; run forever if unset.
    pub max_cycles: Option<u64>,
    pub queue_capacity: usize,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            plc_address: format!("127.0.0.1:{DEFAULT_PORT}"),
            poll_interval_ms: 20,
            backoff_initial_ms: 100,
            backoff_max_ms: 5_000,
            retry_budget: 10,
            max_cycles: None,
            queue_capacity: 16,
        }
    }
}

impl GatewayConfig {
    /// Delay before reconnect attempt `attempt` (0-based).
    pub fn backoff(&self, attempt: u32) -> Duration {
        let ms = self
            .backoff_initial_ms
            .saturating_mul(1u64 << attempt.min(32))
            .min(self.backoff_max_ms);
        Duration::from_millis(ms)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatewaySummary {
    pub records: usize,
    pub errors: usize,
    pub cycles: u64,
    pub reconnects: usize,
}

/// Tracks cycle wraps and detects entries into camera states.
#[derive(Debug, Clone, Default)]
pub struct EdgeTrigger {
    prev: Option<CycleState>,
    cycle_index: u64,
}

impl EdgeTrigger {
    pub fn new() -> Self {
        EdgeTrigger::default()
    }

    /// Feeds one reading; returns `(cycle_index, state)` when it is an entry
    /// into state 4 or 9.
    pub fn observe(&mut self, state: CycleState) -> Option<(u64, CycleState)> {
        let entered = match self.prev {
            None => {
                self.cycle_index = 1;
                true
            }
            Some(p) if state < p => {
                self.cycle_index += 1;
                true
            }
            Some(p) => state != p,
        };
        self.prev = Some(state);
        (entered && matches!(state.value(), 4 | 9)).then_some((self.cycle_index, state))
    }

    pub fn cycle_index(&self) -> u64 {
        self.cycle_index
    }
}

enum Tick {
    Reading(TagReading, Instant),
    Fatal(Error),
}

enum Out {
    Entry(LogEntry),
    Fatal(Error),
}

fn subscriber(cfg: GatewayConfig, stop: Arc<AtomicBool>, tx: SyncSender<Tick>) -> usize {
    let mut failures = 0u32;
    let mut reconnects = 0;
    while !stop.load(Ordering::SeqCst) {
        let err = match subscribe_tag(&cfg.plc_address, CYCLE_STATE_TAG, cfg.poll_interval_ms) {
            Ok(sub) => {
                let mut last_err = None;
                for r in sub {
                    match r {
                        Ok(reading) => {
                            failures = 0;
                            if tx.send(Tick::Reading(reading, Instant::now())).is_err() || stop.load(Ordering::SeqCst) {
                                return reconnects;
                            }
                        }
                        Err(e) => last_err = Some(e),
                    }
                }
                last_err.unwrap_or_else(|| Error::Protocol("subscription ended".into()))
            }
            Err(e) => e,
        };
        if failures >= cfg.retry_budget {
            let _ = tx.send(Tick::Fatal(Error::Transport {
                message: format!("PLC unreachable after {failures} attempts: {err}"),
                retry_after_ms: 0,
            }));
            return reconnects;
        }
        let wait = cfg.backoff(failures);
        failures += 1;
        reconnects += 1;
        let until = Instant::now() + wait;
        while Instant::now() < until {
            if stop.load(Ordering::SeqCst) {
                return reconnects;
            }
            thread::sleep(Duration::from_millis(5).min(until - Instant::now()));
        }
    }
    reconnects
}

/// Everything the inference stage needs, read-only.
pub struct Pipeline {
    pub model: Arc<ModelParams>,
    pub model_id: String,
    pub ontology: Arc<OntologySpec>,
    pub detector: Arc<RoiDetector>,
}

impl Pipeline {
    pub fn new(model: ModelParams, ontology: OntologySpec, detector: RoiDetector) -> Self {
        Pipeline {
            model_id: model_id(&model),
            model: Arc::new(model),
            ontology: Arc::new(ontology),
            detector: Arc::new(detector),
        }
    }

    /// Detect, crop, resize, classify and verify one frame.
    pub fn process(
        &self,
        frame: &ImageRaster,
        ts_ms: u64,
        cycle_index: u64,
        state: CycleState,
        started: Instant,
    ) -> Result<DetectionRecord> {
        let loc = self.detector.locate(frame, state)?;
        let roi = crop(frame, &loc.crop_rect)?;
        let a = self.model.arch;
        let input = prepare_input(&roi, a.in_width, a.in_height)?;
        let (predicted_class, probs) = predict_one(&self.model, &input)?;
        let verdict = verify(state, predicted_class, &self.ontology);
        Ok(DetectionRecord {
            ts_ms,
            cycle_index,
            cycle_state: state,
            predicted_class,
            probs,
            bbox: loc.bbox,
            verdict,
            latency_ms: started.elapsed().as_secs_f64() * 1e3,
            model_id: self.model_id.clone(),
        })
    }
}

fn inference(
    pipeline: Pipeline,
    mut frames: Box<dyn FrameSource>,
    max_cycles: Option<u64>,
    stop: Arc<AtomicBool>,
    rx: Receiver<Tick>,
    tx: SyncSender<Out>,
) -> u64 {
    let mut trigger = EdgeTrigger::new();
    for tick in rx {
        let (reading, at) = match tick {
            Tick::Reading(r, at) => (r, at),
            Tick::Fatal(e) => {
                let _ = tx.send(Out::Fatal(e));
                break;
            }
        };
        let hit = trigger.observe(reading.value);
        if max_cycles.is_some_and(|m| trigger.cycle_index() > m) {
            break;
        }
        let Some((cycle_index, state)) = hit else { continue };
        let entry = frames
            .capture(cycle_index, state)
            .and_then(|f| pipeline.process(&f, reading.server_time_ms, cycle_index, state, at));
        let entry = match entry {
            Ok(r) => LogEntry::Detection(r),
            Err(e) => LogEntry::Error(ErrorRecord {
                ts_ms: reading.server_time_ms,
                cycle_index,
                cycle_state: state,
                error: e.to_string(),
            }),
        };
        if tx.send(Out::Entry(entry)).is_err() {
            break;
        }
    }
    stop.store(true, Ordering::SeqCst);
    trigger.cycle_index().min(max_cycles.unwrap_or(u64::MAX))
}

/// Runs until `max_cycles` is reached, `stop` is raised, or the PLC stays
/// unreachable past the retry budget (an error).
pub fn run_gateway(
    cfg: &GatewayConfig,
    frames: Box<dyn FrameSource>,
    pipeline: Pipeline,
    log_path: impl AsRef<Path>,
    stop: Arc<AtomicBool>,
) -> Result<GatewaySummary> {
    if cfg.poll_interval_ms == 0 || cfg.queue_capacity == 0 {
        return Err(Error::invalid("poll_interval_ms and queue_capacity must be positive"));
    }
    let mut writer = LogWriter::open(log_path)?;
    let (tick_tx, tick_rx) = sync_channel(cfg.queue_capacity);
    let (out_tx, out_rx) = sync_channel(cfg.queue_capacity);

    let sub = {
        let (cfg, stop) = (cfg.clone(), Arc::clone(&stop));
        thread::spawn(move || subscriber(cfg, stop, tick_tx))
    };
    let inf = {
        let stop = Arc::clone(&stop);
        let max = cfg.max_cycles;
        thread::spawn(move || inference(pipeline, frames, max, stop, tick_rx, out_tx))
    };

    let mut summary = GatewaySummary::default();
    let mut fatal = None;
    let mut write_err = None;
    for out in out_rx {
        match out {
            Out::Entry(e) => {
                if let Err(err) = writer.append(&e) {
                    write_err = Some(err);
                    stop.store(true, Ordering::SeqCst);
                    break;
                }
                match e {
                    LogEntry::Detection(_) => summary.records += 1,
                    LogEntry::Error(_) => summary.errors += 1,
                }
            }
            Out::Fatal(e) => fatal = Some(e),
        }
    }
    stop.store(true, Ordering::SeqCst);
    summary.cycles = inf.join().unwrap_or(0);
    summary.reconnects = sub.join().unwrap_or(0);
    match fatal.or(write_err) {
        Some(e) => Err(e),
        None => Ok(summary),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn st(v: u8) -> CycleState {
        CycleState::new(v).unwrap()
    }

    #[test]
    fn edge_trigger_counts_entries_not_dwell() {
        let mut t = EdgeTrigger::new();
        let trace = [1, 2, 3, 4, 4, 4, 5, 8, 9, 9, 10, 21, 1, 4, 9, 9, 2, 3, 4];
        let hits: Vec<(u64, u8)> = trace
            .iter()
            .filter_map(|&s| t.observe(st(s)).map(|(c, s)| (c, s.value())))
            .collect();
        assert_eq!(hits, vec![(1, 4), (1, 9), (2, 4), (2, 9), (3, 4)]);

        let mut stuck = EdgeTrigger::new();
        assert!((0..100).all(|_| stuck.observe(st(7)).is_none()));
    }

    #[test]
    fn backoff_doubles_and_caps() {
        let c = GatewayConfig::default();
        let ms: Vec<u128> = (0..8).map(|i| c.backoff(i).as_millis()).collect();
        assert_eq!(ms, vec![100, 200, 400, 800, 1600, 3200, 5000, 5000]);
    }

    #[test]
    fn synthetic_labels_follow_fractions() {
        let src = SyntheticFrameSource::new(SceneConfig::default(), 3).unwrap();
        let mut counts = [0usize; 5];
        for c in 1..=2000 {
            counts[src.label_for(c, st(4)).index()] += 1;
        }
        let share = counts[0] as f64 / 2000.0;
        assert!((share - 0.6426).abs() < 0.05, "{counts:?}");
        assert_eq!(src.label_for(7, st(9)), src.label_for(7, st(9)));
    }

    #[test]
    fn unreachable_plc_is_fatal() {
        let addr = {
            let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
            l.local_addr().unwrap().to_string()
        };
        let cfg = GatewayConfig {
            plc_address: addr,
            backoff_initial_ms: 1,
            backoff_max_ms: 4,
            retry_budget: 3,
            ..Default::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let scene = SceneConfig {
            width: 64,
            height: 64,
            ..Default::default()
        };
        let pipeline = Pipeline::new(
            ModelParams::init(crate::nnet::Architecture::simple_cnn(16, 16), 1).unwrap(),
            OntologySpec::default_spec(),
            RoiDetector::synthetic(&scene, 0.6).unwrap(),
        );
        let frames = Box::new(SyntheticFrameSource::new(scene, 1).unwrap());
        let r = run_gateway(&cfg, frames, pipeline, dir.path().join("log"), Arc::new(AtomicBool::new(false)));
        assert!(matches!(r, Err(Error::Transport { .. })), "{r:?}");
    }
}
