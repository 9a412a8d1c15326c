use std::sync::atomic::AtomicBool;
use std::sync::Arc;

use assemai::gateway::plc::{PlcServer, SystemClock};
use assemai::gateway::{self, GatewayConfig, Pipeline, SyntheticFrameSource};
use assemai::nnet::{Architecture, ModelParams};
use assemai::ontology::OntologySpec;
use assemai::preprocess::{detect::DEFAULT_DETECTION_THRESHOLD, CycleTiming, RoiDetector};
use assemai::synthgen::SceneConfig;

#[test]
fn one_cycle_gives_one_record_per_camera_state() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("detections.jsonl");
    let scene = SceneConfig::default();
    let model = ModelParams::init(Architecture::simple_cnn(64, 64), 2).unwrap();
    let detector = RoiDetector::synthetic(&scene, DEFAULT_DETECTION_THRESHOLD).unwrap();
    let pipeline = Pipeline::new(model, OntologySpec::default_spec(), detector);
    let frames = Box::new(SyntheticFrameSource::new(scene, 5).unwrap());
    let server = PlcServer::start(CycleTiming::uniform(1050).unwrap(), "127.0.0.1:0", Arc::new(SystemClock)).unwrap();
    let cfg = GatewayConfig {
        plc_address: server.local_addr().to_string(),
        poll_interval_ms: 10,
        max_cycles: Some(1),
        ..GatewayConfig::default()
    };
    let summary = gateway::run_gateway(&cfg, frames, pipeline, &log, Arc::new(AtomicBool::new(false))).unwrap();
    server.shutdown();

    let recs = gateway::read_log(&log).unwrap().records;
    assert_eq!(summary.records, 2);
    let states: Vec<u8> = recs.iter().map(|r| r.cycle_state.value()).collect();
    assert_eq!(states, vec![4, 9]);
    assert!(recs.iter().all(|r| r.cycle_index == 1));
}
