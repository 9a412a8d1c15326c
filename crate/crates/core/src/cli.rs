//! Command-line front end. [`run`] maps the outcome to an exit code:
//! 0 success, 1 usage error, 2 runtime error.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::AtomicBool;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::gateway::{self, GatewayConfig, Pipeline, PlcServer, SyntheticFrameSource, SystemClock};
use crate::nnet::{self, class_weights, ClassWeights, LabeledSet, MetricsReport, TrainConfig};
use crate::ontology::{self, audit_log, verify, OntologySpec};
use crate::preprocess::{self, CycleTiming, PreprocessOptions, RoiDetector, RoiMode};
use crate::raster::{read_raster, write_raster};
use crate::scorecam::{self, ConvLayer};
use crate::synthgen::{self, DatasetManifest, GenConfig, SceneConfig};
use crate::types::{AnomalyClass, CycleState};

pub const SEED_ENV: &str = "ASSEMAI_SEED";

#[derive(Debug, Parser)]
#[command(name = "assemai", version, about = "Synthetic assembly-line anomaly detection pipeline")]
pub struct Cli {
    /// Seed for every random choice. Overrides ASSEMAI_SEED and the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// JSON file with optional sections: gen, timing, preprocess, train, gateway.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a labelled synthetic frame corpus.
    Gen(GenArgs),
    /// Keep camera states, crop the ROI and report frame similarity.
    Preprocess(PreprocessArgs),
    /// Split a corpus and train the classifier.
    Train(TrainArgs),
    /// Score a model (or a predictions file) and write the metrics table.
    Eval(EvalArgs),
    /// Score-CAM heatmaps and in-box saliency statistics.
    Explain(ExplainArgs),
    /// Audit a detection log against the process ontology.
    Verify(VerifyArgs),
    /// Serve the simulated PLC cycle-state tag.
    PlcServe(PlcServeArgs),
    /// Run online inference against a PLC.
    Gateway(GatewayArgs),
    /// Summarize the artifacts found in the output directory.
    Report,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub count: Option<usize>,
    /// Frame size as WxH.
    #[arg(long, value_parser = parse_size)]
    pub image_size: Option<(usize, usize)>,
    #[arg(long)]
    pub clutter: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    /// Manifest written by `gen`.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value = "detect")]
    pub roi: RoiMode,
    /// Comma-separated states to keep.
    #[arg(long, value_delimiter = ',')]
    pub keep: Option<Vec<u8>>,
    /// Uniform cycle period used to recheck each frame's state.
    #[arg(long)]
    pub cycle_ms: Option<u64>,
    /// Accepted slice of the state-9 window, as `a,b` fractions.
    #[arg(long, value_delimiter = ',', num_args = 2)]
    pub subwindow: Option<Vec<f64>>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Classifier input as WxH.
    #[arg(long, value_parser = parse_size)]
    pub input_size: Option<(usize, usize)>,
    #[arg(long)]
    pub split: Option<f64>,
    /// Train with unit class weights.
    #[arg(long)]
    pub unweighted: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, required_unless_present = "predictions")]
    pub input: Option<PathBuf>,
    #[arg(long, required_unless_present = "predictions")]
    pub model: Option<PathBuf>,
    /// Split file from `train`; only its test part is scored.
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// JSON Lines of {"label": c, "predicted": c} to score instead of a model.
    #[arg(long, conflicts_with_all = ["input", "model"])]
    pub predictions: Option<PathBuf>,
    #[arg(long)]
    pub ontology: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[arg(long, default_value = "conv2")]
    pub layer: ConvLayer,
    /// Images to explain.
    #[arg(long, default_value_t = 20)]
    pub limit: usize,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long)]
    pub log: PathBuf,
    #[arg(long)]
    pub ontology: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PlcServeArgs {
    #[arg(long, default_value_t = format!("127.0.0.1:{}", gateway::DEFAULT_PORT))]
    pub bind: String,
    /// Uniform cycle period; the config's timing section wins when given.
    #[arg(long)]
    pub cycle_ms: Option<u64>,
    /// Stop after this long instead of running until killed.
    #[arg(long)]
    pub duration_ms: Option<u64>,
}

#[derive(Debug, Args)]
pub struct GatewayArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub plc: Option<String>,
    #[arg(long)]
    pub ontology: Option<PathBuf>,
    #[arg(long)]
    pub cycles: Option<u64>,
    /// Frame size of the synthetic camera, WxH.
    #[arg(long, value_parser = parse_size, default_value = "256x256")]
    pub frame_size: (usize, usize),
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected WxH, got {s:?}"))?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    let (w, h) = (p(w)?, p(h)?);
    if w == 0 || h == 0 {
        return Err("sizes must be positive".into());
    }
    Ok((w, h))
}

/// Optional sections of the `--config` file.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub gen: Option<GenConfig>,
    pub timing: Option<CycleTiming>,
    pub preprocess: Option<PreprocessOptions>,
    pub train: Option<TrainConfig>,
    pub gateway: Option<GatewayConfig>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::invalid(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Schema(vec![format!("{}: {e}", path.display())]))
    }
}

struct Ctx {
    seed_flag: Option<u64>,
    config: RunConfig,
    out: PathBuf,
    stdout: Vec<String>,
}

impl Ctx {
    /// Flag, then `ASSEMAI_SEED`, then the config value.
    fn seed(&self, from_config: u64) -> Result<u64> {
        if let Some(s) = self.seed_flag {
            return Ok(s);
        }
        match std::env::var(SEED_ENV) {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| Error::invalid(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
            Err(_) => Ok(from_config),
        }
    }

    fn out_dir(&self) -> Result<&Path> {
        fs::create_dir_all(&self.out)
            .map_err(|e| Error::invalid(format!("cannot create output directory {}: {e}", self.out.display())))?;
        Ok(&self.out)
    }

    fn wrote(&mut self, path: &Path) {
        self.stdout.push(format!("wrote {}", path.display()));
    }

    fn say(&mut self, line: impl Into<String>) {
        self.stdout.push(line.into());
    }
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::invalid(format!("{what} {} does not exist", path.display())))
    }
}

fn write_json<T: Serialize>(ctx: &mut Ctx, name: &str, value: &T) -> Result<PathBuf> {
    let path = ctx.out_dir()?.join(name);
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(&path, text)?;
    ctx.wrote(&path);
    Ok(path)
}

fn write_text(ctx: &mut Ctx, name: &str, text: &str) -> Result<PathBuf> {
    let path = ctx.out_dir()?.join(name);
    fs::write(&path, text)?;
    ctx.wrote(&path);
    Ok(path)
}

fn load_ontology_or_default(path: Option<&Path>) -> Result<OntologySpec> {
    match path {
        Some(p) => {
            require_file(p, "ontology")?;
            ontology::load_ontology(p)
        }
        None => Ok(OntologySpec::default_spec()),
    }
}

fn cmd_gen(ctx: &mut Ctx, a: &GenArgs) -> Result<()> {
    let mut cfg = ctx.config.gen.clone().unwrap_or_default();
    if let Some(t) = &ctx.config.timing {
        cfg.timing = t.clone();
    }
    if let Some(n) = a.count {
        cfg.total_count = n;
    }
    if let Some(s) = a.image_size {
        cfg.image_size = s;
    }
    if let Some(c) = a.clutter {
        cfg.clutter_count = c;
    }
    if let Some(n) = a.noise {
        cfg.noise_sigma = n;
    }
    cfg.seed = ctx.seed(cfg.seed)?;
    cfg.validate()?;
    let dir = ctx.out_dir()?.to_path_buf();
    let m = synthgen::gen_dataset(&cfg, &dir)?;
    ctx.say(format!("generated {} frames, class counts {:?}", m.len(), m.class_counts));
    ctx.wrote(&dir.join(synthgen::MANIFEST_FILE));
    ctx.wrote(&dir.join("images"));
    Ok(())
}

fn cmd_preprocess(ctx: &mut Ctx, a: &PreprocessArgs) -> Result<()> {
    require_file(&a.input, "manifest")?;
    let mut opts = ctx.config.preprocess.clone().unwrap_or_default();
    if let Some(t) = &ctx.config.timing {
        opts.timing = t.clone();
    }
    if let Some(ms) = a.cycle_ms {
        opts.timing = CycleTiming::uniform(ms)?;
    }
    if let Some(w) = &a.subwindow {
        opts.timing = opts.timing.clone().with_state9_subwindow(w[0], w[1])?;
    }
    opts.roi_mode = a.roi;
    if let Some(keep) = &a.keep {
        opts.keep = keep.iter().map(|&s| CycleState::new(s)).collect::<Result<BTreeSet<_>>>()?;
    }
    let dir = ctx.out_dir()?.to_path_buf();
    let summary = preprocess::preprocess_dataset(&a.input, &dir, &opts)?;
    ctx.say(format!(
        "kept {} of {} frames ({} detector fallbacks)",
        summary.kept,
        summary.kept + summary.dropped,
        summary.fallbacks
    ));
    ctx.wrote(&summary.output_manifest);
    ctx.wrote(&dir.join("crop_table.json"));
    ctx.wrote(&dir.join("ssim_report.json"));
    write_json(ctx, "preprocess_summary.json", &summary)?;
    Ok(())
}

/// Indices of the train and test parts of a manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitFile {
    pub seed: u64,
    pub fraction_train: f64,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

fn split_indices(manifest: &DatasetManifest, fraction: f64, seed: u64) -> Result<SplitFile> {
    let (train, test) = nnet::split_train_test(manifest, fraction, seed)?;
    let index = |part: &DatasetManifest| -> Vec<usize> {
        let paths: BTreeSet<&str> = part.samples.iter().map(|s| s.image_path.as_str()).collect();
        (0..manifest.len())
            .filter(|&i| paths.contains(manifest.samples[i].image_path.as_str()))
            .collect()
    };
    Ok(SplitFile {
        seed,
        fraction_train: fraction,
        train: index(&train),
        test: index(&test),
    })
}

fn subset(manifest: &DatasetManifest, idx: &[usize]) -> Result<DatasetManifest> {
    let samples = idx
        .iter()
        .map(|&i| {
            manifest
                .samples
                .get(i)
                .cloned()
                .ok_or_else(|| Error::invalid(format!("split index {i} beyond manifest of {}", manifest.len())))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DatasetManifest::from_samples(samples, manifest.seed, manifest.generator_version.clone()))
}

fn test_part(manifest: &DatasetManifest, split: Option<&Path>) -> Result<DatasetManifest> {
    match split {
        None => Ok(manifest.clone()),
        Some(p) => {
            require_file(p, "split file")?;
            let s: SplitFile = serde_json::from_slice(&fs::read(p)?)?;
            subset(manifest, &s.test)
        }
    }
}

fn cmd_train(ctx: &mut Ctx, a: &TrainArgs) -> Result<()> {
    require_file(&a.input, "manifest")?;
    let mut cfg = ctx.config.train.clone().unwrap_or_default();
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = a.input_size {
        cfg.input_size = v;
    }
    if let Some(v) = a.split {
        cfg.split_fraction = v;
    }
    cfg.seed = ctx.seed(cfg.seed)?;
    cfg.validate()?;

    let manifest = synthgen::read_manifest(&a.input)?;
    let split = split_indices(&manifest, cfg.split_fraction, cfg.seed)?;
    let train_m = subset(&manifest, &split.train)?;
    let test_m = subset(&manifest, &split.test)?;
    let train_set = nnet::load_set(&train_m, &a.input, cfg.input_size)?;
    let test_set = nnet::load_set(&test_m, &a.input, cfg.input_size)?;
    let weights = if a.unweighted {
        ClassWeights::uniform()
    } else {
        class_weights(&train_set.class_counts().map(|n| n.max(1)))?
    };
    let outcome = nnet::train(&train_set, Some(&test_set), &cfg, &weights)?;

    let dir = ctx.out_dir()?.to_path_buf();
    let model_path = dir.join("model.bin");
    nnet::save_model(&outcome.model, &model_path)?;
    ctx.wrote(&model_path);
    write_json(ctx, "split.json", &split)?;
    write_json(
        ctx,
        "history.json",
        &json!({
            "config": cfg,
            "class_weights": weights.w,
            "initial_loss": outcome.initial_loss,
            "best_epoch": outcome.best_epoch,
            "model_id": nnet::model_id(&outcome.model),
            "epochs": outcome.history,
        }),
    )?;
    if let Some(last) = outcome.history.last() {
        ctx.say(format!(
            "epoch {} loss {:.4}; best held-out accuracy {:.2}% at epoch {}",
            last.epoch,
            last.loss,
            100.0 * last.best_accuracy,
            outcome.best_epoch
        ));
    }
    Ok(())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PredictionLine {
    label: AnomalyClass,
    predicted: AnomalyClass,
}

fn write_metrics(ctx: &mut Ctx, report: &MetricsReport) -> Result<()> {
    write_json(ctx, "metrics.json", report)?;
    let table = report.to_table();
    write_text(ctx, "metrics.txt", &table)?;
    ctx.say(table.trim_end().to_string());
    Ok(())
}

fn cmd_eval(ctx: &mut Ctx, a: &EvalArgs) -> Result<()> {
    if let Some(p) = &a.predictions {
        require_file(p, "predictions file")?;
        let (mut truth, mut pred) = (Vec::new(), Vec::new());
        for (i, line) in fs::read_to_string(p)?.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let l: PredictionLine = serde_json::from_str(line)
                .map_err(|e| Error::invalid(format!("{} line {}: {e}", p.display(), i + 1)))?;
            truth.push(l.label);
            pred.push(l.predicted);
        }
        return write_metrics(ctx, &nnet::evaluate_predictions(&truth, &pred)?);
    }
    let (input, model_path) = (a.input.as_ref().unwrap(), a.model.as_ref().unwrap());
    require_file(input, "manifest")?;
    require_file(model_path, "model")?;
    let model = nnet::load_model(model_path)?;
    let spec = load_ontology_or_default(a.ontology.as_deref())?;
    let manifest = test_part(&synthgen::read_manifest(input)?, a.split.as_deref())?;
    let arch = model.arch;
    let mut set = LabeledSet::new(arch.in_width, arch.in_height);
    let mut bounds = Vec::with_capacity(manifest.len());
    for s in &manifest.samples {
        let img = read_raster(synthgen::resolve_image(input, s))?;
        bounds.push(img.bounds());
        set.push(&img, s.label)?;
    }
    let probs = nnet::predict_probs(&model, &set)?;
    let id = nnet::model_id(&model);
    let mut log = String::new();
    let mut predicted = Vec::with_capacity(probs.len());
    for ((s, p), bbox) in manifest.samples.iter().zip(&probs).zip(bounds) {
        let class = AnomalyClass::from_index(nnet::argmax(p))?;
        predicted.push(class);
        let rec = gateway::DetectionRecord {
            ts_ms: s.timestamp_ms,
            cycle_index: s.cycle_index,
            cycle_state: s.state,
            predicted_class: class,
            probs: *p,
            bbox,
            verdict: verify(s.state, class, &spec),
            latency_ms: 0.0,
            model_id: id.clone(),
        };
        log.push_str(&gateway::LogEntry::Detection(rec).to_line());
    }
    write_metrics(ctx, &nnet::evaluate_predictions(&set.labels, &predicted)?)?;
    write_text(ctx, "detections.jsonl", &log)?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SaliencyRow {
    pub image: String,
    pub label: AnomalyClass,
    pub predicted: AnomalyClass,
    pub in_box_fraction: f64,
    pub box_area_fraction: f64,
    pub degenerate: bool,
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

fn cmd_explain(ctx: &mut Ctx, a: &ExplainArgs) -> Result<()> {
    require_file(&a.input, "manifest")?;
    require_file(&a.model, "model")?;
    let model = nnet::load_model(&a.model)?;
    let manifest = test_part(&synthgen::read_manifest(&a.input)?, a.split.as_deref())?;
    let dir = ctx.out_dir()?.join("heatmaps");
    fs::create_dir_all(&dir)?;
    let (w, h) = (model.arch.in_width, model.arch.in_height);
    let mut rows = Vec::new();
    for s in manifest.samples.iter().take(a.limit) {
        let img = read_raster(synthgen::resolve_image(&a.input, s))?;
        let (predicted, map) = scorecam::explain_prediction(&model, a.layer, &img)?;
        let bbox = scorecam::scale_box(&s.truth_box, (img.width(), img.height()), (w, h))?;
        let base = crate::raster::ImageRaster::new(w, h, 1, nnet::prepare_input(&img, w, h)?)?;
        let heat = scorecam::render_heatmap(&map, &base)?;
        let stem = Path::new(&s.image_path)
            .file_stem()
            .map(|x| x.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("{}", rows.len()));
        let path = dir.join(format!("{stem}.ppm"));
        write_raster(&heat, &path)?;
        rows.push(SaliencyRow {
            image: s.image_path.clone(),
            label: s.label,
            predicted,
            in_box_fraction: scorecam::saliency_in_box_fraction(&map, &bbox)?,
            box_area_fraction: bbox.area() as f64 / (w * h) as f64,
            degenerate: map.degenerate,
        });
    }
    let correct: Vec<&SaliencyRow> = rows.iter().filter(|r| r.label == r.predicted).collect();
    let med_in = median(&mut correct.iter().map(|r| r.in_box_fraction).collect::<Vec<_>>());
    let med_area = median(&mut correct.iter().map(|r| r.box_area_fraction).collect::<Vec<_>>());
    ctx.say(format!(
        "{} images explained, {} correct; median in-box saliency {} vs box area {}",
        rows.len(),
        correct.len(),
        med_in.map_or("n/a".into(), |v| format!("{v:.3}")),
        med_area.map_or("n/a".into(), |v| format!("{v:.3}"))
    ));
    ctx.wrote(&dir);
    write_json(
        ctx,
        "saliency.json",
        &json!({
            "layer": a.layer,
            "correct": correct.len(),
            "median_in_box_fraction": med_in,
            "median_box_area_fraction": med_area,
            "images": rows,
        }),
    )?;
    Ok(())
}

fn cmd_verify(ctx: &mut Ctx, a: &VerifyArgs) -> Result<()> {
    require_file(&a.log, "detection log")?;
    let spec = load_ontology_or_default(a.ontology.as_deref())?;
    let log = gateway::read_log(&a.log)?;
    for w in &log.warnings {
        eprintln!("warning: {w}");
    }
    let table = audit_log(&a.log, &spec)?;
    write_json(ctx, "audit.json", &table)?;
    let text = format!("{table}\n");
    write_text(ctx, "audit.txt", &text)?;
    ctx.say(text.trim_end().to_string());
    Ok(())
}

fn cmd_plc_serve(ctx: &mut Ctx, a: &PlcServeArgs) -> Result<()> {
    let timing = match (&ctx.config.timing, a.cycle_ms) {
        (Some(t), _) => t.clone(),
        (None, Some(ms)) => CycleTiming::uniform(ms)?,
        (None, None) => CycleTiming::default(),
    };
    let server = PlcServer::start(timing, &a.bind, Arc::new(SystemClock))?;
    // Printed right away so scripts can connect while the server runs.
    println!("serving cycle_state on {}", server.local_addr());
    let _ = std::io::stdout().flush();
    match a.duration_ms {
        Some(ms) => std::thread::sleep(Duration::from_millis(ms)),
        None => loop {
            std::thread::sleep(Duration::from_secs(3600));
        },
    }
    server.shutdown();
    ctx.say("server stopped");
    Ok(())
}

fn cmd_gateway(ctx: &mut Ctx, a: &GatewayArgs) -> Result<()> {
    require_file(&a.model, "model")?;
    let mut cfg = ctx.config.gateway.clone().unwrap_or_default();
    if let Some(p) = &a.plc {
        cfg.plc_address = p.clone();
    }
    if a.cycles.is_some() {
        cfg.max_cycles = a.cycles;
    }
    let model = nnet::load_model(&a.model)?;
    let spec = load_ontology_or_default(a.ontology.as_deref())?;
    let scene = SceneConfig {
        width: a.frame_size.0,
        height: a.frame_size.1,
        ..Default::default()
    };
    let detector = RoiDetector::synthetic(&scene, preprocess::detect::DEFAULT_DETECTION_THRESHOLD)?;
    let frames = Box::new(SyntheticFrameSource::new(scene, ctx.seed(0)?)?);
    let log_path = ctx.out_dir()?.join("detections.jsonl");
    let summary = gateway::run_gateway(
        &cfg,
        frames,
        Pipeline::new(model, spec, detector),
        &log_path,
        Arc::new(AtomicBool::new(false)),
    )?;
    ctx.say(format!(
        "{} records, {} errors over {} cycles",
        summary.records, summary.errors, summary.cycles
    ));
    ctx.wrote(&log_path);
    write_json(ctx, "gateway_summary.json", &summary)?;
    Ok(())
}

const REPORT_INPUTS: [&str; 7] = [
    "metrics.json",
    "history.json",
    "saliency.json",
    "audit.json",
    "preprocess_summary.json",
    "ssim_report.json",
    "gateway_summary.json",
];

fn cmd_report(ctx: &mut Ctx) -> Result<()> {
    let dir = ctx.out.clone();
    let mut sections = serde_json::Map::new();
    let mut text = String::new();
    for name in REPORT_INPUTS {
        let p = dir.join(name);
        if !p.is_file() {
            continue;
        }
        let v: Value = serde_json::from_slice(&fs::read(&p)?)?;
        let key = name.trim_end_matches(".json").to_string();
        match name {
            "metrics.json" => {
                let m: MetricsReport = serde_json::from_value(v.clone())?;
                text.push_str(&format!("Classification\n{}\n", m.to_table()));
            }
            "audit.json" => {
                let t: ontology::AuditTable = serde_json::from_value(v.clone())?;
                text.push_str(&format!("Ontology audit\n{t}\n\n"));
            }
            "saliency.json" => text.push_str(&format!(
                "Saliency: median in-box fraction {} vs box area {} over {} correct images\n\n",
                v["median_in_box_fraction"], v["median_box_area_fraction"], v["correct"]
            )),
            _ => {}
        }
        sections.insert(key, v);
    }
    if sections.is_empty() {
        return Err(Error::invalid(format!("no run artifacts found in {}", dir.display())));
    }
    write_json(ctx, "report.json", &Value::Object(sections))?;
    write_text(ctx, "report.txt", &text)?;
    Ok(())
}

fn execute(cli: Cli) -> Result<Vec<String>> {
    let config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut ctx = Ctx {
        seed_flag: cli.seed,
        config,
        out: cli.out.clone(),
        stdout: Vec::new(),
    };
    match &cli.command {
        Command::Gen(a) => cmd_gen(&mut ctx, a)?,
        Command::Preprocess(a) => cmd_preprocess(&mut ctx, a)?,
        Command::Train(a) => cmd_train(&mut ctx, a)?,
        Command::Eval(a) => cmd_eval(&mut ctx, a)?,
        Command::Explain(a) => cmd_explain(&mut ctx, a)?,
        Command::Verify(a) => cmd_verify(&mut ctx, a)?,
        Command::PlcServe(a) => cmd_plc_serve(&mut ctx, a)?,
        Command::Gateway(a) => cmd_gateway(&mut ctx, a)?,
        Command::Report => cmd_report(&mut ctx)?,
    }
    Ok(ctx.stdout)
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(lines) => {
            for l in lines {
                println!("{l}");
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["assemai", "frobnicate"]), 1);
        assert_eq!(run(["assemai", "gen", "--bogus"]), 1);
        assert_eq!(run(["assemai", "gen", "--image-size", "12"]), 1);
        assert_eq!(run(["assemai", "--help"]), 0);
    }

    #[test]
    fn runtime_errors_exit_two() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("o");
        let out = out.to_str().unwrap();
        assert_eq!(run(["assemai", "--out", out, "train", "--input", "/nonexistent/m.jsonl"]), 2);
        assert_eq!(run(["assemai", "--out", out, "report"]), 2);
    }

    #[test]
    fn perfect_prediction_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("preds.jsonl");
        let lines: String = (0..10).map(|i| format!("{{\"label\":{},\"predicted\":{}}}\n", i % 5, i % 5)).collect();
        fs::write(&p, lines).unwrap();
        let out = dir.path().join("out");
        let code = run([
            "assemai",
            "--out",
            out.to_str().unwrap(),
            "eval",
            "--predictions",
            p.to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
        let table = fs::read_to_string(out.join("metrics.txt")).unwrap();
        assert!(table.contains("100.00%"), "{table}");
    }

    #[test]
    fn size_and_median_helpers() {
        assert_eq!(parse_size("64x48"), Ok((64, 48)));
        assert!(parse_size("0x4").is_err());
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&mut []), None);
    }

    #[test]
    fn config_sections_are_optional_and_strict() {
        let c: RunConfig = serde_json::from_str(r#"{"train": {"epochs": 3}}"#).unwrap();
        assert_eq!(c.train.unwrap().epochs, 3);
        assert!(serde_json::from_str::<RunConfig>(r#"{"trian": {}}"#).is_err());
    }

    /// Property names of a schema object, resolving `$ref`s into `$defs`.
    fn schema_keys(node: &serde_json::Value, root: &serde_json::Value) -> Vec<(String, Vec<String>)> {
        let node = match node["$ref"].as_str() {
            Some(r) => &root["$defs"][r.trim_start_matches("#/$defs/")],
            None => node,
        };
        let Some(props) = node["properties"].as_object() else { return Vec::new() };
        let mut out = vec![(String::new(), props.keys().cloned().collect())];
        for (k, v) in props {
            out.extend(schema_keys(v, root).into_iter().map(|(p, ks)| (format!("{k}.{p}"), ks)));
        }
        out
    }

    fn value_keys(v: &serde_json::Value) -> Vec<(String, Vec<String>)> {
        let Some(obj) = v.as_object() else { return Vec::new() };
        let mut out = vec![(String::new(), obj.keys().cloned().collect())];
        for (k, v) in obj {
            out.extend(value_keys(v).into_iter().map(|(p, ks)| (format!("{k}.{p}"), ks)));
        }
        out
    }

    #[test]
    fn schema_and_example_match_the_config_types() {
        let data = Path::new(env!("CARGO_MANIFEST_DIR")).join("data");
        let example = RunConfig::load(&data.join("run_config.example.json")).unwrap();
        assert_eq!(example.train.unwrap().input_size, (32, 32));
        let full = RunConfig {
            gen: Some(Default::default()),
            timing: Some(Default::default()),
            preprocess: Some(Default::default()),
            train: Some(Default::default()),
            gateway: Some(Default::default()),
        };
        let schema: serde_json::Value = serde_json::from_str(&fs::read_to_string(data.join("run_config.schema.json")).unwrap()).unwrap();
        let mut a = schema_keys(&schema, &schema);
        let mut b = value_keys(&serde_json::to_value(&full).unwrap());
        for v in [&mut a, &mut b] {
            v.iter_mut().for_each(|(_, ks)| ks.sort());
            v.sort();
        }
        assert_eq!(a, b);
    }
}
