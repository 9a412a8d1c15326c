//! Cycle-state filtering, similarity screening and ROI extraction.

pub mod crop;
pub mod detect;
pub mod resize;
pub mod ssim;
pub mod timing;

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::raster::{read_raster, write_raster};
use crate::synthgen::{self, DatasetManifest, Sample};
use crate::types::{AnomalyClass, BoundingBox, CycleState, NUM_CLASSES};

pub use crop::{crop, fixed_crop_for_state, CropTable};
pub use detect::{detect_roi_template, Detection, RoiDetector, RoiLocation};
pub use resize::resize_bilinear;
pub use ssim::{ssim, SsimParams};
pub use timing::{map_timestamp_to_state, CycleTiming};

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome {
    pub manifest: DatasetManifest,
    /// Set when nothing survived the filter.
    pub empty: bool,
}

/// Keeps samples whose timestamp maps into `keep`. State-9 samples must
/// additionally fall inside the configured slice of the state-9 window.
pub fn filter_states(manifest: &DatasetManifest, keep: &BTreeSet<CycleState>, timing: &CycleTiming) -> FilterOutcome {
    let (a, b) = timing.state9_subwindow;
    let samples: Vec<Sample> = manifest
        .samples
        .iter()
        .filter(|s| {
            let (_, state) = map_timestamp_to_state(s.timestamp_ms, timing);
            if !keep.contains(&state) {
                return false;
            }
            if state.value() == 9 {
                let f = timing.window_fraction(s.timestamp_ms);
                return f >= a && f < b;
            }
            true
        })
        .cloned()
        .collect();
    let empty = samples.is_empty();
    FilterOutcome {
        manifest: DatasetManifest::from_samples(samples, manifest.seed, manifest.generator_version.clone()),
        empty,
    }
}

/// How the ROI of each frame is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoiMode {
    /// Template detector, fixed crop on no-detection.
    Detect,
    /// Fixed per-state crop rectangle.
    Fixed,
    /// Whole frame.
    None,
}

impl std::str::FromStr for RoiMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "detect" => Ok(RoiMode::Detect),
            "fixed" => Ok(RoiMode::Fixed),
            "none" => Ok(RoiMode::None),
            _ => Err(Error::invalid(format!("unknown ROI mode {s:?} (detect|fixed|none)"))),
        }
    }
}

/// Truth box expressed in the coordinates of `rect`, clipped to it.
pub fn box_within(truth: &BoundingBox, rect: &BoundingBox) -> BoundingBox {
    match truth.intersection(rect) {
        Some(b) => BoundingBox {
            x_min: b.x_min - rect.x_min,
            y_min: b.y_min - rect.y_min,
            x_max: b.x_max - rect.x_min,
            y_max: b.y_max - rect.y_min,
        },
        None => BoundingBox::full(rect.width(), rect.height()),
    }
}

/// Rectangle to crop for a frame under `mode`, plus the detector score.
pub fn roi_rect(
    image: &crate::raster::ImageRaster,
    state: CycleState,
    mode: RoiMode,
    detector: &RoiDetector,
) -> Result<(BoundingBox, Option<f64>)> {
    match mode {
        RoiMode::None => Ok((image.bounds(), None)),
        RoiMode::Fixed => Ok((detector.crops.get(state)?, None)),
        RoiMode::Detect => {
            let loc = detector.locate(image, state)?;
            Ok((loc.crop_rect, loc.score))
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessOptions {
    pub keep: BTreeSet<CycleState>,
    pub timing: CycleTiming,
    pub roi_mode: RoiMode,
    pub detection_threshold: f64,
    pub ssim: SsimParams,
    /// Normal/anomalous pairs per (state, class) for the similarity report.
    pub ssim_pairs: usize,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        PreprocessOptions {
            keep: [4, 9].into_iter().map(|s| CycleState::new(s).unwrap()).collect(),
            timing: CycleTiming::default(),
            roi_mode: RoiMode::Detect,
            detection_threshold: detect::DEFAULT_DETECTION_THRESHOLD,
            ssim: SsimParams::default(),
            ssim_pairs: 10,
        }
    }
}

/// Mean SSIM between normal frames and frames of one anomaly class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SsimRow {
    pub state: CycleState,
    pub class: AnomalyClass,
    pub pairs: usize,
    pub mean_ssim_full: f64,
    pub mean_ssim_roi: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PreprocessSummary {
    pub input: PathBuf,
    pub output_manifest: PathBuf,
    pub kept: usize,
    pub dropped: usize,
    pub fallbacks: usize,
    pub empty: bool,
    pub ssim: Vec<SsimRow>,
}

/// Filters a generated corpus, crops every kept frame and writes
/// `out_dir/manifest.jsonl`, `out_dir/images/*.pgm`, the crop table and a
/// similarity report.
pub fn preprocess_dataset(
    manifest_path: impl AsRef<Path>,
    out_dir: impl AsRef<Path>,
    opts: &PreprocessOptions,
) -> Result<PreprocessSummary> {
    let manifest_path = manifest_path.as_ref();
    let out_dir = out_dir.as_ref();
    let manifest = synthgen::read_manifest(manifest_path)?;
    let outcome = filter_states(&manifest, &opts.keep, &opts.timing);
    fs::create_dir_all(out_dir.join("images"))?;

    let mut detector: Option<RoiDetector> = None;
    let mut samples = Vec::with_capacity(outcome.manifest.len());
    let mut fallbacks = 0;
    // (state, label, full frame, roi crop) kept for the similarity report.
    let mut probes: Vec<Probe> = Vec::new();
    let mut probe_counts = std::collections::BTreeMap::<(u8, usize), usize>::new();

    for (i, s) in outcome.manifest.samples.iter().enumerate() {
        let src = synthgen::resolve_image(manifest_path, s);
        let image = read_raster(&src)?;
        let det = match &detector {
            Some(d) if d.crops.frame_width == image.width() && d.crops.frame_height == image.height() => d,
            _ => {
                let scene = synthgen::SceneConfig {
                    width: image.width(),
                    height: image.height(),
                    ..Default::default()
                };
                detector.insert(RoiDetector::synthetic(&scene, opts.detection_threshold)?)
            }
        };
        let (rect, score) = roi_rect(&image, s.state, opts.roi_mode, det)?;
        if opts.roi_mode == RoiMode::Detect && score.is_none() {
            fallbacks += 1;
        }
        let cropped = crop(&image, &rect)?;
        let rel = format!("images/{i:06}.pgm");
        write_raster(&cropped, out_dir.join(&rel))?;

        let key = (s.state.value(), s.label.index());
        let seen = probe_counts.entry(key).or_default();
        if *seen < opts.ssim_pairs {
            *seen += 1;
            probes.push((s.state, s.label, image.clone(), cropped.clone()));
        }

        samples.push(Sample {
            image_path: rel,
            truth_box: box_within(&s.truth_box, &rect),
            provenance: Some(json!({
                "stage": "preprocess",
                "source": src.display().to_string(),
                "keep_states": opts.keep.iter().map(|s| s.value()).collect::<Vec<_>>(),
                "state9_subwindow": [opts.timing.state9_subwindow.0, opts.timing.state9_subwindow.1],
                "roi_mode": opts.roi_mode,
                "crop_rect": rect,
                "detector_score": score,
            })),
            ..s.clone()
        });
    }

    let out = DatasetManifest::from_samples(samples, manifest.seed, manifest.generator_version.clone());
    let out_manifest = out_dir.join(synthgen::MANIFEST_FILE);
    synthgen::write_manifest(&out, &out_manifest)?;
    if let Some(d) = &detector {
        d.crops.save(out_dir.join("crop_table.json"))?;
    }

    let ssim_rows = similarity_report(&probes, &opts.ssim)?;
    fs::write(out_dir.join("ssim_report.json"), serde_json::to_vec_pretty(&ssim_rows)?)?;

    Ok(PreprocessSummary {
        input: manifest_path.to_path_buf(),
        output_manifest: out_manifest,
        kept: out.len(),
        dropped: manifest.len() - out.len(),
        fallbacks,
        empty: outcome.empty,
        ssim: ssim_rows,
    })
}

type Probe = (CycleState, AnomalyClass, crate::raster::ImageRaster, crate::raster::ImageRaster);

/// Pairs the k-th normal frame of a state with the k-th frame of each
/// anomaly class in that state and averages SSIM over the pairs.
fn similarity_report(probes: &[Probe], params: &SsimParams) -> Result<Vec<SsimRow>> {
    let mut rows = Vec::new();
    let states: BTreeSet<CycleState> = probes.iter().map(|p| p.0).collect();
    for state in states {
        let normals: Vec<&Probe> = probes
            .iter()
            .filter(|p| p.0 == state && p.1 == AnomalyClass::NoAnomaly)
            .collect();
        for class in &AnomalyClass::ALL[1..NUM_CLASSES] {
            let anomalous: Vec<&Probe> = probes.iter().filter(|p| p.0 == state && p.1 == *class).collect();
            let pairs: Vec<(&Probe, &Probe)> = normals.iter().copied().zip(anomalous).collect();
            if pairs.is_empty() {
                continue;
            }
            let mut full = 0.0;
            let mut roi = 0.0;
            let mut roi_pairs = 0;
            for (n, a) in &pairs {
                full += ssim(&n.2, &a.2, params)?;
                if n.3.dims_match(&a.3) && n.3.width() >= params.window && n.3.height() >= params.window {
                    roi += ssim(&n.3, &a.3, params)?;
                    roi_pairs += 1;
                }
            }
            rows.push(SsimRow {
                state,
                class: *class,
                pairs: pairs.len(),
                mean_ssim_full: full / pairs.len() as f64,
                mean_ssim_roi: if roi_pairs > 0 { roi / roi_pairs as f64 } else { f64::NAN },
            });
        }
    }
    Ok(rows)
}
