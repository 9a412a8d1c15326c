//! Synthetic rocket-assembly frames with ground-truth labels and boxes.
//!
//! Every frame shows a three-part rocket (Body1 at the bottom, Body2, then a
//! triangular Nose) at a fixed per-state anchor, surrounded by distractor
//! shapes and per-pixel Gaussian noise. Parts named by the label are left
//! out. Randomness comes from `ChaCha8Rng` seeded through SplitMix64, so the
//! same inputs always produce the same pixels.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::timing::CycleTiming;
use crate::raster::{write_raster, ImageRaster};
use crate::types::{AnomalyClass, BoundingBox, CycleState, Part, NUM_CLASSES};

/// Recorded in every manifest; names the generator revision and RNG
/// algorithms so another implementation can reproduce the pixels.
pub const GENERATOR_VERSION: &str = "assemai-synthgen/1 (rng=chacha8-splitmix64-seed, normal=rand_distr-0.5-ziggurat)";

/// Class shares of the filtered dataset (percentages 64.26, 7.1, 9.8,
/// 10.38, 8.4), renormalized to sum to one.
pub fn default_class_fractions() -> [f64; NUM_CLASSES] {
    let raw = [0.6426, 0.071, 0.098, 0.1038, 0.084];
    let sum: f64 = raw.iter().sum();
    raw.map(|f| f / sum)
}

/// Reference frame size the crop sizes below are quoted in (width, height).
pub const REFERENCE_FRAME: (usize, usize) = (720, 1080);

/// Crop sizes in the reference frame: 200×70 for state 4, 400×205 for state 9.
const REFERENCE_CROPS: [(u8, (usize, usize)); 2] = [(4, (200, 70)), (9, (400, 205))];

/// Crop-rectangle centers as fractions of the frame.
const CROP_CENTERS: [(u8, (f64, f64)); 2] = [(4, (0.30, 0.72)), (9, (0.62, 0.30))];

/// Rocket inset from each crop edge, as a fraction of the crop size.
const ROCKET_INSET: f64 = 0.15;

pub fn is_visible_state(state: CycleState) -> bool {
    matches!(state.value(), 4 | 9)
}

fn require_visible(state: CycleState) -> Result<usize> {
    match state.value() {
        4 => Ok(0),
        9 => Ok(1),
        s => Err(Error::invalid(format!("rocket parts are only rendered for states 4 and 9, got {s}"))),
    }
}

/// Fixed crop rectangle for a visible state, scaled per axis from the
/// reference frame to `width`×`height`.
pub fn crop_rect(state: CycleState, width: usize, height: usize) -> Result<BoundingBox> {
    let idx = require_visible(state)?;
    let (_, (rw, rh)) = REFERENCE_CROPS[idx];
    let (_, (cx, cy)) = CROP_CENTERS[idx];
    let cw = ((rw * width) as f64 / REFERENCE_FRAME.0 as f64).round().max(1.0) as usize;
    let ch = ((rh * height) as f64 / REFERENCE_FRAME.1 as f64).round().max(1.0) as usize;
    let cw = cw.min(width);
    let ch = ch.min(height);
    let x0 = ((cx * width as f64) - cw as f64 / 2.0).round().clamp(0.0, (width - cw) as f64) as usize;
    let y0 = ((cy * height as f64) - ch as f64 / 2.0).round().clamp(0.0, (height - ch) as f64) as usize;
    BoundingBox::new(x0, y0, x0 + cw, y0 + ch)
}

/// Region the full rocket occupies: the crop rectangle inset on every side.
pub fn anchor_region(state: CycleState, width: usize, height: usize) -> Result<BoundingBox> {
    let c = crop_rect(state, width, height)?;
    let ix = ((c.width() as f64 * ROCKET_INSET).round() as usize).min((c.width() - 1) / 2);
    let iy = ((c.height() as f64 * ROCKET_INSET).round() as usize).min((c.height() - 1) / 2);
    BoundingBox::new(c.x_min + ix, c.y_min + iy, c.x_max - ix, c.y_max - iy)
}

/// Scene parameters shared by every frame of a corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub noise_sigma: f64,
    pub clutter_count: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            width: 256,
            height: 256,
            noise_sigma: 0.03,
            clutter_count: 60,
        }
    }
}

const BACKGROUND_TOP: f64 = 0.50;
const BACKGROUND_BOTTOM: f64 = 0.62;
const BODY1_DARK: f64 = 0.18;
const BODY1_LIGHT: f64 = 0.34;
const BODY2_LEVEL: f64 = 0.42;
const NOSE_LEVEL: f64 = 0.88;

fn background_level(y: usize, height: usize) -> f64 {
    let t = if height > 1 { y as f64 / (height - 1) as f64 } else { 0.0 };
    BACKGROUND_TOP + (BACKGROUND_BOTTOM - BACKGROUND_TOP) * t
}

/// Pixel rows/columns each part covers inside the anchor region.
#[derive(Debug, Clone, Copy)]
struct PartLayout {
    region: BoundingBox,
    nose_rows: (usize, usize),
    body2_rows: (usize, usize),
    body1_rows: (usize, usize),
    body2_cols: (usize, usize),
}

impl PartLayout {
    fn new(region: BoundingBox) -> Self {
        let h = region.height();
        let nose_h = (h / 3).max(1);
        let body2_h = ((h - nose_h) / 2).max(1);
        let y0 = region.y_min;
        let nose_rows = (y0, y0 + nose_h);
        let body2_rows = (nose_rows.1, (nose_rows.1 + body2_h).min(region.y_max));
        let body1_rows = (body2_rows.1, region.y_max);
        let w = region.width();
        let inset = w / 10;
        let body2_cols = (region.x_min + inset, region.x_max - inset);
        PartLayout {
            region,
            nose_rows,
            body2_rows,
            body1_rows,
            body2_cols,
        }
    }

    /// Intensity of `part` at `(x, y)`, or `None` if the part does not
    /// cover that pixel.
    fn part_value(&self, part: Part, x: usize, y: usize) -> Option<f64> {
        match part {
            Part::Body1 => {
                let (r0, r1) = self.body1_rows;
                (y >= r0 && y < r1 && x >= self.region.x_min && x < self.region.x_max).then(|| {
                    if ((x - self.region.x_min) / 3).is_multiple_of(2) {
                        BODY1_DARK
                    } else {
                        BODY1_LIGHT
                    }
                })
            }
            Part::Body2 => {
                let (r0, r1) = self.body2_rows;
                let (c0, c1) = self.body2_cols;
                (y >= r0 && y < r1 && x >= c0 && x < c1).then_some(BODY2_LEVEL)
            }
            Part::Nose => {
                let (r0, r1) = self.nose_rows;
                if y < r0 || y >= r1 {
                    return None;
                }
                // Isoceles triangle: apex at the top center, base spanning
                // Body2's columns on the last nose row.
                let (c0, c1) = self.body2_cols;
                let center = (c0 + c1) as f64 / 2.0;
                let half_base = (c1 - c0) as f64 / 2.0;
                let rows = (r1 - r0) as f64;
                let frac = (y - r0) as f64 + 1.0;
                let half = half_base * frac / rows;
                let px = x as f64 + 0.5;
                (px >= center - half && px <= center + half).then_some(NOSE_LEVEL)
            }
        }
    }

    fn covering_part(&self, label: AnomalyClass, x: usize, y: usize) -> Option<(Part, f64)> {
        Part::ALL
            .iter()
            .filter(|p| !label.is_missing(**p))
            .find_map(|&p| self.part_value(p, x, y).map(|v| (p, v)))
    }
}

/// SplitMix64 finalizer, used to derive independent stream seeds.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for sample `index` of a corpus generated with `seed`.
pub fn sample_seed(seed: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(index.wrapping_add(1)))
}

#[derive(Debug, Clone)]
pub struct Renderer {
    pub scene: SceneConfig,
}

impl Renderer {
    pub fn new(scene: SceneConfig) -> Result<Self> {
        if scene.width < 16 || scene.height < 16 {
            return Err(Error::invalid(format!(
                "frame {}x{} too small; need at least 16x16",
                scene.width, scene.height
            )));
        }
        if !(scene.noise_sigma >= 0.0 && scene.noise_sigma.is_finite()) {
            return Err(Error::invalid(format!("noise_sigma {} must be finite and >= 0", scene.noise_sigma)));
        }
        Ok(Renderer { scene })
    }

    pub fn anchor(&self, state: CycleState) -> Result<BoundingBox> {
        anchor_region(state, self.scene.width, self.scene.height)
    }

    pub fn crop(&self, state: CycleState) -> Result<BoundingBox> {
        crop_rect(state, self.scene.width, self.scene.height)
    }

    /// Tight box around the parts drawn for `label`, or the whole anchor
    /// region when nothing is drawn.
    pub fn truth_box(&self, state: CycleState, label: AnomalyClass) -> Result<BoundingBox> {
        let region = self.anchor(state)?;
        let layout = PartLayout::new(region);
        let mut tight: Option<BoundingBox> = None;
        for y in region.y_min..region.y_max {
            for x in region.x_min..region.x_max {
                if layout.covering_part(label, x, y).is_some() {
                    let b = tight.get_or_insert(BoundingBox {
                        x_min: x,
                        y_min: y,
                        x_max: x + 1,
                        y_max: y + 1,
                    });
                    b.x_min = b.x_min.min(x);
                    b.y_min = b.y_min.min(y);
                    b.x_max = b.x_max.max(x + 1);
                    b.y_max = b.y_max.max(y + 1);
                }
            }
        }
        Ok(tight.unwrap_or(region))
    }

    /// Pixels covered by `part` (whether or not the label draws it).
    pub fn part_pixels(&self, state: CycleState, part: Part) -> Result<Vec<(usize, usize)>> {
        let region = self.anchor(state)?;
        let layout = PartLayout::new(region);
        let mut out = Vec::new();
        for y in region.y_min..region.y_max {
            for x in region.x_min..region.x_max {
                // Nose/Body2/Body1 rows are disjoint, so no part shadows another.
                if layout.part_value(part, x, y).is_some() {
                    out.push((x, y));
                }
            }
        }
        Ok(out)
    }

    /// Renders one frame. The RNG stream depends only on the cycle, the
    /// state and `rng_seed`, never on the label, so frames that differ only
    /// in label share their clutter and noise.
    pub fn render_frame(
        &self,
        cycle_index: u64,
        state: CycleState,
        label: AnomalyClass,
        rng_seed: u64,
    ) -> Result<(ImageRaster, BoundingBox)> {
        let (w, h) = (self.scene.width, self.scene.height);
        let crop = self.crop(state)?;
        let region = self.anchor(state)?;
        let layout = PartLayout::new(region);
        let stream = splitmix64(rng_seed ^ splitmix64(cycle_index ^ ((state.value() as u64) << 56)));
        let mut rng = ChaCha8Rng::seed_from_u64(stream);

        let mut pixels: Vec<f64> = (0..h)
            .flat_map(|y| std::iter::repeat_n(background_level(y, h), w))
            .collect();

        self.draw_clutter(&mut pixels, &crop, &mut rng);

        for y in region.y_min..region.y_max {
            for x in region.x_min..region.x_max {
                if let Some((_, v)) = layout.covering_part(label, x, y) {
                    pixels[y * w + x] = v;
                }
            }
        }

        if self.scene.noise_sigma > 0.0 {
            let normal = Normal::new(0.0, self.scene.noise_sigma)
                .map_err(|e| Error::invalid(format!("noise distribution: {e}")))?;
            for p in pixels.iter_mut() {
                *p = (*p + normal.sample(&mut rng)).clamp(0.0, 1.0);
            }
        }

        let image = ImageRaster::new(w, h, 1, pixels)?;
        Ok((image, self.truth_box(state, label)?))
    }

    fn draw_clutter(&self, pixels: &mut [f64], keep_out: &BoundingBox, rng: &mut ChaCha8Rng) {
        let (w, h) = (self.scene.width, self.scene.height);
        let scale = w.min(h) as f64 / 256.0;
        let min_side = (6.0 * scale).max(2.0) as usize;
        let max_side = ((44.0 * scale) as usize).max(min_side + 1).min(w.min(h) / 2);
        for _ in 0..self.scene.clutter_count {
            let ellipse = rng.random::<bool>();
            let level = rng.random_range(0.12..0.92);
            // Bounded rejection sampling; the draw count is independent of the label.
            for _attempt in 0..16 {
                let sw = rng.random_range(min_side..=max_side);
                let sh = rng.random_range(min_side..=max_side);
                let x0 = rng.random_range(0..=w - sw);
                let y0 = rng.random_range(0..=h - sh);
                let b = BoundingBox {
                    x_min: x0,
                    y_min: y0,
                    x_max: x0 + sw,
                    y_max: y0 + sh,
                };
                if b.intersection(keep_out).is_some() {
                    continue;
                }
                let (cx, cy) = (x0 as f64 + sw as f64 / 2.0, y0 as f64 + sh as f64 / 2.0);
                let (rx, ry) = (sw as f64 / 2.0, sh as f64 / 2.0);
                for y in b.y_min..b.y_max {
                    for x in b.x_min..b.x_max {
                        let inside = !ellipse || {
                            let dx = (x as f64 + 0.5 - cx) / rx;
                            let dy = (y as f64 + 0.5 - cy) / ry;
                            dx * dx + dy * dy <= 1.0
                        };
                        if inside {
                            pixels[y * w + x] = level;
                        }
                    }
                }
                break;
            }
        }
    }

    /// Noise-free, clutter-free renders of every label with at least one
    /// drawn part, cropped to the label's truth box. Returns each template
    /// with the box it was cut from.
    pub fn templates(&self, state: CycleState) -> Result<Vec<(AnomalyClass, ImageRaster, BoundingBox)>> {
        let clean = Renderer {
            scene: SceneConfig {
                noise_sigma: 0.0,
                clutter_count: 0,
                ..self.scene.clone()
            },
        };
        let mut out = Vec::new();
        for label in AnomalyClass::ALL {
            if label == AnomalyClass::NoNoseNoBody2NoBody1 {
                continue;
            }
            let (frame, truth) = clean.render_frame(1, state, label, 0)?;
            let t = crate::preprocess::crop::crop(&frame, &truth)?;
            out.push((label, t, truth));
        }
        Ok(out)
    }
}

/// One labeled frame of the corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub image_path: String,
    pub label: AnomalyClass,
    pub cycle_index: u64,
    pub state: CycleState,
    pub timestamp_ms: u64,
    pub truth_box: BoundingBox,
    /// Parameters of the stage that derived this sample, absent for raw
    /// generator output.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub samples: Vec<Sample>,
    pub class_counts: [usize; NUM_CLASSES],
    pub seed: u64,
    pub generator_version: String,
}

impl DatasetManifest {
    pub fn from_samples(samples: Vec<Sample>, seed: u64, generator_version: impl Into<String>) -> Self {
        let class_counts = tally(&samples);
        DatasetManifest {
            samples,
            class_counts,
            seed,
            generator_version: generator_version.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<AnomalyClass> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// Checks that `class_counts` agrees with the samples.
    pub fn validate(&self) -> Result<()> {
        let t = tally(&self.samples);
        if t != self.class_counts {
            return Err(Error::invalid(format!(
                "class_counts {:?} disagree with sample tally {:?}",
                self.class_counts, t
            )));
        }
        Ok(())
    }
}

pub fn tally(samples: &[Sample]) -> [usize; NUM_CLASSES] {
    let mut counts = [0; NUM_CLASSES];
    for s in samples {
        counts[s.label.index()] += 1;
    }
    counts
}

/// Header written beside the JSON Lines sample file.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestMeta {
    class_counts: [usize; NUM_CLASSES],
    seed: u64,
    generator_version: String,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const MANIFEST_META_FILE: &str = "manifest.meta.json";

fn meta_path(jsonl: &Path) -> PathBuf {
    let stem = jsonl.file_stem().and_then(|s| s.to_str()).unwrap_or("manifest");
    jsonl.with_file_name(format!("{stem}.meta.json"))
}

/// Writes samples as JSON Lines at `path` and the header as
/// `<stem>.meta.json` beside it.
pub fn write_manifest(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = BufWriter::new(fs::File::create(path)?);
    for s in &manifest.samples {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    let meta = ManifestMeta {
        class_counts: manifest.class_counts,
        seed: manifest.seed,
        generator_version: manifest.generator_version.clone(),
    };
    fs::write(meta_path(path), serde_json::to_vec_pretty(&meta)?)?;
    Ok(())
}

/// Reads a JSON Lines manifest. The header file is optional; without it the
/// counts are recomputed and the seed is 0.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let reader = BufReader::new(fs::File::open(path)?);
    let mut samples = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: Sample = serde_json::from_str(&line)
            .map_err(|e| Error::invalid(format!("{}:{}: {e}", path.display(), i + 1)))?;
        samples.push(s);
    }
    let mp = meta_path(path);
    let (seed, version) = if mp.exists() {
        let meta: ManifestMeta = serde_json::from_slice(&fs::read(&mp)?)?;
        (meta.seed, meta.generator_version)
    } else {
        (0, GENERATOR_VERSION.to_string())
    };
    Ok(DatasetManifest::from_samples(samples, seed, version))
}

/// Resolves a sample's image path relative to the manifest location.
pub fn resolve_image(manifest_path: &Path, sample: &Sample) -> PathBuf {
    let p = Path::new(&sample.image_path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest_path.parent().unwrap_or(Path::new(".")).join(p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub total_count: usize,
    pub class_fractions: [f64; NUM_CLASSES],
    pub image_size: (usize, usize),
    pub noise_sigma: f64,
    pub clutter_count: usize,
    pub seed: u64,
    pub timing: CycleTiming,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            total_count: 1000,
            class_fractions: default_class_fractions(),
            image_size: (256, 256),
            noise_sigma: 0.03,
            clutter_count: 60,
            seed: 0,
            timing: CycleTiming::default(),
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_count < 5 {
            return Err(Error::invalid(format!("total_count {} must be >= 5", self.total_count)));
        }
        if self.class_fractions.iter().any(|f| !(f.is_finite() && *f >= 0.0)) {
            return Err(Error::invalid("class_fractions must be finite and nonnegative"));
        }
        let sum: f64 = self.class_fractions.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("class_fractions sum to {sum}, expected 1 ± 1e-9")));
        }
        self.timing.validate()?;
        Renderer::new(self.scene())?;
        Ok(())
    }

    pub fn scene(&self) -> SceneConfig {
        SceneConfig {
            width: self.image_size.0,
            height: self.image_size.1,
            noise_sigma: self.noise_sigma,
            clutter_count: self.clutter_count,
        }
    }
}

/// Per-class sample counts: classes 1..4 get `round(total × fraction)`,
/// class 0 takes the remainder. If the rounded minority counts overshoot
/// the total, the most over-rounded classes give samples back first.
pub fn class_counts_for(total: usize, fractions: &[f64; NUM_CLASSES]) -> [usize; NUM_CLASSES] {
    let exact: Vec<f64> = fractions.iter().map(|f| f * total as f64).collect();
    let mut counts = [0usize; NUM_CLASSES];
    for c in 1..NUM_CLASSES {
        counts[c] = exact[c].round() as usize;
    }
    while counts[1..].iter().sum::<usize>() > total {
        let c = (1..NUM_CLASSES)
            .filter(|&c| counts[c] > 0)
            .max_by(|&a, &b| {
                (counts[a] as f64 - exact[a])
                    .partial_cmp(&(counts[b] as f64 - exact[b]))
                    .unwrap()
                    .then(b.cmp(&a))
            })
            .expect("some class is positive while the sum exceeds total");
        counts[c] -= 1;
    }
    counts[0] = total - counts[1..].iter().sum::<usize>();
    counts
}

/// Label sequence for a corpus: counts expanded in class order, then
/// Fisher–Yates shuffled with a seeded stream.
pub fn label_sequence(counts: &[usize; NUM_CLASSES], seed: u64) -> Vec<AnomalyClass> {
    use rand::seq::SliceRandom;
    let mut labels: Vec<AnomalyClass> = AnomalyClass::ALL
        .iter()
        .zip(counts)
        .flat_map(|(c, &n)| std::iter::repeat_n(*c, n))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ 0x4C41_4245_4C53));
    labels.shuffle(&mut rng);
    labels
}

/// Cycle index, state and timestamp of sample `index`: two samples per
/// cycle, state 4 then state 9, at a seeded position inside the window.
pub fn sample_schedule(index: usize, timing: &CycleTiming, seed: u64) -> (u64, CycleState, u64) {
    let cycle = index as u64 / 2 + 1;
    let state = CycleState::new(if index.is_multiple_of(2) { 4 } else { 9 }).expect("4 and 9 are valid states");
    let (start, end) = timing.window(state);
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, index as u64) ^ 0x5449_4D45);
    let offset = rng.random_range(0..end - start);
    let ts = (cycle - 1) * timing.cycle_period_ms + start + offset;
    (cycle, state, ts)
}

/// Generates the corpus: images under `out_dir/images/` and the manifest at
/// `out_dir/manifest.jsonl`.
pub fn gen_dataset(cfg: &GenConfig, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    cfg.validate()?;
    let out_dir = out_dir.as_ref();
    let img_dir = out_dir.join("images");
    fs::create_dir_all(&img_dir)?;
    let renderer = Renderer::new(cfg.scene())?;
    let counts = class_counts_for(cfg.total_count, &cfg.class_fractions);
    let labels = label_sequence(&counts, cfg.seed);

    let mut samples = Vec::with_capacity(cfg.total_count);
    for (i, &label) in labels.iter().enumerate() {
        let (cycle, state, ts) = sample_schedule(i, &cfg.timing, cfg.seed);
        let (image, truth) = renderer.render_frame(cycle, state, label, sample_seed(cfg.seed, i as u64))?;
        let rel = format!("images/{i:06}.pgm");
        write_raster(&image, out_dir.join(&rel))?;
        samples.push(Sample {
            image_path: rel,
            label,
            cycle_index: cycle,
            state,
            timestamp_ms: ts,
            truth_box: truth,
            provenance: None,
        });
    }
    let manifest = DatasetManifest::from_samples(samples, cfg.seed, GENERATOR_VERSION);
    write_manifest(&manifest, out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn s(v: u8) -> CycleState {
        CycleState::new(v).unwrap()
    }

    fn renderer() -> Renderer {
        Renderer::new(SceneConfig::default()).unwrap()
    }

    #[test]
    fn default_fractions_give_expected_counts() {
        // Oracle: round each fraction × 1000 for classes 1..4, remainder to 0.
        let f = default_class_fractions();
        let minority: Vec<usize> = f[1..].iter().map(|x| (x * 1000.0).round() as usize).collect();
        let expected0 = 1000 - minority.iter().sum::<usize>();
        assert_eq!(minority, vec![71, 98, 104, 84]);
        assert_eq!(expected0, 643);
        assert_eq!(class_counts_for(1000, &f), [643, 71, 98, 104, 84]);
    }

    #[test]
    fn degenerate_fractions() {
        assert_eq!(class_counts_for(5, &[1.0, 0.0, 0.0, 0.0, 0.0]), [5, 0, 0, 0, 0]);
        // Rounding 2.5 up twice would overshoot; one class gives a sample back.
        let c = class_counts_for(5, &[0.0, 0.5, 0.5, 0.0, 0.0]);
        assert_eq!(c.iter().sum::<usize>(), 5);
        assert_eq!(c[0], 0);
    }

    #[test]
    fn full_rocket_contains_all_parts() {
        let r = renderer();
        let (img, truth) = r.render_frame(1, s(4), AnomalyClass::NoAnomaly, 7).unwrap();
        for part in Part::ALL {
            let px = r.part_pixels(s(4), part).unwrap();
            assert!(!px.is_empty(), "{part:?} has no pixels");
            for (x, y) in px {
                assert!(x >= truth.x_min && x < truth.x_max && y >= truth.y_min && y < truth.y_max);
            }
        }
        assert_eq!(img.width(), 256);
        assert_eq!(truth, r.anchor(s(4)).unwrap());
    }

    #[test]
    fn missing_nose_only_changes_nose_pixels() {
        let r = renderer();
        let (full, _) = r.render_frame(1, s(4), AnomalyClass::NoAnomaly, 7).unwrap();
        let (nonose, truth) = r.render_frame(1, s(4), AnomalyClass::NoNose, 7).unwrap();
        let nose: std::collections::HashSet<_> = r.part_pixels(s(4), Part::Nose).unwrap().into_iter().collect();
        let mut differing = 0;
        for y in 0..256 {
            for x in 0..256 {
                let (a, b) = (full.get(x, y, 0), nonose.get(x, y, 0));
                if nose.contains(&(x, y)) {
                    differing += (a != b) as usize;
                } else {
                    assert_eq!(a, b, "pixel ({x},{y}) outside the nose changed");
                }
            }
        }
        assert!(differing > nose.len() / 2);
        assert!(truth.y_min > r.anchor(s(4)).unwrap().y_min);
    }

    #[test]
    fn render_is_deterministic() {
        let r = renderer();
        let a = r.render_frame(1, s(4), AnomalyClass::NoAnomaly, 7).unwrap();
        let b = r.render_frame(1, s(4), AnomalyClass::NoAnomaly, 7).unwrap();
        assert_eq!(a, b);
        let c = r.render_frame(1, s(4), AnomalyClass::NoAnomaly, 8).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn rejects_invisible_state() {
        assert!(renderer().render_frame(1, s(5), AnomalyClass::NoAnomaly, 0).is_err());
    }

    #[test]
    fn all_missing_uses_anchor_box() {
        let r = renderer();
        let t = r.truth_box(s(9), AnomalyClass::NoNoseNoBody2NoBody1).unwrap();
        assert_eq!(t, r.anchor(s(9)).unwrap());
    }

    #[test]
    fn reference_frame_geometry_matches_crop_sizes() {
        let c4 = crop_rect(s(4), 720, 1080).unwrap();
        let c9 = crop_rect(s(9), 720, 1080).unwrap();
        assert_eq!((c4.width(), c4.height()), (200, 70));
        assert_eq!((c9.width(), c9.height()), (400, 205));
    }

    #[test]
    fn schedule_alternates_states() {
        let timing = CycleTiming::default();
        for i in 0..20 {
            let (cycle, state, ts) = sample_schedule(i, &timing, 3);
            assert_eq!(cycle, i as u64 / 2 + 1);
            assert_eq!(state.value(), if i % 2 == 0 { 4 } else { 9 });
            let (c2, s2) = crate::preprocess::timing::map_timestamp_to_state(ts, &timing);
            assert_eq!((c2, s2), (cycle, state));
        }
    }

    #[test]
    fn gen_dataset_counts_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = GenConfig {
            total_count: 40,
            image_size: (64, 64),
            clutter_count: 3,
            seed: 11,
            ..GenConfig::default()
        };
        let m = gen_dataset(&cfg, dir.path().join("a")).unwrap();
        gen_dataset(&cfg, dir.path().join("b")).unwrap();
        assert_eq!(m.class_counts.iter().sum::<usize>(), 40);
        m.validate().unwrap();
        let a = fs::read(dir.path().join("a").join(MANIFEST_FILE)).unwrap();
        let b = fs::read(dir.path().join("b").join(MANIFEST_FILE)).unwrap();
        assert_eq!(a, b);
        let back = read_manifest(dir.path().join("a").join(MANIFEST_FILE)).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn all_normal_config() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = GenConfig {
            total_count: 5,
            class_fractions: [1.0, 0.0, 0.0, 0.0, 0.0],
            image_size: (32, 32),
            ..GenConfig::default()
        };
        let m = gen_dataset(&cfg, dir.path()).unwrap();
        assert!(m.samples.iter().all(|s| s.label == AnomalyClass::NoAnomaly));
    }

    proptest! {
        #[test]
        fn counts_sum_to_total(total in 5usize..5000, raw in prop::array::uniform5(0.0f64..1.0)) {
            let sum: f64 = raw.iter().sum();
            prop_assume!(sum > 1e-3);
            let f = raw.map(|x| x / sum);
            let c = class_counts_for(total, &f);
            prop_assert_eq!(c.iter().sum::<usize>(), total);
            for k in 1..NUM_CLASSES {
                prop_assert!((c[k] as f64 - f[k] * total as f64).abs() <= 1.0);
            }
            // Four roundings of at most 1/2 each land on class 0.
            prop_assert!((c[0] as f64 - f[0] * total as f64).abs() <= 2.0 + 1e-9);
        }

        #[test]
        fn omitted_parts_are_background(seed in any::<u64>(), label_idx in 1usize..5, nine in any::<bool>()) {
            let r = Renderer::new(SceneConfig { width: 96, height: 96, ..SceneConfig::default() }).unwrap();
            let st = s(if nine { 9 } else { 4 });
            let label = AnomalyClass::from_index(label_idx).unwrap();
            let blank = Renderer { scene: SceneConfig { clutter_count: r.scene.clutter_count, ..r.scene.clone() } };
            let (img, _) = r.render_frame(3, st, label, seed).unwrap();
            let (empty, _) = blank.render_frame(3, st, AnomalyClass::NoNoseNoBody2NoBody1, seed).unwrap();
            for part in label.missing_parts() {
                for (x, y) in r.part_pixels(st, *part).unwrap() {
                    prop_assert_eq!(img.get(x, y, 0), empty.get(x, y, 0));
                }
            }
            prop_assert!(img.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
