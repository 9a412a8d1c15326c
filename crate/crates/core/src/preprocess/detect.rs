//! Template-matching ROI detector.
//!
//! Scores every placement of every template with zero-mean normalized
//! cross-correlation. The correlation term is evaluated in the frequency
//! domain and the window energies with summed-area tables, so a full
//! exhaustive search over a 256×256 frame costs a handful of FFTs.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::raster::ImageRaster;
use crate::types::{BoundingBox, CycleState};

use super::crop::CropTable;

/// Windows whose centered energy falls below this (per pixel) have no
/// defined correlation and score 0.
const MIN_ENERGY_PER_PIXEL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Detection {
    Found {
        bbox: BoundingBox,
        score: f64,
        template_index: usize,
    },
    /// Best score stayed below the threshold.
    NotFound { best_score: f64 },
}

fn fft2(data: &mut [Complex<f64>], width: usize, height: usize, planner: &mut FftPlanner<f64>, inverse: bool) {
    let row_fft = if inverse {
        planner.plan_fft_inverse(width)
    } else {
        planner.plan_fft_forward(width)
    };
    for row in data.chunks_exact_mut(width) {
        row_fft.process(row);
    }
    let col_fft = if inverse {
        planner.plan_fft_inverse(height)
    } else {
        planner.plan_fft_forward(height)
    };
    let mut col = vec![Complex::new(0.0, 0.0); height];
    for x in 0..width {
        for y in 0..height {
            col[y] = data[y * width + x];
        }
        col_fft.process(&mut col);
        for y in 0..height {
            data[y * width + x] = col[y];
        }
    }
}

/// Summed-area table with a zero first row and column.
fn integral(values: &[f64], width: usize, height: usize) -> Vec<f64> {
    let stride = width + 1;
    let mut s = vec![0.0; stride * (height + 1)];
    for y in 0..height {
        let mut run = 0.0;
        for x in 0..width {
            run += values[y * width + x];
            s[(y + 1) * stride + x + 1] = s[y * stride + x + 1] + run;
        }
    }
    s
}

fn box_sum(s: &[f64], stride: usize, x: usize, y: usize, w: usize, h: usize) -> f64 {
    s[(y + h) * stride + x + w] - s[y * stride + x + w] - s[(y + h) * stride + x] + s[y * stride + x]
}

/// Zero-mean template padded to the frame size, in the frequency domain.
#[derive(Debug, Clone)]
struct TemplateSpectrum {
    width: usize,
    height: usize,
    /// `None` for a flat template, which scores 0 everywhere.
    centered: Option<(f64, Vec<Complex<f64>>)>,
}

fn check_sizes(w: usize, h: usize, templates: &[ImageRaster]) -> Result<()> {
    for (i, t) in templates.iter().enumerate() {
        if t.width() > w || t.height() > h {
            return Err(Error::invalid(format!(
                "template {i} ({}x{}) larger than image ({w}x{h})",
                t.width(),
                t.height()
            )));
        }
    }
    Ok(())
}

fn spectra(templates: &[ImageRaster], w: usize, h: usize, planner: &mut FftPlanner<f64>) -> Vec<TemplateSpectrum> {
    templates
        .iter()
        .map(|t| {
            let (tw, th) = (t.width(), t.height());
            let n = (tw * th) as f64;
            let tl = t.to_luma().into_pixels();
            let tmean = tl.iter().sum::<f64>() / n;
            let tc: Vec<f64> = tl.iter().map(|v| v - tmean).collect();
            let energy: f64 = tc.iter().map(|v| v * v).sum();
            let centered = (energy >= MIN_ENERGY_PER_PIXEL * n).then(|| {
                let mut hat = vec![Complex::new(0.0, 0.0); w * h];
                for y in 0..th {
                    for x in 0..tw {
                        hat[y * w + x].re = tc[y * tw + x];
                    }
                }
                fft2(&mut hat, w, h, planner, false);
                (energy, hat)
            });
            TemplateSpectrum {
                width: tw,
                height: th,
                centered,
            }
        })
        .collect()
}

fn ncc_from_spectra(image: &ImageRaster, templates: &[TemplateSpectrum], planner: &mut FftPlanner<f64>) -> Vec<Vec<f64>> {
    let (w, h) = (image.width(), image.height());
    let luma = image.to_luma().into_pixels();
    let mean = luma.iter().sum::<f64>() / luma.len() as f64;
    let centered: Vec<f64> = luma.iter().map(|v| v - mean).collect();
    let squares: Vec<f64> = centered.iter().map(|v| v * v).collect();
    let s1 = integral(&centered, w, h);
    let s2 = integral(&squares, w, h);

    let mut img_hat: Vec<Complex<f64>> = centered.iter().map(|&v| Complex::new(v, 0.0)).collect();
    fft2(&mut img_hat, w, h, planner, false);

    let mut maps = Vec::with_capacity(templates.len());
    let mut prod = vec![Complex::new(0.0, 0.0); w * h];
    for t in templates {
        let (tw, th) = (t.width, t.height);
        let (ow, oh) = (w - tw + 1, h - th + 1);
        let n = (tw * th) as f64;
        let Some((t_energy, t_hat)) = &t.centered else {
            maps.push(vec![0.0; ow * oh]);
            continue;
        };
        for ((p, a), b) in prod.iter_mut().zip(t_hat).zip(&img_hat) {
            *p = b * a.conj();
        }
        fft2(&mut prod, w, h, planner, true);
        let norm = (w * h) as f64;
        let stride = w + 1;
        let mut map = Vec::with_capacity(ow * oh);
        for y in 0..oh {
            for x in 0..ow {
                let sum = box_sum(&s1, stride, x, y, tw, th);
                let energy = box_sum(&s2, stride, x, y, tw, th) - sum * sum / n;
                if energy < MIN_ENERGY_PER_PIXEL * n {
                    map.push(0.0);
                    continue;
                }
                let corr = prod[y * w + x].re / norm;
                map.push((corr / (energy * t_energy).sqrt()).clamp(-1.0, 1.0));
            }
        }
        maps.push(map);
    }
    maps
}

/// Per-template NCC maps over all valid placements, row-major with
/// `(W−tw+1)` columns. Templates with zero variance yield all-zero maps.
pub fn ncc_maps(image: &ImageRaster, templates: &[ImageRaster]) -> Result<Vec<Vec<f64>>> {
    let (w, h) = (image.width(), image.height());
    check_sizes(w, h, templates)?;
    let mut planner = FftPlanner::new();
    let sp = spectra(templates, w, h, &mut planner);
    Ok(ncc_from_spectra(image, &sp, &mut planner))
}

fn check_detectable(image: &ImageRaster, templates: &[ImageRaster]) -> Result<()> {
    if templates.is_empty() {
        return Err(Error::invalid("no templates supplied"));
    }
    for (i, t) in templates.iter().enumerate() {
        if t.width() >= image.width() && t.height() >= image.height() {
            return Err(Error::invalid(format!("template {i} is not smaller than the image")));
        }
    }
    Ok(())
}

/// Best placement over all maps. Ties go to the smallest `(y, x, template index)`.
fn best_placement(maps: &[Vec<f64>], image_width: usize, sizes: &[(usize, usize)], threshold: f64) -> Result<Detection> {
    let mut best: Option<(f64, usize, usize, usize)> = None;
    for (ti, (map, &(tw, _))) in maps.iter().zip(sizes).enumerate() {
        let ow = image_width - tw + 1;
        for (i, &score) in map.iter().enumerate() {
            let (y, x) = (i / ow, i % ow);
            let better = match best {
                None => true,
                Some((bs, by, bx, bt)) => score > bs || (score == bs && (y, x, ti) < (by, bx, bt)),
            };
            if better {
                best = Some((score, y, x, ti));
            }
        }
    }
    let (score, y, x, ti) = best.expect("at least one placement");
    if score < threshold {
        return Ok(Detection::NotFound { best_score: score });
    }
    let (tw, th) = sizes[ti];
    Ok(Detection::Found {
        bbox: BoundingBox::new(x, y, x + tw, y + th)?,
        score,
        template_index: ti,
    })
}

/// Exhaustive NCC search. Ties go to the smallest `(y, x, template index)`.
pub fn detect_roi_template(image: &ImageRaster, templates: &[ImageRaster], threshold: f64) -> Result<Detection> {
    check_detectable(image, templates)?;
    let maps = ncc_maps(image, templates)?;
    let sizes: Vec<(usize, usize)> = templates.iter().map(|t| (t.width(), t.height())).collect();
    best_placement(&maps, image.width(), &sizes, threshold)
}

/// Per-state template bank: each template with the frame box it was cut
/// from, so a detection also yields the displacement of the part from its
/// canonical position.
#[derive(Debug, Clone)]
pub struct TemplateBank {
    pub state: CycleState,
    pub templates: Vec<ImageRaster>,
    pub canonical: Vec<BoundingBox>,
    /// Spectra for frames of the crop table's size, computed once.
    spectra: Vec<TemplateSpectrum>,
}

#[derive(Debug, Clone)]
pub struct RoiDetector {
    pub banks: Vec<TemplateBank>,
    pub crops: CropTable,
    pub threshold: f64,
}

/// Where the ROI of one frame was found and which rectangle to feed the
/// classifier.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoiLocation {
    /// The detector's box, or the fixed crop rectangle on fallback.
    pub bbox: BoundingBox,
    pub score: Option<f64>,
    /// Fixed crop rectangle moved by the detected displacement.
    pub crop_rect: BoundingBox,
    pub fell_back: bool,
}

pub const DEFAULT_DETECTION_THRESHOLD: f64 = 0.6;

impl RoiDetector {
    /// Detector built from the generator's clean renders.
    pub fn synthetic(scene: &crate::synthgen::SceneConfig, threshold: f64) -> Result<Self> {
        let renderer = crate::synthgen::Renderer::new(scene.clone())?;
        let mut planner = FftPlanner::new();
        let mut banks = Vec::new();
        for s in [4u8, 9] {
            let state = CycleState::new(s)?;
            let (templates, canonical): (Vec<_>, Vec<_>) = renderer
                .templates(state)?
                .into_iter()
                .map(|(_, t, b)| (t, b))
                .unzip();
            check_sizes(scene.width, scene.height, &templates)?;
            let spectra = spectra(&templates, scene.width, scene.height, &mut planner);
            banks.push(TemplateBank {
                state,
                templates,
                canonical,
                spectra,
            });
        }
        Ok(RoiDetector {
            banks,
            crops: CropTable::default_for(scene.width, scene.height)?,
            threshold,
        })
    }

    /// Runs detection for `state`, falling back to the fixed crop when no
    /// template clears the threshold.
    pub fn locate(&self, image: &ImageRaster, state: CycleState) -> Result<RoiLocation> {
        let fixed = self.crops.get(state)?;
        fixed.validate_for(image.width(), image.height())?;
        let fallback = RoiLocation {
            bbox: fixed,
            score: None,
            crop_rect: fixed,
            fell_back: true,
        };
        let Some(bank) = self.banks.iter().find(|b| b.state == state) else {
            return Ok(fallback);
        };
        let detection = if (image.width(), image.height()) == (self.crops.frame_width, self.crops.frame_height) {
            check_detectable(image, &bank.templates)?;
            let maps = ncc_from_spectra(image, &bank.spectra, &mut FftPlanner::new());
            let sizes: Vec<(usize, usize)> = bank.spectra.iter().map(|t| (t.width, t.height)).collect();
            best_placement(&maps, image.width(), &sizes, self.threshold)?
        } else {
            detect_roi_template(image, &bank.templates, self.threshold)?
        };
        match detection {
            Detection::NotFound { .. } => Ok(fallback),
            Detection::Found {
                bbox,
                score,
                template_index,
            } => {
                let canon = bank.canonical[template_index];
                let dx = bbox.x_min as isize - canon.x_min as isize;
                let dy = bbox.y_min as isize - canon.y_min as isize;
                let max_x = (image.width() - fixed.width()) as isize;
                let max_y = (image.height() - fixed.height()) as isize;
                let nx = (fixed.x_min as isize + dx).clamp(0, max_x) as usize;
                let ny = (fixed.y_min as isize + dy).clamp(0, max_y) as usize;
                let crop_rect = BoundingBox::new(nx, ny, nx + fixed.width(), ny + fixed.height())?;
                Ok(RoiLocation {
                    bbox,
                    score: Some(score),
                    crop_rect,
                    fell_back: false,
                })
            }
        }
    }
}
