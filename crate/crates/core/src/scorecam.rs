//! Score-CAM saliency: each activation channel, upsampled and normalized,
//! masks the input; the rise in the target logit over an all-zero baseline
//! scores the channel, and a softmax over those scores weights the maps.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nnet::{argmax, forward, forward_cached, prepare_input, ModelParams, Tensor};
use crate::preprocess::resize::resize_plane;
use crate::raster::ImageRaster;
use crate::types::{AnomalyClass, BoundingBox};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConvLayer {
    Conv1,
    #[default]
    Conv2,
}

impl FromStr for ConvLayer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conv1" => Ok(ConvLayer::Conv1),
            "conv2" => Ok(ConvLayer::Conv2),
            other => Err(Error::invalid(format!("unknown layer {other:?}; expected conv1 or conv2"))),
        }
    }
}

/// One activation plane.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

/// Saliency over the classifier input, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    /// Set when every channel was constant, leaving nothing to weigh.
    pub degenerate: bool,
}

impl SaliencyMap {
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }
}

fn input_tensor(model: &ModelParams, image: &ImageRaster) -> Result<Tensor> {
    let a = model.arch;
    if a.in_channels != 1 {
        return Err(Error::invalid("saliency supports single-channel models only"));
    }
    let x = prepare_input(image, a.in_width, a.in_height)?;
    Tensor::new(vec![1, 1, a.in_height, a.in_width], x)
}

fn activations_for(model: &ModelParams, layer: ConvLayer, x: &Tensor) -> Result<Vec<ActivationMap>> {
    let a = model.arch;
    let cache = forward_cached(model, x)?;
    let ((h, w), planes, data) = match layer {
        ConvLayer::Conv1 => ((a.in_height, a.in_width), a.conv1_filters, cache.conv1),
        ConvLayer::Conv2 => (a.pool1_dims(), a.conv2_filters, cache.conv2),
    };
    Ok(data
        .chunks_exact(h * w)
        .take(planes)
        .map(|v| ActivationMap {
            width: w,
            height: h,
            values: v.to_vec(),
        })
        .collect())
}

/// Post-ReLU activations of `layer` for the image (resized to the model input).
pub fn activation_maps(model: &ModelParams, layer: ConvLayer, image: &ImageRaster) -> Result<Vec<ActivationMap>> {
    activations_for(model, layer, &input_tensor(model, image)?)
}

/// Min-max normalization; `None` for a constant plane.
fn normalize(values: &[f64]) -> Option<Vec<f64>> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return None;
    }
    Some(values.iter().map(|v| (v - lo) / (hi - lo)).collect())
}

pub fn score_cam(model: &ModelParams, layer: ConvLayer, image: &ImageRaster, target: AnomalyClass) -> Result<SaliencyMap> {
    let a = model.arch;
    if target.index() >= a.classes {
        return Err(Error::invalid(format!("class {target} outside the model's outputs")));
    }
    let x = input_tensor(model, image)?;
    let (w, h) = (a.in_width, a.in_height);
    let n = w * h;

    let mut upsampled = Vec::new();
    let mut masks = Vec::new();
    for m in activations_for(model, layer, &x)? {
        let up = resize_plane(&m.values, m.width, m.height, w, h);
        if let Some(norm) = normalize(&up) {
            masks.extend(norm.iter().zip(x.data()).map(|(k, p)| k * p));
            upsampled.push(up);
        }
    }
    if upsampled.is_empty() {
        return Ok(SaliencyMap {
            width: w,
            height: h,
            values: vec![0.0; n],
            degenerate: true,
        });
    }

    let t = target.index();
    let baseline = forward(model, &Tensor::zeros(&[1, 1, h, w]))?.row(0)[t];
    let logits = forward(model, &Tensor::new(vec![upsampled.len(), 1, h, w], masks)?)?;
    let scores: Vec<f64> = (0..upsampled.len()).map(|k| logits.row(k)[t] - baseline).collect();
    let top = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
    let z: f64 = exp.iter().sum();

    let mut sal = vec![0.0; n];
    for (e, up) in exp.iter().zip(&upsampled) {
        let alpha = e / z;
        for (s, v) in sal.iter_mut().zip(up) {
            *s += alpha * v;
        }
    }
    for s in sal.iter_mut() {
        *s = s.max(0.0);
    }
    let values = match normalize(&sal) {
        Some(v) => v,
        None if sal[0] > 0.0 => vec![1.0; n],
        None => vec![0.0; n],
    };
    Ok(SaliencyMap {
        width: w,
        height: h,
        values,
        degenerate: false,
    })
}

/// Explains the model's own prediction for `image`.
pub fn explain_prediction(
    model: &ModelParams,
    layer: ConvLayer,
    image: &ImageRaster,
) -> Result<(AnomalyClass, SaliencyMap)> {
    let logits = forward(model, &input_tensor(model, image)?)?;
    let class = AnomalyClass::from_index(argmax(logits.row(0)))?;
    Ok((class, score_cam(model, layer, image, class)?))
}

/// Share of total saliency inside `bbox` (0 for an all-zero map).
pub fn saliency_in_box_fraction(map: &SaliencyMap, bbox: &BoundingBox) -> Result<f64> {
    bbox.validate_for(map.width, map.height)?;
    let total: f64 = map.values.iter().sum();
    if total <= 0.0 {
        return Ok(0.0);
    }
    let mut inside = 0.0;
    for y in bbox.y_min..bbox.y_max {
        inside += map.values[y * map.width + bbox.x_min..y * map.width + bbox.x_max].iter().sum::<f64>();
    }
    Ok((inside / total).clamp(0.0, 1.0))
}

/// Maps a box between image sizes, rounding outward so the scaled box
/// never shrinks below the region it covers.
pub fn scale_box(bbox: &BoundingBox, from: (usize, usize), to: (usize, usize)) -> Result<BoundingBox> {
    let sx = to.0 as f64 / from.0 as f64;
    let sy = to.1 as f64 / from.1 as f64;
    let x0 = (bbox.x_min as f64 * sx).floor() as usize;
    let y0 = (bbox.y_min as f64 * sy).floor() as usize;
    let x1 = ((bbox.x_max as f64 * sx).ceil() as usize).clamp(x0 + 1, to.0);
    let y1 = ((bbox.y_max as f64 * sy).ceil() as usize).clamp(y0 + 1, to.1);
    BoundingBox::new(x0, y0, x1, y1)
}

/// Entry `i` of the overlay ramp: linear from blue `(0,0,1)` at 0 to red
/// `(1,0,0)` at 255.
pub fn ramp(i: u8) -> [f64; 3] {
    let t = i as f64 / 255.0;
    [t, 0.0, 1.0 - t]
}

/// Blends the base image's luma 50/50 with the ramp color of each pixel's
/// saliency. The result sits on the 8-bit grid.
pub fn render_heatmap(map: &SaliencyMap, base: &ImageRaster) -> Result<ImageRaster> {
    if (base.width(), base.height()) != (map.width, map.height) {
        return Err(Error::invalid(format!(
            "saliency is {}x{} but the base image is {}x{}",
            map.width,
            map.height,
            base.width(),
            base.height()
        )));
    }
    let luma = base.to_luma();
    let mut px = Vec::with_capacity(map.values.len() * 3);
    for (s, l) in map.values.iter().zip(luma.pixels()) {
        let c = ramp((s.clamp(0.0, 1.0) * 255.0).round() as u8);
        px.extend(c.iter().map(|v| 0.5 * l + 0.5 * v));
    }
    Ok(ImageRaster::new(map.width, map.height, 3, px)?.quantized())
}
