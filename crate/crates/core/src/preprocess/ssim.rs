//! Mean structural similarity with a uniform window.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::ImageRaster;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    /// Side of the square uniform window; odd, at least 3.
    pub window: usize,
    pub k1: f64,
    pub k2: f64,
    /// Value range of the pixels (`L`); 1.0 for unit-scaled images.
    pub dynamic_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams {
            window: 7,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
        }
    }
}

impl SsimParams {
    pub fn validate(&self) -> Result<()> {
        if self.window < 3 || self.window.is_multiple_of(2) {
            return Err(Error::invalid(format!("SSIM window {} must be odd and >= 3", self.window)));
        }
        if !(self.k1 > 0.0 && self.k2 > 0.0) {
            return Err(Error::invalid("SSIM constants k1, k2 must be positive"));
        }
        if !(self.dynamic_range > 0.0 && self.dynamic_range.is_finite()) {
            return Err(Error::invalid("SSIM dynamic range must be positive"));
        }
        Ok(())
    }

    pub fn c1(&self) -> f64 {
        (self.k1 * self.dynamic_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.dynamic_range).powi(2)
    }
}

/// Sums of `values` over every `win`×`win` valid-mode window, computed
/// separably (rows, then columns).
fn window_sums(values: &[f64], width: usize, height: usize, win: usize) -> Vec<f64> {
    let ow = width - win + 1;
    let oh = height - win + 1;
    let mut rows = vec![0.0; ow * height];
    for y in 0..height {
        let row = &values[y * width..(y + 1) * width];
        for x in 0..ow {
            rows[y * ow + x] = row[x..x + win].iter().sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            let mut s = 0.0;
            for k in 0..win {
                s += rows[(y + k) * ow + x];
            }
            out[y * ow + x] = s;
        }
    }
    out
}

/// Mean SSIM over all window positions (stride 1, no padding). Color
/// inputs are compared on their channel-mean luma.
pub fn ssim(a: &ImageRaster, b: &ImageRaster, params: &SsimParams) -> Result<f64> {
    params.validate()?;
    if !a.dims_match(b) {
        return Err(Error::invalid(format!(
            "SSIM inputs differ: {}x{}x{} vs {}x{}x{}",
            a.width(),
            a.height(),
            a.channels(),
            b.width(),
            b.height(),
            b.channels()
        )));
    }
    let win = params.window;
    if a.width() < win || a.height() < win {
        return Err(Error::invalid(format!(
            "image {}x{} smaller than SSIM window {win}",
            a.width(),
            a.height()
        )));
    }
    let (w, h) = (a.width(), a.height());
    let x = a.to_luma().into_pixels();
    let y = b.to_luma().into_pixels();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();

    let sx = window_sums(&x, w, h, win);
    let sy = window_sums(&y, w, h, win);
    let sxx = window_sums(&xx, w, h, win);
    let syy = window_sums(&yy, w, h, win);
    let sxy = window_sums(&xy, w, h, win);

    let n = (win * win) as f64;
    let (c1, c2) = (params.c1(), params.c2());
    let mut total = 0.0;
    for i in 0..sx.len() {
        let mx = sx[i] / n;
        let my = sy[i] / n;
        let vx = sxx[i] / n - mx * mx;
        let vy = syy[i] / n - my * my;
        let cxy = sxy[i] / n - mx * my;
        let num = (2.0 * mx * my + c1) * (2.0 * cxy + c2);
        let den = (mx * mx + my * my + c1) * (vx + vy + c2);
        total += num / den;
    }
    Ok(total / sx.len() as f64)
}
