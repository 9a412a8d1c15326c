use crate::error::{Error, Result};
use crate::raster::ImageRaster;

/// Source coordinate and blend weight for each output index along one axis,
/// using half-pixel centers and edge clamping.
fn axis_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resize with half-pixel centers.
pub fn resize_bilinear(image: &ImageRaster, out_w: usize, out_h: usize) -> Result<ImageRaster> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::invalid(format!("resize target {out_w}x{out_h} must be positive")));
    }
    let c = image.channels();
    let xs = axis_taps(image.width(), out_w);
    let ys = axis_taps(image.height(), out_h);
    let mut out = Vec::with_capacity(out_w * out_h * c);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for ch in 0..c {
                let top = image.get(x0, y0, ch) * (1.0 - fx) + image.get(x1, y0, ch) * fx;
                let bottom = image.get(x0, y1, ch) * (1.0 - fx) + image.get(x1, y1, ch) * fx;
                out.push((top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0));
            }
        }
    }
    ImageRaster::new(out_w, out_h, c, out)
}

/// Bilinear resize of an arbitrary real-valued single-channel plane
/// (no clamping). Used to upsample activation maps.
pub fn resize_plane(values: &[f64], in_w: usize, in_h: usize, out_w: usize, out_h: usize) -> Vec<f64> {
    let xs = axis_taps(in_w, out_w);
    let ys = axis_taps(in_h, out_h);
    let mut out = Vec::with_capacity(out_w * out_h);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = values[y0 * in_w + x0] * (1.0 - fx) + values[y0 * in_w + x1] * fx;
            let bottom = values[y1 * in_w + x0] * (1.0 - fx) + values[y1 * in_w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}
