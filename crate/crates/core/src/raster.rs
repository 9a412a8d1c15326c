//! Pixel grids and their binary PGM/PPM encoding.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::types::BoundingBox;

/// A `width`×`height`×`channels` grid of values in `[0,1]`, row-major with
/// interleaved channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRaster {
    width: usize,
    height: usize,
    channels: usize,
    pixels: Vec<f64>,
}

impl ImageRaster {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid(format!("raster dimensions {width}x{height} must be positive")));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::invalid(format!("raster must have 1 or 3 channels, got {channels}")));
        }
        if pixels.len() != width * height * channels {
            return Err(Error::invalid(format!(
                "raster {width}x{height}x{channels} needs {} values, got {}",
                width * height * channels,
                pixels.len()
            )));
        }
        if let Some(i) = pixels.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid(format!("pixel value {} at index {i} outside [0,1]", pixels[i])));
        }
        Ok(ImageRaster {
            width,
            height,
            channels,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(width, height, channels, vec![value; width * height * channels])
    }

    /// Builds a single-channel raster from a closure over `(x, y)`.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        Self::new(width, height, 1, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    pub fn bounds(&self) -> BoundingBox {
        BoundingBox::full(self.width, self.height)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    /// Sets a pixel, clamping the value into `[0,1]`.
    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, value: f64) {
        self.pixels[(y * self.width + x) * self.channels + c] = value.clamp(0.0, 1.0);
    }

    /// Channel-mean luma. Single-channel rasters are returned unchanged.
    pub fn to_luma(&self) -> ImageRaster {
        if self.channels == 1 {
            return self.clone();
        }
        let c = self.channels as f64;
        let pixels = self
            .pixels
            .chunks_exact(self.channels)
            .map(|px| px.iter().sum::<f64>() / c)
            .collect();
        ImageRaster {
            width: self.width,
            height: self.height,
            channels: 1,
            pixels,
        }
    }

    /// Snaps every value onto the 256-level grid used by the file format.
    pub fn quantized(&self) -> ImageRaster {
        ImageRaster {
            pixels: self.pixels.iter().map(|&v| quantize(v) as f64 / 255.0).collect(),
            ..self.clone()
        }
    }

    pub fn dims_match(&self, other: &ImageRaster) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }
}

#[inline]
fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes as binary PGM (`P5`) or PPM (`P6`) with maxval 255.
pub fn encode_pnm(image: &ImageRaster) -> Vec<u8> {
    let magic = if image.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend(image.pixels.iter().map(|&v| quantize(v)));
    out
}

pub fn write_raster(image: &ImageRaster, path: impl AsRef<Path>) -> Result<()> {
    let mut file = fs::File::create(path)?;
    file.write_all(&encode_pnm(image))?;
    Ok(())
}

pub fn read_raster(path: impl AsRef<Path>) -> Result<ImageRaster> {
    decode_pnm(&fs::read(path)?)
}

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderCursor<'_> {
    fn skip_whitespace_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_whitespace_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::format(start as u64, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(start as u64, format!("{what} does not fit")))
    }
}

pub fn decode_pnm(bytes: &[u8]) -> Result<ImageRaster> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(Error::format(0, "expected magic P5 or P6")),
    };
    let mut cur = HeaderCursor { bytes, pos: 2 };
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval_at = cur.pos;
    let maxval = cur.number("maxval")?;
    if maxval != 255 {
        return Err(Error::format(maxval_at as u64, format!("unsupported maxval {maxval}, expected 255")));
    }
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        _ => return Err(Error::format(cur.pos as u64, "missing whitespace after maxval")),
    }
    if width == 0 || height == 0 {
        return Err(Error::format(2, format!("zero dimension {width}x{height}")));
    }
    let need = width * height * channels;
    let body = &bytes[cur.pos..];
    if body.len() < need {
        return Err(Error::format(
            bytes.len() as u64,
            format!("truncated payload: header declares {need} bytes, body holds {}", body.len()),
        ));
    }
    let pixels = body[..need].iter().map(|&b| b as f64 / 255.0).collect();
    ImageRaster::new(width, height, channels, pixels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn unit_pixel_maps_to_255() {
        let img = ImageRaster::filled(1, 1, 1, 1.0).unwrap();
        let enc = encode_pnm(&img);
        assert_eq!(*enc.last().unwrap(), 255);
        assert_eq!(&enc[..2], b"P5");
    }

    #[test]
    fn truncated_payload_reports_offset() {
        let mut bytes = b"P5\n4 4\n255\n".to_vec();
        bytes.extend([0u8; 10]);
        match decode_pnm(&bytes) {
            Err(Error::Format { offset, message }) => {
                assert_eq!(offset, bytes.len() as u64);
                assert!(message.contains("truncated"));
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_bad_magic_and_maxval() {
        assert!(matches!(decode_pnm(b"P2\n1 1\n255\n\0"), Err(Error::Format { offset: 0, .. })));
        assert!(matches!(decode_pnm(b"P5\n1 1\n65535\n\0\0"), Err(Error::Format { .. })));
    }

    #[test]
    fn header_comments_are_skipped() {
        let img = decode_pnm(b"P5\n# made by hand\n2 1\n255\n\x00\xff").unwrap();
        assert_eq!(img.pixels(), &[0.0, 1.0]);
    }

    #[test]
    fn rejects_out_of_range_values() {
        assert!(ImageRaster::new(1, 1, 1, vec![1.5]).is_err());
        assert!(ImageRaster::new(1, 1, 2, vec![0.0, 0.0]).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip_is_lossless_after_quantization(
            w in 1usize..9, h in 1usize..9, rgb in any::<bool>(), seed in any::<u64>()
        ) {
            let c = if rgb { 3 } else { 1 };
            let mut s = seed;
            let pixels = (0..w * h * c)
                .map(|_| {
                    s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    (s >> 11) as f64 / (1u64 << 53) as f64
                })
                .collect();
            let img = ImageRaster::new(w, h, c, pixels).unwrap();
            let back = decode_pnm(&encode_pnm(&img)).unwrap();
            prop_assert_eq!(back, img.quantized());
        }
    }
}
