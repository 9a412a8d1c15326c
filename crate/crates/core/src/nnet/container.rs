//! Binary model files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "ASSEMAI1"                      8-byte magic
//! u32 tensor_count
//! tensor_count × {
//!     u32 name_len, name (UTF-8)
//!     u32 rank, rank × u64 dims
//!     product(dims) × f64 values
//! }
//! ```
//!
//! The first record is always `arch` holding the seven architecture
//! integers (channels, height, width, conv1 filters, conv2 filters, hidden,
//! classes) as floats; the eight parameter tensors follow in layer order.

use std::path::Path;

use super::model::{Architecture, ModelParams, PARAM_NAMES};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"ASSEMAI1";
const ARCH_NAME: &str = "arch";

fn push_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], values: &[f64]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_model(model: &ModelParams) -> Vec<u8> {
    let a = model.arch;
    let arch = [
        a.in_channels,
        a.in_height,
        a.in_width,
        a.conv1_filters,
        a.conv2_filters,
        a.hidden,
        a.classes,
    ]
    .map(|v| v as f64);
    let mut out = Vec::with_capacity(16 + 8 * model.num_params());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(1 + model.tensors.len() as u32).to_le_bytes());
    push_tensor(&mut out, ARCH_NAME, &[arch.len()], &arch);
    for (name, t) in model.named() {
        push_tensor(&mut out, name, t.shape(), t.data());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.bytes.len() as u64,
                format!("truncated while reading {what} at offset {}", self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let start = self.pos as u64;
        let len = self.u32("name length")? as usize;
        let name = std::str::from_utf8(self.take(len, "tensor name")?)
            .map_err(|_| Error::format(start + 4, "tensor name is not UTF-8"))?
            .to_string();
        let rank = self.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        let mut count: usize = 1;
        for _ in 0..rank {
            let d = self.u64("dimension")? as usize;
            count = count
                .checked_mul(d)
                .ok_or_else(|| Error::format(start, format!("tensor {name} dimensions overflow")))?;
            shape.push(d);
        }
        let bytes = self.take(
            count
                .checked_mul(8)
                .ok_or_else(|| Error::format(start, format!("tensor {name} too large")))?,
            "tensor values",
        )?;
        let values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, values).map_err(|e| Error::format(start, format!("tensor {name}: {e}")))?;
        Ok((name, t))
    }
}

pub fn decode_model(bytes: &[u8]) -> Result<ModelParams> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(MAGIC.len(), "magic")?;
    if magic != MAGIC {
        return Err(Error::format(0, "bad magic, not a model file"));
    }
    let count = r.u32("tensor count")? as usize;
    if count != 1 + PARAM_NAMES.len() {
        return Err(Error::format(8, format!("expected {} tensors, found {count}", 1 + PARAM_NAMES.len())));
    }
    let arch_at = r.pos as u64;
    let (name, arch_t) = r.tensor()?;
    if name != ARCH_NAME || arch_t.len() != 7 {
        return Err(Error::format(arch_at, "first tensor must be the 7-value arch record"));
    }
    let v: Vec<usize> = arch_t
        .data()
        .iter()
        .map(|&x| {
            if x >= 0.0 && x.fract() == 0.0 && x < 1e9 {
                Ok(x as usize)
            } else {
                Err(Error::format(arch_at, format!("arch value {x} is not a size")))
            }
        })
        .collect::<Result<_>>()?;
    let arch = Architecture {
        in_channels: v[0],
        in_height: v[1],
        in_width: v[2],
        conv1_filters: v[3],
        conv2_filters: v[4],
        hidden: v[5],
        classes: v[6],
    };
    let mut tensors = Vec::with_capacity(PARAM_NAMES.len());
    for want in PARAM_NAMES {
        let at = r.pos as u64;
        let (name, t) = r.tensor()?;
        if name != want {
            return Err(Error::format(at, format!("expected tensor {want}, found {name}")));
        }
        tensors.push(t);
    }
    if r.pos != bytes.len() {
        return Err(Error::format(
            r.pos as u64,
            format!("{} trailing bytes after the last tensor", bytes.len() - r.pos),
        ));
    }
    ModelParams::from_tensors(arch, tensors).map_err(|e| Error::format(arch_at, e.to_string()))
}

pub fn save_model(model: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_model(model))?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelParams> {
    decode_model(&std::fs::read(path)?)
}

/// FNV-1a 64 hash of the encoded model, as 16 hex digits.
pub fn model_id(model: &ModelParams) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in encode_model(model) {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    format!("{h:016x}")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> ModelParams {
        let arch = Architecture {
            in_channels: 1,
            in_height: 8,
            in_width: 12,
            conv1_filters: 2,
            conv2_filters: 3,
            hidden: 4,
            classes: 5,
        };
        let mut m = ModelParams::init(arch, 3).unwrap();
        m.tensors[7].data_mut()[1] = -0.0;
        m.tensors[5].data_mut()[0] = f64::MIN_POSITIVE / 4.0;
        m
    }

    #[test]
    fn round_trip_is_bitwise() {
        let m = model();
        let back = decode_model(&encode_model(&m)).unwrap();
        assert_eq!(back.arch, m.arch);
        for (a, b) in back.tensors.iter().zip(&m.tensors) {
            assert_eq!(a.shape(), b.shape());
            let ab: Vec<u64> = a.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u64> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.bin");
        save_model(&model(), &p).unwrap();
        assert_eq!(load_model(&p).unwrap(), model());
    }

    #[test]
    fn corrupt_magic() {
        let mut b = encode_model(&model());
        b[0] = b'X';
        assert!(matches!(decode_model(&b), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn trailing_bytes_name_offset() {
        let mut b = encode_model(&model());
        let len = b.len() as u64;
        b.extend_from_slice(&[0, 1, 2]);
        match decode_model(&b) {
            Err(Error::Format { offset, message }) => {
                assert_eq!(offset, len);
                assert!(message.contains("trailing"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn truncation_everywhere_fails() {
        let b = encode_model(&model());
        for cut in [0, 5, 8, 11, 20, b.len() / 2, b.len() - 1] {
            assert!(matches!(decode_model(&b[..cut]), Err(Error::Format { .. })), "cut {cut}");
        }
    }

    #[test]
    fn model_id_tracks_content() {
        let a = model();
        let mut b = a.clone();
        assert_eq!(model_id(&a), model_id(&b));
        b.tensors[0].data_mut()[0] += 1e-12;
        assert_ne!(model_id(&a), model_id(&b));
        assert_eq!(model_id(&a).len(), 16);
    }
}
