//! Binary checkpoint format.
//!
//! ```text
//! "RFN1" | u32 header_len | header JSON | f64 params (LE) | u32 CRC32
//! ```
//!
//! The CRC covers everything between the magic bytes and the CRC itself.
//! Parameters are written in layer order, weight before bias, always as
//! little-endian `f64` regardless of the model's scalar type.

use serde::{Deserialize, Serialize};

use super::layer::LayerSpec;
use super::model::{Architecture, Model};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::CLASS_COUNT;

pub const MAGIC: &[u8; 4] = b"RFN1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    class_count: usize,
    base_boundary: usize,
    seed: u64,
    scalar: String,
    param_count: usize,
}

fn format_err(offset: usize, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        offset,
        reason: reason.into(),
    }
}

pub fn save_checkpoint<T: Scalar>(model: &Model<T>) -> Vec<u8> {
    let arch = model.architecture();
    let header = Header {
        input_shape: arch.input_shape,
        layers: arch.layers,
        class_count: model.class_count(),
        base_boundary: arch.base_boundary,
        seed: model.seed(),
        scalar: T::NAME.to_string(),
        param_count: model.param_count(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let params = model.param_values();
    let mut out = Vec::with_capacity(4 + 4 + json.len() + params.len() * 8 + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for v in params {
        out.extend_from_slice(&v.to_f64_lossless().to_le_bytes());
    }
    let crc = crc32fast::hash(&out[4..]);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn load_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<Model<T>> {
    if bytes.len() < 12 {
        return Err(format_err(bytes.len(), "stream too short for a checkpoint"));
    }
    if &bytes[..4] != MAGIC {
        return Err(format_err(0, "bad magic bytes"));
    }
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let header_end = 8usize.saturating_add(header_len);
    if header_end + 4 > bytes.len() {
        return Err(format_err(
            4,
            format!("header length {header_len} exceeds stream"),
        ));
    }
    let crc_at = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[crc_at..].try_into().unwrap());
    let actual = crc32fast::hash(&bytes[4..crc_at]);
    if stored != actual {
        return Err(format_err(
            crc_at,
            format!("CRC mismatch: stored {stored:08x}, computed {actual:08x}"),
        ));
    }
    let header: Header = serde_json::from_slice(&bytes[8..header_end])
        .map_err(|e| format_err(8, format!("invalid header: {e}")))?;
    if header.class_count != CLASS_COUNT {
        return Err(format_err(
            8,
            format!("class count {} unsupported", header.class_count),
        ));
    }
    let body = &bytes[header_end..crc_at];
    if body.len() != header.param_count * 8 {
        return Err(format_err(
            header_end,
            format!(
                "expected {} parameter bytes, found {}",
                header.param_count * 8,
                body.len()
            ),
        ));
    }
    let mut values = Vec::with_capacity(header.param_count);
    for (i, chunk) in body.chunks_exact(8).enumerate() {
        let v = f64::from_le_bytes(chunk.try_into().unwrap());
        let t = T::from_f64(v)
            .filter(|x| x.is_finite())
            .ok_or_else(|| format_err(header_end + i * 8, "non-finite parameter"))?;
        values.push(t);
    }
    let arch = Architecture {
        input_shape: header.input_shape,
        layers: header.layers,
        base_boundary: header.base_boundary,
    };
    Model::from_parts(&arch, header.seed, &values).map_err(|e| format_err(8, e.to_string()))
}

/// CRC32 stored in the trailer of a checkpoint, as lowercase hex.
pub fn checkpoint_checksum(bytes: &[u8]) -> Option<String> {
    let tail: [u8; 4] = bytes.get(bytes.len().checked_sub(4)?..)?.try_into().ok()?;
    Some(format!("{:08x}", u32::from_le_bytes(tail)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> Model<f64> {
        let mut m = Model::new(&Architecture::standard(), 42).unwrap();
        m.freeze_base();
        m
    }

    #[test]
    fn round_trip_is_identity() {
        let m = model();
        let bytes = save_checkpoint(&m);
        assert_eq!(&bytes[..4], MAGIC);
        let back: Model<f64> = load_checkpoint(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(save_checkpoint(&back), bytes);
    }

    #[test]
    fn f32_models_round_trip() {
        let m = Model::<f32>::new(&Architecture::compact(), 3).unwrap();
        let back: Model<f32> = load_checkpoint(&save_checkpoint(&m)).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn truncated_stream_is_a_format_error() {
        let bytes = save_checkpoint(&model());
        for cut in [0, 3, 11, 100, bytes.len() - 1] {
            let err = load_checkpoint::<f64>(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::Checkpoint { .. }), "cut {cut}: {err}");
        }
    }

    #[test]
    fn flipped_byte_reports_crc_offset() {
        let mut bytes = save_checkpoint(&model());
        let n = bytes.len();
        bytes[n / 2] ^= 0x40;
        match load_checkpoint::<f64>(&bytes) {
            Err(Error::Checkpoint { offset, .. }) => assert_eq!(offset, n - 4),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_magic() {
        let mut bytes = save_checkpoint(&model());
        bytes[0] = b'X';
        assert!(matches!(
            load_checkpoint::<f64>(&bytes),
            Err(Error::Checkpoint { offset: 0, .. })
        ));
    }

    #[test]
    fn header_is_canonical_json() {
        let bytes = save_checkpoint(&model());
        let len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let text = std::str::from_utf8(&bytes[8..8 + len]).unwrap();
        assert!(text.starts_with(r#"{"input_shape":[32,32,1],"layers":[{"kind":"conv2d""#));
        assert!(text.contains(r#""base_boundary":7,"seed":42,"scalar":"f64""#));
    }
}
