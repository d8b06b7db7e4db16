//! Binary portable graymap / pixmap (P5 / P6) codec.

use crate::error::{Error, Result};
use crate::micronet::Tensor;

/// Decodes a P5 or P6 image into `[h, w, c]` values scaled to `[0, 1]`.
pub fn decode(bytes: &[u8]) -> Result<Tensor<f64>> {
    let mut pos = 0;
    let magic = next_token(bytes, &mut pos)?;
    let channels = match magic.as_slice() {
        b"P5" => 1,
        b"P6" => 3,
        other => {
            return Err(Error::ImageFormat(format!(
                "unsupported magic {:?}",
                String::from_utf8_lossy(other)
            )))
        }
    };
    let width = parse_number(bytes, &mut pos)?;
    let height = parse_number(bytes, &mut pos)?;
    let maxval = parse_number(bytes, &mut pos)?;
    if width == 0 || height == 0 || !(1..=65535).contains(&maxval) {
        return Err(Error::ImageFormat(format!(
            "bad header: {width}x{height} maxval {maxval}"
        )));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let sample_bytes = if maxval > 255 { 2 } else { 1 };
    let need = width * height * channels * sample_bytes;
    let raster = bytes
        .get(pos..pos + need)
        .ok_or_else(|| Error::ImageFormat(format!("raster truncated: need {need} bytes")))?;
    let scale = maxval as f64;
    let data = if sample_bytes == 1 {
        raster.iter().map(|&b| (b as f64 / scale).min(1.0)).collect()
    } else {
        raster
            .chunks_exact(2)
            .map(|p| (u16::from_be_bytes([p[0], p[1]]) as f64 / scale).min(1.0))
            .collect()
    };
    Tensor::from_vec(vec![height, width, channels], data)
}

/// Encodes `[h, w, 1]` as P5 or `[h, w, 3]` as P6 with 8-bit samples.
pub fn encode(px: &Tensor<f64>) -> Result<Vec<u8>> {
    let &[h, w, c] = px.shape() else {
        return Err(Error::ImageFormat(format!("expected HxWxC, got {:?}", px.shape())));
    };
    let magic = match c {
        1 => "P5",
        3 => "P6",
        _ => return Err(Error::ImageFormat(format!("{c} channels cannot be written as PNM"))),
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.extend(
        px.data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    Ok(out)
}

/// Nearest-neighbour resize plus channel conversion (RGB to gray is the channel mean).
pub fn resize_nearest(px: &Tensor<f64>, height: usize, width: usize, channels: usize) -> Tensor<f64> {
    let (sh, sw, sc) = (px.shape()[0], px.shape()[1], px.shape()[2]);
    if (sh, sw, sc) == (height, width, channels) {
        return px.clone();
    }
    let src = px.data();
    Tensor::from_fn(&[height, width, channels], |i| {
        let (row, rem) = (i / (width * channels), i % (width * channels));
        let (col, ch) = (rem / channels, rem % channels);
        let sy = row * sh / height;
        let sx = col * sw / width;
        let base = (sy * sw + sx) * sc;
        match (sc, channels) {
            (a, b) if a == b => src[base + ch],
            (3, 1) => (src[base] + src[base + 1] + src[base + 2]) / 3.0,
            _ => src[base],
        }
    })
}

fn skip_ws_and_comments(bytes: &[u8], pos: &mut usize) {
    while *pos < bytes.len() {
        match bytes[*pos] {
            b'#' => {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
            }
            b if b.is_ascii_whitespace() => *pos += 1,
            _ => break,
        }
    }
}

fn next_token(bytes: &[u8], pos: &mut usize) -> Result<Vec<u8>> {
    skip_ws_and_comments(bytes, pos);
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() && bytes[*pos] != b'#' {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::ImageFormat("unexpected end of header".into()));
    }
    Ok(bytes[start..*pos].to_vec())
}

fn parse_number(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    let tok = next_token(bytes, pos)?;
    std::str::from_utf8(&tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| {
            Error::ImageFormat(format!("bad header number {:?}", String::from_utf8_lossy(&tok)))
        })
}
