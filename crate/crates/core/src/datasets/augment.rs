use super::LabeledImage;
use crate::error::{Error, Result};
use crate::micronet::Tensor;

/// Mirrors an `[h, w, c]` tensor left to right.
pub fn reflect_pixels(px: &Tensor<f64>) -> Tensor<f64> {
    let (w, c) = (px.shape()[1], px.shape()[2]);
    let src = px.data();
    Tensor::from_fn(px.shape(), |i| {
        let (row, rem) = (i / (w * c), i % (w * c));
        let (col, ch) = (rem / c, rem % c);
        src[(row * w + (w - 1 - col)) * c + ch]
    })
}

/// Shifts content by `(dx, dy)` pixels; vacated pixels become zero.
pub fn translate_pixels(px: &Tensor<f64>, dx: i64, dy: i64) -> Result<Tensor<f64>> {
    let (h, w, c) = (px.shape()[0], px.shape()[1], px.shape()[2]);
    if dx.unsigned_abs() as usize >= w || dy.unsigned_abs() as usize >= h {
        return Err(Error::Range(format!(
            "shift ({dx}, {dy}) out of range for {w}x{h} image"
        )));
    }
    let src = px.data();
    Ok(Tensor::from_fn(px.shape(), |i| {
        let (row, rem) = ((i / (w * c)) as i64, i % (w * c));
        let (col, ch) = ((rem / c) as i64, rem % c);
        let (sy, sx) = (row - dy, col - dx);
        if sy < 0 || sx < 0 || sy >= h as i64 || sx >= w as i64 {
            0.0
        } else {
            src[(sy as usize * w + sx as usize) * c + ch]
        }
    }))
}

pub fn reflect_h(img: &LabeledImage) -> LabeledImage {
    LabeledImage {
        pixels: reflect_pixels(&img.pixels),
        label: img.label,
        source_id: img.source_id.clone(),
    }
}

pub fn translate(img: &LabeledImage, dx: i64, dy: i64) -> Result<LabeledImage> {
    Ok(LabeledImage {
        pixels: translate_pixels(&img.pixels, dx, dy)?,
        label: img.label,
        source_id: img.source_id.clone(),
    })
}
