//! Binary PPM (P6, maxval 255) frames and the image-range conversions used
//! around the model.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Decode a P6 image into `(H, W, 3)` values in `[0, 1]`.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor<f32>> {
    if bytes.len() < 2 {
        return Err(Error::MalformedPpm("file too short for a magic number".into()));
    }
    if &bytes[..2] != b"P6" {
        return Err(Error::UnsupportedPpm(String::from_utf8_lossy(&bytes[..2]).into_owned()));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        skip_space_and_comments(bytes, &mut pos);
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::MalformedPpm(format!("missing header field {}", i + 1)));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *field = text.parse().map_err(|_| Error::MalformedPpm(format!("header value `{text}` out of range")))?;
    }
    let [w, h, maxval] = fields;
    if w == 0 || h == 0 {
        return Err(Error::MalformedPpm(format!("zero extent {w}×{h}")));
    }
    if maxval != 255 {
        return Err(Error::UnsupportedPpm(format!("P6 with maxval {maxval}")));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::MalformedPpm("header must end with one whitespace byte".into())),
    }
    let expected = w.checked_mul(h).and_then(|n| n.checked_mul(3)).ok_or_else(|| Error::MalformedPpm("extent overflow".into()))?;
    let payload = &bytes[pos..];
    if payload.len() < expected {
        return Err(Error::TruncatedPpm { expected, found: payload.len() });
    }
    let data = payload[..expected].iter().map(|&b| f32::from(b) / 255.0).collect();
    Tensor::from_vec(&[h, w, 3], data)
}

fn skip_space_and_comments(bytes: &[u8], pos: &mut usize) {
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

/// Encode `(H, W, 3)` values, clamped to `[0, 1]` and rounded to 8 bits.
pub fn encode_ppm(img: &Tensor<f32>) -> Result<Vec<u8>> {
    let Some((h, w, 3)) = img.hwc() else {
        return Err(Error::shape("write_ppm", format!("expected (H, W, 3), got {:?}", img.shape())));
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(img.data().iter().map(|&v| {
        let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        (v * 255.0).round() as u8
    }));
    Ok(out)
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes)
}

pub fn write_ppm(img: &Tensor<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_ppm(img)?).map_err(|e| Error::io(path, e))
}

/// `[0, 1]` image to the model's `[-1, 1]` range.
pub fn to_model_range(img: &Tensor<f32>) -> Tensor<f32> {
    img.map(|v| 2.0 * v - 1.0)
}

/// Model output back to `[0, 1]`, clamping first.
pub fn from_model_range(img: &Tensor<f32>) -> Tensor<f32> {
    img.map(|v| (v.clamp(-1.0, 1.0) + 1.0) * 0.5)
}
