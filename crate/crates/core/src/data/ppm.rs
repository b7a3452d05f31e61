//! Binary portable pixmap (P6) and graymap (P5) files with 8-bit samples.
//!
//! Images load as `[h, w, 3]` tensors with values in `[0, 1]` (sample / 255)
//! and save by the inverse mapping. The graymap writer min-max scales an
//! arbitrary plane into the byte range and records the original range in a
//! JSON sidecar next to the file, so magnitudes stay recoverable.

use std::fs;
use std::path::Path;

use crate::error::{MocError, Result};
use crate::nn::{sc, Scalar, Tensor};

/// Incremental token scanner over PNM header bytes: skips whitespace and
/// `#` comments, yields ASCII integer fields.
struct HeaderScanner<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderScanner<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn skip_filler(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b' ' | b'\t' | b'\r' | b'\n' => self.pos += 1,
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
    }

    fn integer(&mut self, what: &str) -> Result<usize> {
        self.skip_filler();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(MocError::Format(format!("pixmap header: expected {what}")));
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos]).expect("digits are UTF-8");
        text.parse()
            .map_err(|_| MocError::Format(format!("pixmap header: {what} {text:?} out of range")))
    }

    /// Consume exactly one whitespace byte (the separator before payload).
    fn payload_start(&mut self) -> Result<usize> {
        if self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            Ok(self.pos + 1)
        } else {
            Err(MocError::Format("pixmap header: missing separator before pixel data".into()))
        }
    }
}

fn read_pnm_payload(bytes: &[u8], magic: &[u8; 2], samples_per_pixel: usize) -> Result<(usize, usize, Vec<u8>)> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(MocError::Format(format!(
            "not a {} file (bad magic)",
            std::str::from_utf8(magic).unwrap()
        )));
    }
    let mut scan = HeaderScanner::new(&bytes[2..]);
    let w = scan.integer("width")?;
    let h = scan.integer("height")?;
    let maxval = scan.integer("max sample value")?;
    if maxval != 255 {
        return Err(MocError::Format(format!("only 8-bit pixmaps are supported, max value was {maxval}")));
    }
    if w == 0 || h == 0 {
        return Err(MocError::Format(format!("degenerate pixmap extent {w}x{h}")));
    }
    let start = 2 + scan.payload_start()?;
    let need = h * w * samples_per_pixel;
    let payload = &bytes[start.min(bytes.len())..];
    if payload.len() < need {
        return Err(MocError::Format(format!(
            "pixmap payload truncated: expected {need} bytes, found {}",
            payload.len()
        )));
    }
    Ok((h, w, payload[..need].to_vec()))
}

/// Reads a binary P6 color image into an `[h, w, 3]` tensor in `[0, 1]`.
pub fn read_ppm<F: Scalar>(path: &Path) -> Result<Tensor<F>> {
    let bytes = fs::read(path)?;
    let (h, w, payload) = read_pnm_payload(&bytes, b"P6", 3)?;
    let data: Vec<F> = payload.iter().map(|&b| sc(b as f64 / 255.0)).collect();
    Tensor::new(&[h, w, 3], data)
}

/// Writes an `[h, w, 3]` tensor as a binary P6 image; values are clamped to
/// `[0, 1]` and scaled to bytes.
pub fn write_ppm<F: Scalar>(path: &Path, image: &Tensor<F>) -> Result<()> {
    let shape = image.shape();
    if shape.len() != 3 || shape[2] != 3 {
        return Err(MocError::Shape(format!("P6 writer needs an [h, w, 3] image, got {shape:?}")));
    }
    let (h, w) = (shape[0], shape[1]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(h * w * 3);
    for &v in image.data() {
        let x = v.to_f64().unwrap().clamp(0.0, 1.0);
        out.push((x * 255.0).round() as u8);
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads a binary P5 graymap into an `[h, w]` tensor in `[0, 1]`.
pub fn read_pgm<F: Scalar>(path: &Path) -> Result<Tensor<F>> {
    let bytes = fs::read(path)?;
    let (h, w, payload) = read_pnm_payload(&bytes, b"P5", 1)?;
    let data: Vec<F> = payload.iter().map(|&b| sc(b as f64 / 255.0)).collect();
    Tensor::new(&[h, w], data)
}

/// Writes an `[h, w]` plane as a binary P5 graymap, min-max scaled into the
/// byte range, and records the original `{"min": .., "max": ..}` in a JSON
/// sidecar at the same path with extension `json`. A constant plane writes
/// as all zeros.
pub fn write_pgm_normalized<F: Scalar>(path: &Path, plane: &Tensor<F>) -> Result<()> {
    let shape = plane.shape();
    if shape.len() != 2 {
        return Err(MocError::Shape(format!("P5 writer needs an [h, w] plane, got {shape:?}")));
    }
    let (h, w) = (shape[0], shape[1]);
    let values: Vec<f64> = plane.data().iter().map(|v| v.to_f64().unwrap()).collect();
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.reserve(h * w);
    for v in &values {
        let byte = if span > 0.0 { ((v - min) / span * 255.0).round() as u8 } else { 0 };
        out.push(byte);
    }
    fs::write(path, out)?;
    let sidecar = serde_json::json!({ "min": min, "max": max });
    fs::write(path.with_extension("json"), serde_json::to_string(&sidecar).expect("two floats serialize"))?;
    Ok(())
}
