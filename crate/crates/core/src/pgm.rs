//! Binary PGM (P5, maxval 255) images.

use std::path::Path;

use crate::error::{Error, Result};

/// Pixel byte for a value in `[0, 1]`: `round(clamp(v, 0, 1) · 255)`.
pub fn quantize(v: f64) -> u8 {
    let c = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    (c * 255.0).round() as u8
}

/// Encodes a row-major `height × width` plane.
pub fn encode_pgm(values: &[f64], width: usize, height: usize) -> Result<Vec<u8>> {
    if values.len() != width * height || values.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "encode_pgm: {} values for a {width}x{height} image",
            values.len()
        )));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| quantize(v)));
    Ok(out)
}

pub fn write_pgm(path: &Path, values: &[f64], width: usize, height: usize) -> Result<()> {
    std::fs::write(path, encode_pgm(values, width, height)?)?;
    Ok(())
}

/// A decoded image with values scaled back to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Pgm {
    pub fn values(&self) -> Vec<f64> {
        self.pixels.iter().map(|&p| f64::from(p) / 255.0).collect()
    }
}

/// Decodes a P5 image with maxval 255. Comments in the header are skipped.
pub fn decode_pgm(bytes: &[u8]) -> Result<Pgm> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Truncated("pgm header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(Error::Malformed(format!("pgm: expected P5, found {:?}", fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Malformed(format!("pgm: bad header field {s:?}")));
    let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return Err(Error::Malformed(format!("pgm: unsupported maxval {maxval}")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let data = bytes.get(pos + 1..).unwrap_or(&[]);
    if data.len() < width * height {
        return Err(Error::Truncated(format!("pgm raster: {} of {} bytes", data.len(), width * height)));
    }
    Ok(Pgm {
        width,
        height,
        pixels: data[..width * height].to_vec(),
    })
}

pub fn read_pgm(path: &Path) -> Result<Pgm> {
    decode_pgm(&std::fs::read(path)?)
}
