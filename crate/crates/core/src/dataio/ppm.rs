//! Binary Netpbm (`P6`) colour images.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    name: &'a str,
}

impl Cursor<'_> {
    fn fail(&self, detail: impl Into<String>) -> Error {
        Error::Format {
            path: self.name.to_string(),
            offset: self.pos,
            detail: detail.into(),
        }
    }

    /// Skips whitespace and `#` comments (which run to end of line).
    fn skip_separators(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' && self.bytes[self.pos] != b'\r' {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_separators();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(match self.bytes.get(self.pos) {
                None => self.fail(format!("unexpected end of header while reading {what}")),
                Some(&b) => self.fail(format!("expected {what}, found byte {b:#04x}")),
            });
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos]).expect("digits are ASCII");
        text.parse().map_err(|_| {
            let mut e = self.fail(format!("{what} {text} is too large"));
            if let Error::Format { offset, .. } = &mut e {
                *offset = start;
            }
            e
        })
    }
}

/// Decodes a `P6` file into a `3 x H x W` tensor scaled to `[0, 1]`.
/// `name` is only used in error messages.
pub fn decode_ppm(bytes: &[u8], name: &str) -> Result<Tensor<f32>> {
    let mut c = Cursor { bytes, pos: 0, name };
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(c.fail("not a binary PPM: missing \"P6\" magic"));
    }
    c.pos = 2;
    if !bytes.get(2).is_some_and(|b| b.is_ascii_whitespace() || *b == b'#') {
        return Err(c.fail("expected whitespace after magic"));
    }
    let width = c.number("width")?;
    let height = c.number("height")?;
    let maxval = c.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(c.fail(format!("zero image dimension {width}x{height}")));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(c.fail(format!("maxval {maxval} outside 1..=65535")));
    }
    match bytes.get(c.pos) {
        Some(b) if b.is_ascii_whitespace() => c.pos += 1,
        Some(&b) => return Err(c.fail(format!("expected single whitespace before raster, found {b:#04x}"))),
        None => return Err(c.fail("header ends before raster")),
    }
    let sample = if maxval < 256 { 1 } else { 2 };
    let n = width
        .checked_mul(height)
        .and_then(|p| p.checked_mul(3))
        .ok_or_else(|| c.fail("image dimensions overflow"))?;
    let need = n * sample;
    let raster = &bytes[c.pos..];
    if raster.len() < need {
        c.pos = bytes.len();
        return Err(c.fail(format!("raster truncated: need {need} bytes, found {}", raster.len())));
    }
    let denom = maxval as f32;
    let plane = width * height;
    let mut data = vec![0.0f32; n];
    for i in 0..plane {
        for ch in 0..3 {
            let k = i * 3 + ch;
            let v = if sample == 1 {
                raster[k] as usize
            } else {
                u16::from_be_bytes([raster[2 * k], raster[2 * k + 1]]) as usize
            };
            if v > maxval {
                c.pos += k * sample;
                return Err(c.fail(format!("sample {v} exceeds maxval {maxval}")));
            }
            data[ch * plane + i] = v as f32 / denom;
        }
    }
    Tensor::new([3, height, width], data)
}

/// Encodes a `3 x H x W` image in `[0, 1]` as 8-bit `P6` (values are
/// clamped and rounded).
pub fn encode_ppm(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let &[3, h, w] = image.shape() else {
        return Err(Error::shape("encode_ppm", format!("expected 3 x H x W, got {:?}", image.shape())));
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    let d = image.data();
    out.reserve(plane * 3);
    for i in 0..plane {
        for ch in 0..3 {
            out.push((d[ch * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn read_ppm(path: &Path) -> Result<Tensor<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes, &path.display().to_string())
}

pub fn write_ppm(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let bytes = encode_ppm(image)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
