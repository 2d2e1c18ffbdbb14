//! Binary PGM (P5) images: the only pixel interchange format used by the
//! CLI. Bit-exact, dependency-free, and safe on untrusted bytes.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Hard cap on accepted image extents; anything larger is rejected before
/// allocation.
pub const MAX_EXTENT: usize = 1 << 14;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Gray8 {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Gray8 {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || width > MAX_EXTENT || height > MAX_EXTENT {
            return Err(Error::format("pgm", format!("unsupported extents {width}x{height}")));
        }
        if pixels.len() != width * height {
            return Err(Error::format(
                "pgm",
                format!("{}x{} needs {} pixels, got {}", width, height, width * height, pixels.len()),
            ));
        }
        Ok(Gray8 { width, height, pixels })
    }
}

/// Serialize to P5 with maxval 255.
pub fn encode(img: &Gray8) -> Vec<u8> {
    let header = format!("P5\n{} {}\n255\n", img.width, img.height);
    let mut out = header.into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

struct HeaderScanner<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderScanner<'a> {
    fn skip_separators(&mut self) -> Result<()> {
        loop {
            match self.bytes.get(self.pos) {
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(b'#') => {
                    while let Some(&b) = self.bytes.get(self.pos) {
                        self.pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                Some(_) => return Ok(()),
                None => return Err(Error::format("pgm", "truncated header".to_string())),
            }
        }
    }

    fn number(&mut self) -> Result<usize> {
        self.skip_separators()?;
        let start = self.pos;
        while matches!(self.bytes.get(self.pos), Some(b) if b.is_ascii_digit()) {
            self.pos += 1;
            if self.pos - start > 8 {
                return Err(Error::format("pgm", "header number too long".to_string()));
            }
        }
        if self.pos == start {
            return Err(Error::format("pgm", "expected a number in header".to_string()));
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos]).expect("digits are utf-8");
        text.parse()
            .map_err(|_| Error::format("pgm", "unparseable header number".to_string()))
    }
}

/// Parse a P5 image with maxval up to 255.
pub fn decode(bytes: &[u8]) -> Result<Gray8> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(Error::format("pgm", "missing P5 magic".to_string()));
    }
    let mut scan = HeaderScanner { bytes, pos: 2 };
    let width = scan.number()?;
    let height = scan.number()?;
    let maxval = scan.number()?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::format("pgm", format!("unsupported maxval {maxval}")));
    }
    if width == 0 || height == 0 || width > MAX_EXTENT || height > MAX_EXTENT {
        return Err(Error::format("pgm", format!("unsupported extents {width}x{height}")));
    }
    // exactly one whitespace byte separates header and raster
    match bytes.get(scan.pos) {
        Some(b) if b.is_ascii_whitespace() => scan.pos += 1,
        _ => return Err(Error::format("pgm", "missing raster separator".to_string())),
    }
    let need = width
        .checked_mul(height)
        .ok_or_else(|| Error::format("pgm", "raster size overflow".to_string()))?;
    let raster = &bytes[scan.pos..];
    if raster.len() < need {
        return Err(Error::format(
            "pgm",
            format!("raster truncated: need {need} bytes, have {}", raster.len()),
        ));
    }
    Gray8::new(width, height, raster[..need].to_vec())
}

pub fn write_file(path: &Path, img: &Gray8) -> Result<()> {
    std::fs::write(path, encode(img)).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Gray8> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// 1×H×W tensor in [0,1] from 8-bit pixels.
pub fn to_tensor<S: Scalar>(img: &Gray8) -> Tensor<S> {
    let data = img.pixels.iter().map(|&p| S::from_f64(p as f64 / 255.0)).collect();
    Tensor::from_vec(vec![1, img.height, img.width], data).expect("pixel count matches")
}

/// Quantize a 1×H×W tensor in [0,1] back to 8-bit pixels.
pub fn from_tensor<S: Scalar>(t: &Tensor<S>) -> Result<Gray8> {
    let s = t.shape();
    if s.len() != 3 || s[0] != 1 {
        return Err(Error::shape("pgm::from_tensor", format!("expected 1xHxW, got {s:?}")));
    }
    let pixels = t
        .data()
        .iter()
        .map(|&v| (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    Gray8::new(s[2], s[1], pixels)
}

/// Min-max normalize an arbitrary 2-d map to the full 8-bit range.
pub fn normalized_map<S: Scalar>(values: &[S], width: usize, height: usize) -> Result<Gray8> {
    if values.len() != width * height {
        return Err(Error::shape(
            "pgm::normalized_map",
            format!("{}x{} vs {} values", width, height, values.len()),
        ));
    }
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values {
        lo = lo.min(v.as_f64());
        hi = hi.max(v.as_f64());
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    let pixels = values
        .iter()
        .map(|v| (((v.as_f64() - lo) / span) * 255.0).round() as u8)
        .collect();
    Gray8::new(width, height, pixels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_decode_round_trip() {
        let img = Gray8::new(3, 2, vec![0, 10, 128, 200, 255, 7]).unwrap();
        let bytes = encode(&img);
        assert_eq!(decode(&bytes).unwrap(), img);
    }

    #[test]
    fn comments_and_whitespace_tolerated() {
        let bytes = b"P5 # a comment\n# another\n 2\t1 # mid\n255\n\x01\x02".to_vec();
        let img = decode(&bytes).unwrap();
        assert_eq!((img.width, img.height), (2, 1));
        assert_eq!(img.pixels, vec![1, 2]);
    }

    #[test]
    fn malformed_inputs_are_rejected() {
        assert!(decode(b"").is_err());
        assert!(decode(b"P6\n1 1\n255\n\x00").is_err());
        assert!(decode(b"P5\n1 1\n255").is_err()); // missing separator byte
        assert!(decode(b"P5\n0 4\n255\n").is_err());
        assert!(decode(b"P5\n99999999 1\n255\n\x00").is_err());
        assert!(decode(b"P5\n2 2\n255\n\x00\x01").is_err()); // truncated raster
        assert!(decode(b"P5\n1 1\n70000\n\x00\x00").is_err()); // 16-bit maxval unsupported
    }

    #[test]
    fn tensor_round_trip_is_exact_for_quantized_values() {
        let img = Gray8::new(4, 2, (0..8).map(|i| (i * 31) as u8).collect()).unwrap();
        let t: Tensor<f32> = to_tensor(&img);
        assert_eq!(t.shape(), &[1, 2, 4]);
        let back = from_tensor(&t).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn normalized_map_spans_full_range() {
        let img = normalized_map(&[0.25f64, 0.5, 1.25], 3, 1).unwrap();
        assert_eq!(img.pixels[0], 0);
        assert_eq!(img.pixels[2], 255);
    }
}
