//! Binary greyscale PGM (P5) with maxval 255.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

/// Largest accepted side, to bound allocations on hostile headers.
const MAX_SIDE: usize = 1 << 14;

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::Pgm(format!("{}x{} image needs {} pixels, got {}", width, height, width * height, pixels.len())));
        }
        Ok(GrayImage { width, height, pixels })
    }

    /// Quantizes values in `[0, 1]` (clamped) to bytes.
    pub fn from_unit(width: usize, height: usize, values: &[f32]) -> Result<Self> {
        let px = values.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        GrayImage::new(width, height, px)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let magic = token(bytes, &mut pos)?;
        if magic != b"P5" {
            return Err(Error::Pgm("not a binary PGM (expected P5)".into()));
        }
        let width = number(bytes, &mut pos)?;
        let height = number(bytes, &mut pos)?;
        let maxval = number(bytes, &mut pos)?;
        if maxval != 255 {
            return Err(Error::Pgm(format!("unsupported maxval {maxval}")));
        }
        if width == 0 || height == 0 || width > MAX_SIDE || height > MAX_SIDE {
            return Err(Error::Pgm(format!("bad dimensions {width}x{height}")));
        }
        // Exactly one whitespace byte separates the header from the raster.
        if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
            return Err(Error::Pgm("missing raster separator".into()));
        }
        pos += 1;
        let n = width * height;
        let raster = bytes.get(pos..pos + n).ok_or_else(|| Error::Pgm(format!("raster truncated: need {n} bytes")))?;
        GrayImage::new(width, height, raster.to_vec())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        GrayImage::decode(&std::fs::read(path)?)
    }
}

fn token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() && bytes[*pos] != b'#' {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Pgm("unexpected end of header".into()));
    }
    Ok(&bytes[start..*pos])
}

fn number(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    let t = token(bytes, pos)?;
    if t.len() > 9 || !t.iter().all(u8::is_ascii_digit) {
        return Err(Error::Pgm(format!("bad header number {:?}", String::from_utf8_lossy(t))));
    }
    Ok(std::str::from_utf8(t).unwrap().parse().unwrap())
}
