use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::VisionError;

/// 8-bit grayscale raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
    pub timestamp_ms: i64,
}

impl Frame {
    pub fn new(width: u32, height: u32, pixels: Vec<u8>, timestamp_ms: i64) -> Result<Self, VisionError> {
        if width == 0 || height == 0 {
            return Err(VisionError::Dimension("frame dimensions must be positive".into()));
        }
        if pixels.len() != width as usize * height as usize {
            return Err(VisionError::Dimension(format!(
                "{width}x{height} frame needs {} pixels, got {}",
                width as usize * height as usize,
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
            timestamp_ms,
        })
    }

    pub fn filled(width: u32, height: u32, value: u8, timestamp_ms: i64) -> Result<Self, VisionError> {
        Self::new(
            width,
            height,
            vec![value; width as usize * height as usize],
            timestamp_ms,
        )
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.pixels[y as usize * self.width as usize + x as usize]
    }

    pub(crate) fn check_same_dims(&self, width: u32, height: u32) -> Result<(), VisionError> {
        if self.width != width || self.height != height {
            return Err(VisionError::Dimension(format!(
                "expected {width}x{height}, got {}x{}",
                self.width, self.height
            )));
        }
        Ok(())
    }
}

/// Pixel rectangle with inclusive `x0, y0` and exclusive `x1, y1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl BoundingBox {
    pub fn new(x0: u32, y0: u32, x1: u32, y1: u32) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> u32 {
        self.x1.saturating_sub(self.x0)
    }

    pub fn height(&self) -> u32 {
        self.y1.saturating_sub(self.y0)
    }

    pub fn area(&self) -> u64 {
        self.width() as u64 * self.height() as u64
    }

    pub fn as_array(&self) -> [u32; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }

    /// Checks `x0 < x1 <= width` and `y0 < y1 <= height`.
    pub fn check_within(&self, width: u32, height: u32) -> Result<(), VisionError> {
        if self.x0 < self.x1 && self.x1 <= width && self.y0 < self.y1 && self.y1 <= height {
            Ok(())
        } else {
            Err(VisionError::Dimension(format!(
                "bbox {:?} invalid within {width}x{height}",
                self.as_array()
            )))
        }
    }
}

/// Binary foreground mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(width: u32, height: u32, bits: Vec<bool>) -> Result<Self, VisionError> {
        if bits.len() != width as usize * height as usize {
            return Err(VisionError::Dimension(format!(
                "{width}x{height} mask needs {} bits, got {}",
                width as usize * height as usize,
                bits.len()
            )));
        }
        Ok(Self { width, height, bits })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[y as usize * self.width as usize + x as usize]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

fn pgm_err(msg: impl Into<String>) -> VisionError {
    VisionError::Pgm(msg.into())
}

/// Parses a binary (P5) 8-bit PGM image.
pub fn parse_pgm(bytes: &[u8], timestamp_ms: i64) -> Result<Frame, VisionError> {
    if !bytes.starts_with(b"P5") {
        return Err(pgm_err("missing P5 magic"));
    }
    let mut pos = 2;
    let mut header = [0u32; 3];
    for slot in &mut header {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(pgm_err("truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(pgm_err("expected a number in header"));
        }
        *slot = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| pgm_err("header number out of range"))?;
    }
    let [width, height, maxval] = header;
    if maxval == 0 || maxval > 255 {
        return Err(pgm_err(format!("unsupported maxval {maxval}")));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(pgm_err("missing separator before raster"));
    }
    pos += 1;
    let n = width as usize * height as usize;
    let raster = bytes
        .get(pos..pos + n)
        .ok_or_else(|| pgm_err(format!("raster truncated: need {n} bytes")))?;
    if raster.iter().any(|&p| p as u32 > maxval) {
        return Err(pgm_err("pixel exceeds maxval"));
    }
    Frame::new(width, height, raster.to_vec(), timestamp_ms)
}

pub fn write_pgm(frame: &Frame) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", frame.width, frame.height).into_bytes();
    out.extend_from_slice(&frame.pixels);
    out
}

pub fn read_pgm(path: &Path, timestamp_ms: i64) -> Result<Frame, VisionError> {
    let bytes = std::fs::read(path).map_err(|e| VisionError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_pgm(&bytes, timestamp_ms)
}
