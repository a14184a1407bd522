//! Binary masks and 8-bit grayscale PGM (P5) files.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::shape("binary_mask", &[&[height, width], &[bits.len()]]));
        }
        Ok(BinaryMask { height, width, bits })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        BinaryMask { height, width, bits: vec![false; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.height, self.width]
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.bits[r * self.width + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.bits[r * self.width + c] = v;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn intersects(&self, other: &BinaryMask) -> bool {
        self.bits.iter().zip(&other.bits).any(|(&a, &b)| a && b)
    }

    pub fn union_with(&mut self, other: &BinaryMask) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape("mask_union", &[&self.shape(), &other.shape()]));
        }
        for (a, &b) in self.bits.iter_mut().zip(&other.bits) {
            *a |= b;
        }
        Ok(())
    }

    /// Max-pool by `factor`: a cell is set when any pixel in its block is set.
    pub fn max_pool(&self, factor: usize) -> Result<BinaryMask> {
        if factor == 0 || self.height % factor != 0 || self.width % factor != 0 {
            return Err(Error::Invalid(format!("cannot pool {}x{} by {factor}", self.height, self.width)));
        }
        let (h, w) = (self.height / factor, self.width / factor);
        let mut out = BinaryMask::empty(h, w);
        for r in 0..self.height {
            for c in 0..self.width {
                if self.get(r, c) {
                    out.set(r / factor, c / factor, true);
                }
            }
        }
        Ok(out)
    }

    pub fn to_tensor(&self) -> Tensor {
        let data = self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Tensor::new(vec![self.height, self.width], data).expect("consistent shape")
    }
}

/// Encode 8-bit gray pixels, row-major.
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Decode a P5 file with maxval 255; returns `(width, height, pixels)`.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut pos = 0;
    let mut fields = Vec::new();
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
            return Err(Error::Format("truncated PGM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    if fields[0] != "P5" {
        return Err(Error::Format(format!("not a binary PGM: {}", fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|e| Error::Format(format!("PGM header {s:?}: {e}")));
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return Err(Error::Format(format!("PGM maxval {maxval}, expected 255")));
    }
    let raster = bytes.get(pos..).unwrap_or_default();
    if raster.len() != w * h {
        return Err(Error::Format(format!("PGM raster has {} bytes, expected {}", raster.len(), w * h)));
    }
    Ok((w, h, raster.to_vec()))
}

pub fn write_mask(path: &Path, mask: &BinaryMask) -> Result<()> {
    let px: Vec<u8> = mask.bits.iter().map(|&b| if b { 255 } else { 0 }).collect();
    fs::write(path, encode_pgm(mask.width, mask.height, &px)).map_err(|e| Error::io(path, e))
}

pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (w, h, px) = decode_pgm(&bytes)?;
    BinaryMask::new(h, w, px.into_iter().map(|p| p >= 128).collect())
}

/// Write a `[H,W]` grid of values in [0,1] as gray levels.
pub fn write_gray(path: &Path, values: &Tensor) -> Result<()> {
    if values.rank() != 2 {
        return Err(Error::shape("write_gray", &[values.shape()]));
    }
    let px: Vec<u8> = values.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    fs::write(path, encode_pgm(values.shape()[1], values.shape()[0], &px)).map_err(|e| Error::io(path, e))
}
