//! Raster image and dense depth-map containers.

use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Intensity written into pixels whose validity bit is cleared, so occluded
/// regions render white.
pub const MASKED_PIXEL_VALUE: u8 = 255;

/// An 8-bit raster with 1 (gray) or 3 (RGB) channels and a per-pixel
/// validity mask. Masked-out pixels hold [`MASKED_PIXEL_VALUE`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    width: u32,
    height: u32,
    channels: u8,
    pixels: Vec<u8>,
    mask: Vec<bool>,
}

impl Image {
    pub fn new(width: u32, height: u32, channels: u8, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidParameter("image dimensions must be positive"));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidParameter("channels must be 1 or 3"));
        }
        let expect = width as usize * height as usize * channels as usize;
        if pixels.len() != expect {
            return Err(Error::LengthMismatch { expected: expect, got: pixels.len() });
        }
        let mask = alloc::vec![true; width as usize * height as usize];
        Ok(Self { width, height, channels, pixels, mask })
    }

    pub fn with_mask(
        width: u32,
        height: u32,
        channels: u8,
        pixels: Vec<u8>,
        mask: Vec<bool>,
    ) -> Result<Self> {
        let mut img = Self::new(width, height, channels, pixels)?;
        if mask.len() != img.mask.len() {
            return Err(Error::LengthMismatch { expected: img.mask.len(), got: mask.len() });
        }
        img.mask = mask;
        Ok(img)
    }

    /// A fully masked white canvas.
    pub fn blank(width: u32, height: u32, channels: u8) -> Result<Self> {
        let pixels =
            alloc::vec![MASKED_PIXEL_VALUE; width as usize * height as usize * channels as usize];
        let mut img = Self::new(width, height, channels, pixels)?;
        img.mask.fill(false);
        Ok(img)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn channels(&self) -> u8 {
        self.channels
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn in_bounds(&self, x: i64, y: i64) -> bool {
        x >= 0 && y >= 0 && (x as u64) < self.width as u64 && (y as u64) < self.height as u64
    }

    fn idx(&self, x: u32, y: u32) -> usize {
        (y as usize * self.width as usize + x as usize) * self.channels as usize
    }

    pub fn is_valid(&self, x: u32, y: u32) -> bool {
        self.mask[y as usize * self.width as usize + x as usize]
    }

    pub fn any_masked(&self) -> bool {
        self.mask.iter().any(|m| !m)
    }

    /// Channel values at `(x, y)`; length equals `channels`.
    pub fn pixel(&self, x: u32, y: u32) -> &[u8] {
        let i = self.idx(x, y);
        &self.pixels[i..i + self.channels as usize]
    }

    pub fn set_pixel(&mut self, x: u32, y: u32, value: &[u8]) {
        let i = self.idx(x, y);
        let c = self.channels as usize;
        self.pixels[i..i + c].copy_from_slice(&value[..c]);
        self.mask[y as usize * self.width as usize + x as usize] = true;
    }

    pub fn set_masked(&mut self, x: u32, y: u32) {
        let i = self.idx(x, y);
        for v in self.pixels[i..i + self.channels as usize].iter_mut() {
            *v = MASKED_PIXEL_VALUE;
        }
        self.mask[y as usize * self.width as usize + x as usize] = false;
    }

    /// Luma value (BT.601 weights for RGB) as a float.
    pub fn luma(&self, x: u32, y: u32) -> f64 {
        let p = self.pixel(x, y);
        if self.channels == 1 {
            p[0] as f64
        } else {
            0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64
        }
    }
}

/// A dense frontal depth grid. Pixel `(col, row)` samples the plane point
/// `origin + (col, row)`; occupied pixels carry finite depth, and smaller
/// depth is nearer the camera.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub origin: [f64; 2],
    width: u32,
    height: u32,
    depth: Vec<f64>,
    occupancy: Vec<bool>,
}

impl DepthMap {
    pub fn unoccupied(origin: [f64; 2], width: u32, height: u32) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidParameter("depth map dimensions must be positive"));
        }
        Ok(Self {
            origin,
            width,
            height,
            depth: alloc::vec![f64::INFINITY; width as usize * height as usize],
            occupancy: alloc::vec![false; width as usize * height as usize],
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    fn idx(&self, x: u32, y: u32) -> usize {
        y as usize * self.width as usize + x as usize
    }

    pub fn is_occupied(&self, x: u32, y: u32) -> bool {
        self.occupancy[self.idx(x, y)]
    }

    pub fn depth(&self, x: u32, y: u32) -> f64 {
        self.depth[self.idx(x, y)]
    }

    /// Writes `d` if the pixel is unoccupied or `d` is nearer.
    pub fn merge(&mut self, x: u32, y: u32, d: f64) {
        let i = self.idx(x, y);
        if !self.occupancy[i] || d < self.depth[i] {
            self.depth[i] = d;
            self.occupancy[i] = true;
        }
    }

    pub fn occupied_count(&self) -> usize {
        self.occupancy.iter().filter(|o| **o).count()
    }
}
