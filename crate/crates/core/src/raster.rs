//! Minimal HWC float image buffer and PNG I/O.

use std::path::Path;

use image::{ImageBuffer, Luma, Rgb};

use crate::error::{Error, Result};

/// Row-major `height × width × channels` image with values nominally in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "image buffer has {} values, expected {height}x{width}x{channels}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[self.index(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        let i = self.index(y, x, c);
        self.data[i] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f32] {
        let i = self.index(y, x, 0);
        &self.data[i..i + self.channels]
    }

    /// Rec. 601 luma for RGB, the value itself for single-channel images.
    pub fn luminance(&self, y: usize, x: usize) -> f32 {
        match self.pixel(y, x) {
            [v] => *v,
            [r, g, b, ..] => 0.299 * r + 0.587 * g + 0.114 * b,
            other => other.iter().sum::<f32>() / other.len() as f32,
        }
    }

    /// Tiles equally-sized images into a `cols`-wide grid.
    pub fn tile(images: &[Image], cols: usize) -> Result<Image> {
        let first = images
            .first()
            .ok_or_else(|| Error::InvalidArgument("no images to tile".into()))?;
        if images
            .iter()
            .any(|im| (im.height, im.width, im.channels) != (first.height, first.width, first.channels))
        {
            return Err(Error::Shape("tiled images must share a shape".into()));
        }
        let cols = cols.max(1);
        let rows = images.len().div_ceil(cols);
        let mut out = Image::zeros(rows * first.height, cols * first.width, first.channels);
        for (i, im) in images.iter().enumerate() {
            let (oy, ox) = ((i / cols) * first.height, (i % cols) * first.width);
            for y in 0..im.height {
                for x in 0..im.width {
                    for c in 0..im.channels {
                        out.set(oy + y, ox + x, c, im.get(y, x, c));
                    }
                }
            }
        }
        Ok(out)
    }

    fn to_u8(v: f32) -> u8 {
        (v.clamp(0.0, 1.0) * 255.0).round() as u8
    }

    /// Writes an 8-bit PNG (grayscale for one channel, RGB for three).
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let (w, h) = (self.width as u32, self.height as u32);
        let bytes: Vec<u8> = self.data.iter().map(|&v| Self::to_u8(v)).collect();
        match self.channels {
            1 => ImageBuffer::<Luma<u8>, _>::from_raw(w, h, bytes)
                .ok_or_else(|| Error::Shape("bad grayscale buffer".into()))?
                .save(path)?,
            3 => ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, bytes)
                .ok_or_else(|| Error::Shape("bad rgb buffer".into()))?
                .save(path)?,
            c => return Err(Error::Shape(format!("cannot write {c}-channel PNG"))),
        }
        Ok(())
    }

    /// Reads a PNG as `channels` channels (1 = luma, 3 = RGB).
    pub fn load_png(path: &Path, channels: usize) -> Result<Image> {
        let dynimg = image::open(path).map_err(|e| Error::path(path, e))?;
        let (w, h) = (dynimg.width() as usize, dynimg.height() as usize);
        let data: Vec<f32> = match channels {
            1 => dynimg.to_luma8().into_raw().into_iter().map(|b| b as f32 / 255.0).collect(),
            3 => dynimg.to_rgb8().into_raw().into_iter().map(|b| b as f32 / 255.0).collect(),
            c => return Err(Error::Shape(format!("cannot read {c}-channel PNG"))),
        };
        Image::new(h, w, channels, data)
    }
}
