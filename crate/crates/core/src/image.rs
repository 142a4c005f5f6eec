use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ImageError {
    #[error("image geometry {channels}×{height}×{width} does not match {len} values")]
    Geometry {
        channels: usize,
        height: usize,
        width: usize,
        len: usize,
    },
}

/// Planar (channel-major, then row-major) image with `f64` pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self, ImageError> {
        if height == 0 || width == 0 || channels == 0 || data.len() != height * width * channels {
            return Err(ImageError::Geometry {
                channels,
                height,
                width,
                len: data.len(),
            });
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn gray(height: usize, width: usize, data: Vec<f64>) -> Result<Self, ImageError> {
        Self::new(height, width, 1, data)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self::new(height, width, channels, vec![value; height * width * channels]).expect("positive geometry")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn plane(&self, channel: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[channel * n..(channel + 1) * n]
    }

    pub fn get(&self, channel: usize, y: usize, x: usize) -> f64 {
        self.data[(channel * self.height + y) * self.width + x]
    }

    pub fn same_geometry(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(&self, factor: usize) -> Image {
        let (h, w) = (self.height * factor, self.width * factor);
        let mut data = Vec::with_capacity(h * w * self.channels);
        for c in 0..self.channels {
            for y in 0..h {
                for x in 0..w {
                    data.push(self.get(c, y / factor, x / factor));
                }
            }
        }
        Image::new(h, w, self.channels, data).expect("scaled geometry")
    }
}
