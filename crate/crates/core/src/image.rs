use crate::error::{Error, Result};
use crate::numeric::Tensor;

/// An RGB image with `f32` pixels in `[0, 1]`, stored row-major HWC.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

pub const CHANNELS: usize = 3;

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width * CHANNELS {
            return Err(Error::Invalid(format!(
                "image {height}x{width} needs {} values, got {}",
                height * width * CHANNELS,
                data.len()
            )));
        }
        Ok(Image { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Image { height, width, data }
    }

    pub fn from_u8(height: usize, width: usize, pixels: &[u8]) -> Result<Self> {
        Self::new(height, width, pixels.iter().map(|&v| v as f32 / 255.0).collect())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Quantizes to bytes (`round(v · 255)`, clamped).
    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }
}

/// Stacks equally sized images into an NHWC tensor.
pub fn batch(images: &[&Image]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::Invalid("cannot batch zero images".into()))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * h * w * CHANNELS);
    for img in images {
        if img.height != h || img.width != w {
            return Err(Error::Invalid(format!(
                "mixed image sizes in batch: {h}x{w} and {}x{}",
                img.height, img.width
            )));
        }
        data.extend_from_slice(&img.data);
    }
    Tensor::new(&[images.len(), h, w, CHANNELS], data)
}
