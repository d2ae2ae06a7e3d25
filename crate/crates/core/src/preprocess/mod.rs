//! Network input preparation: CLAHE enhancement, patch tiling and augmentation.

pub mod augment;
pub mod clahe;
pub mod patches;

pub use augment::{augment, flip_horizontal, AugmentConfig, Transform};
pub use clahe::{green_channel, to_gray_clahe, ClaheConfig};
pub use patches::{extract_patches, patch_origins, PatchSample, PATCH_SIZE};

use crate::error::{Error, Result};
use crate::network::Tensor;

/// Single-channel image with values in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Shape(format!(
                "{width}x{height} image needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Argument(format!("gray value {v} outside [0, 1]")));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self::new(width, height, vec![value; width * height]).expect("value in range")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.width + col]
    }

    pub fn crop(&self, row: usize, col: usize, height: usize, width: usize) -> GrayImage {
        let mut data = Vec::with_capacity(width * height);
        for r in row..row + height {
            data.extend_from_slice(&self.data[r * self.width + col..r * self.width + col + width]);
        }
        GrayImage {
            width,
            height,
            data,
        }
    }

    /// `(1, 1, H, W)` tensor view for the network.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_vec(&[1, 1, self.height, self.width], self.data.clone()).expect("sizes agree")
    }

    /// Quantizes to 8 bits, e.g. for writing a PNG.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v * 255.0).round() as u8)
            .collect()
    }
}

/// Mirror index into `0..n` without repeating the edge sample, folding as often as needed.
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}
