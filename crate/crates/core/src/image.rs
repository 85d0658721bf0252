//! In-memory image and label-map containers. Pixels are stored row-major,
//! which is also the row order of every per-pixel field in the engine.

use crate::error::{CrfError, Result};

/// An 8-bit RGB image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(CrfError::invalid("image dimensions must be positive"));
        }
        if data.len() != width * height * 3 {
            return Err(CrfError::shape(format!(
                "{} bytes do not form a {width}x{height} RGB image",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Result<Self> {
        let data = rgb.repeat(width * height);
        Self::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn n_pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.data
    }

    /// RGB triple of the pixel at row-major index `i`.
    #[inline]
    pub fn pixel(&self, i: usize) -> [u8; 3] {
        [self.data[3 * i], self.data[3 * i + 1], self.data[3 * i + 2]]
    }

    #[inline]
    pub fn pixel_at(&self, x: usize, y: usize) -> [u8; 3] {
        self.pixel(y * self.width + x)
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = 3 * (y * self.width + x);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }
}

/// A per-pixel label map. `ignore_label` marks pixels excluded from losses
/// and metrics.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    width: usize,
    height: usize,
    labels: Vec<u8>,
}

/// Label value reserved for "don't care" pixels.
pub const DEFAULT_IGNORE_LABEL: u8 = 255;

impl LabelMap {
    pub fn new(width: usize, height: usize, labels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(CrfError::invalid("label map dimensions must be positive"));
        }
        if labels.len() != width * height {
            return Err(CrfError::shape(format!(
                "{} labels do not form a {width}x{height} map",
                labels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            labels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, i: usize) -> u8 {
        self.labels[i]
    }

    /// Checks that every label is below `n_labels` or equal to `ignore_label`.
    pub fn validate(&self, n_labels: usize, ignore_label: u8) -> Result<()> {
        match self
            .labels
            .iter()
            .find(|&&l| l != ignore_label && l as usize >= n_labels)
        {
            Some(bad) => Err(CrfError::invalid(format!(
                "label {bad} out of range for {n_labels} labels (ignore label {ignore_label})"
            ))),
            None => Ok(()),
        }
    }
}
