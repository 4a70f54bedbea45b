//! Image tensors: H×W×C arrays of `f32` pixels with a declared value range.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Declared value range of an [`ImageTensor`].
///
/// `Unit` is file space ([0,1]), `Model` is diffusion space ([-1,1]), and
/// `Unbounded` carries no bound (noised states and noise itself).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Range {
    Unit,
    Model,
    Unbounded,
}

impl Range {
    /// The inclusive bounds this tag declares, if any.
    pub fn bounds(self) -> Option<(f32, f32)> {
        match self {
            Range::Unit => Some((0.0, 1.0)),
            Range::Model => Some((-1.0, 1.0)),
            Range::Unbounded => None,
        }
    }
}

/// An H×W×C image with row-major (H, W, C) layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    range: Range,
    data: Vec<f32>,
}

impl ImageTensor {
    /// All-zero image. Note a zero image is out of bounds for no range.
    pub fn zeros(height: usize, width: usize, channels: usize, range: Range) -> Self {
        ImageTensor { height, width, channels, range, data: vec![0.0; height * width * channels] }
    }

    pub fn constant(height: usize, width: usize, channels: usize, range: Range, value: f32) -> Self {
        ImageTensor { height, width, channels, range, data: vec![value; height * width * channels] }
    }

    /// Wrap raw data, validating length and the declared range bounds.
    pub fn from_data(
        height: usize,
        width: usize,
        channels: usize,
        range: Range,
        data: Vec<f32>,
    ) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{}x{} = {} values", height, width, channels, height * width * channels),
                got: format!("{} values", data.len()),
            });
        }
        let img = ImageTensor { height, width, channels, range, data };
        img.check_range()?;
        Ok(img)
    }

    fn check_range(&self) -> Result<()> {
        if let Some((lo, hi)) = self.range.bounds() {
            for &v in &self.data {
                if !(lo..=hi).contains(&v) {
                    return Err(Error::InvalidArg(format!(
                        "value {v} outside declared {:?} range [{lo}, {hi}]",
                        self.range
                    )));
                }
            }
        }
        Ok(())
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

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn range(&self) -> Range {
        self.range
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize, ch: usize) -> usize {
        (row * self.width + col) * self.channels + ch
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f32 {
        self.data[self.index(row, col, ch)]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, value: f32) {
        let i = self.index(row, col, ch);
        self.data[i] = value;
    }

    pub fn same_shape(&self, other: &ImageTensor) -> bool {
        self.shape() == other.shape()
    }

    pub fn ensure_same_shape(&self, other: &ImageTensor) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch {
                expected: format!("{:?}", self.shape()),
                got: format!("{:?}", other.shape()),
            })
        }
    }

    pub fn ensure_range(&self, expected: Range) -> Result<()> {
        if self.range == expected {
            Ok(())
        } else {
            Err(Error::RangeTag { expected, got: self.range })
        }
    }

    /// Retag without touching the data (for values produced by arithmetic
    /// whose range is known by construction).
    pub fn with_range(mut self, range: Range) -> Self {
        self.range = range;
        self
    }

    /// Elementwise map into a new tensor with the given range tag.
    pub fn map(&self, range: Range, mut f: impl FnMut(f32) -> f32) -> ImageTensor {
        ImageTensor {
            height: self.height,
            width: self.width,
            channels: self.channels,
            range,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Clamp every value to the bounds of `range` and retag.
    pub fn clamped(&self, range: Range) -> ImageTensor {
        match range.bounds() {
            Some((lo, hi)) => self.map(range, |v| v.clamp(lo, hi)),
            None => self.clone().with_range(range),
        }
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f32> {
        self.data.iter()
    }
}

/// Mirror an out-of-bounds index back into `[0, n)` without repeating the
/// edge sample (…, 2, 1, 0 | 1, 2, … at the low edge). Used for blur borders
/// and for padding images up to a size multiple before sampling.
pub(crate) fn reflect_index(i: isize, n: usize) -> usize {
    debug_assert!(n > 0);
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}
