//! Channel-major feature maps used inside the network.
//!
//! Layout is (C, H, W) with rows contiguous, so convolution inner loops run
//! over contiguous slices. The element type is generic over float width:
//! training runs in `f32`, gradient verification re-runs the same code in
//! `f64`.

use num_traits::Float;

use crate::error::{Error, Result};
use crate::tensor::{ImageTensor, Range};

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<F> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<F>,
}

impl<F: Float> FeatureMap<F> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        FeatureMap { channels, height, width, data: vec![F::zero(); channels * height * width] }
    }

    #[inline]
    pub fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> F {
        self.data[self.idx(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: F) {
        let i = self.idx(c, y, x);
        self.data[i] = v;
    }

    #[inline]
    pub fn row(&self, c: usize, y: usize) -> &[F] {
        let start = (c * self.height + y) * self.width;
        &self.data[start..start + self.width]
    }

    #[inline]
    pub fn row_mut(&mut self, c: usize, y: usize) -> &mut [F] {
        let start = (c * self.height + y) * self.width;
        &mut self.data[start..start + self.width]
    }

    /// Pixels per channel.
    #[inline]
    pub fn spatial(&self) -> usize {
        self.height * self.width
    }

    pub fn add_assign(&mut self, other: &FeatureMap<F>) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a = *a + *b;
        }
    }

    /// Concatenate along channels; all inputs must share H and W.
    pub fn concat(parts: &[&FeatureMap<F>]) -> FeatureMap<F> {
        assert!(!parts.is_empty());
        let (h, w) = (parts[0].height, parts[0].width);
        let channels = parts.iter().map(|p| p.channels).sum();
        let mut data = Vec::with_capacity(channels * h * w);
        for p in parts {
            assert_eq!((p.height, p.width), (h, w), "concat requires equal spatial dims");
            data.extend_from_slice(&p.data);
        }
        FeatureMap { channels, height: h, width: w, data }
    }

    /// Split the leading `head` channels off (inverse of a 2-part concat).
    pub fn split(&self, head: usize) -> (FeatureMap<F>, FeatureMap<F>) {
        assert!(head <= self.channels);
        let cut = head * self.spatial();
        (
            FeatureMap {
                channels: head,
                height: self.height,
                width: self.width,
                data: self.data[..cut].to_vec(),
            },
            FeatureMap {
                channels: self.channels - head,
                height: self.height,
                width: self.width,
                data: self.data[cut..].to_vec(),
            },
        )
    }

    /// Nearest-neighbor 2x upsampling.
    pub fn upsample_nearest2(&self) -> FeatureMap<F> {
        let mut out = FeatureMap::zeros(self.channels, self.height * 2, self.width * 2);
        for c in 0..self.channels {
            for y in 0..self.height {
                let src = self.row(c, y);
                for dy in 0..2 {
                    let dst = out.row_mut(c, 2 * y + dy);
                    for x in 0..self.width {
                        dst[2 * x] = src[x];
                        dst[2 * x + 1] = src[x];
                    }
                }
            }
        }
        out
    }

    /// Gradient of [`Self::upsample_nearest2`]: sum each 2x2 output block
    /// back into its source pixel.
    pub fn upsample_nearest2_backward(grad_out: &FeatureMap<F>) -> FeatureMap<F> {
        assert!(grad_out.height % 2 == 0 && grad_out.width % 2 == 0);
        let (h, w) = (grad_out.height / 2, grad_out.width / 2);
        let mut out = FeatureMap::zeros(grad_out.channels, h, w);
        for c in 0..grad_out.channels {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = F::zero();
                    for dy in 0..2 {
                        for dx in 0..2 {
                            acc = acc + grad_out.get(c, 2 * y + dy, 2 * x + dx);
                        }
                    }
                    out.set(c, y, x, acc);
                }
            }
        }
        out
    }

    /// Stack images into one feature map (channel order follows the slice).
    pub fn from_images(images: &[&ImageTensor]) -> Result<FeatureMap<F>> {
        let (h, w, _) = images[0].shape();
        let channels: usize = images.iter().map(|i| i.channels()).sum();
        let mut out = FeatureMap::zeros(channels, h, w);
        let mut base = 0usize;
        for img in images {
            if (img.height(), img.width()) != (h, w) {
                return Err(Error::ShapeMismatch {
                    expected: format!("{h}x{w}"),
                    got: format!("{}x{}", img.height(), img.width()),
                });
            }
            for ch in 0..img.channels() {
                for y in 0..h {
                    for x in 0..w {
                        out.set(base + ch, y, x, F::from(img.get(y, x, ch)).unwrap());
                    }
                }
            }
            base += img.channels();
        }
        Ok(out)
    }

    /// Convert back to an image tensor with the given range tag (values are
    /// not clamped; the tag must be appropriate for the content).
    pub fn to_image(&self, range: Range) -> ImageTensor {
        let mut out = ImageTensor::zeros(self.height, self.width, self.channels, range);
        for c in 0..self.channels {
            for y in 0..self.height {
                for x in 0..self.width {
                    out.set(y, x, c, self.get(c, y, x).to_f32().unwrap());
                }
            }
        }
        out
    }

    /// Cast elementwise through f64.
    pub fn convert<G: Float>(&self) -> FeatureMap<G> {
        FeatureMap {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| G::from(v.to_f64().unwrap()).unwrap()).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concat_split_round_trip() {
        let mut a = FeatureMap::<f32>::zeros(2, 3, 3);
        let mut b = FeatureMap::<f32>::zeros(1, 3, 3);
        a.set(1, 2, 2, 5.0);
        b.set(0, 0, 0, 7.0);
        let cat = FeatureMap::concat(&[&a, &b]);
        assert_eq!(cat.channels, 3);
        assert_eq!(cat.get(1, 2, 2), 5.0);
        assert_eq!(cat.get(2, 0, 0), 7.0);
        let (a2, b2) = cat.split(2);
        assert_eq!(a2.data, a.data);
        assert_eq!(b2.data, b.data);
    }

    #[test]
    fn upsample_and_its_gradient_are_adjoint() {
        // <up(x), g> must equal <x, up_backward(g)> — the defining property
        // of a correct gradient for a linear map.
        let mut x = FeatureMap::<f64>::zeros(1, 2, 2);
        let mut g = FeatureMap::<f64>::zeros(1, 4, 4);
        for (i, v) in x.data.iter_mut().enumerate() {
            *v = (i + 1) as f64;
        }
        for (i, v) in g.data.iter_mut().enumerate() {
            *v = (i as f64 * 0.37).sin();
        }
        let up = x.upsample_nearest2();
        let lhs: f64 = up.data.iter().zip(g.data.iter()).map(|(a, b)| a * b).sum();
        let back = FeatureMap::upsample_nearest2_backward(&g);
        let rhs: f64 = x.data.iter().zip(back.data.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn image_round_trip() {
        let img = ImageTensor::from_data(
            2,
            2,
            3,
            Range::Unit,
            (0..12).map(|i| i as f32 / 12.0).collect(),
        )
        .unwrap();
        let fm = FeatureMap::<f32>::from_images(&[&img, &img]).unwrap();
        assert_eq!(fm.channels, 6);
        assert_eq!(fm.get(0, 0, 0), img.get(0, 0, 0));
        assert_eq!(fm.get(3, 1, 1), img.get(1, 1, 0));
        let (first, _) = fm.split(3);
        let back = first.to_image(Range::Unit);
        assert_eq!(back.data(), img.data());
    }
}
