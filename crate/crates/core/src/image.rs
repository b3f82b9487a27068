//! Image and latent grids.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `H × W × C` image, channels-last. Values are nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageGrid(Tensor);

/// `h × w × c` latent representation of an image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentGrid(Tensor);

macro_rules! grid_common {
    ($ty:ident, $what:literal) => {
        impl $ty {
            pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
                if height == 0 || width == 0 || channels == 0 {
                    return Err(Error::invalid(concat!($what, " dimensions must be positive")));
                }
                Ok(Self(Tensor::new(alloc::vec![height, width, channels], data)?))
            }

            pub fn from_tensor(t: Tensor) -> Result<Self> {
                if t.shape().len() != 3 || t.is_empty() {
                    return Err(Error::invalid(alloc::format!(
                        concat!($what, " must be [H, W, C], got {:?}"),
                        t.shape()
                    )));
                }
                if !t.all_finite() {
                    return Err(Error::NonFinite(concat!($what, " entries").into()));
                }
                Ok(Self(t))
            }

            pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
                Self(Tensor::full(&[height, width, channels], value))
            }

            pub fn from_fn(
                height: usize,
                width: usize,
                channels: usize,
                mut f: impl FnMut(usize, usize, usize) -> f64,
            ) -> Self {
                Self(Tensor::from_fn(&[height, width, channels], |i| {
                    let c = i % channels;
                    let x = (i / channels) % width;
                    let y = i / (channels * width);
                    f(y, x, c)
                }))
            }

            pub fn height(&self) -> usize {
                self.0.shape()[0]
            }

            pub fn width(&self) -> usize {
                self.0.shape()[1]
            }

            pub fn channels(&self) -> usize {
                self.0.shape()[2]
            }

            pub fn dims(&self) -> (usize, usize, usize) {
                (self.height(), self.width(), self.channels())
            }

            pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
                self.0.data()[(y * self.width() + x) * self.channels() + c]
            }

            pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
                let (w, ch) = (self.width(), self.channels());
                self.0.data_mut()[(y * w + x) * ch + c] = v;
            }

            pub fn data(&self) -> &[f64] {
                self.0.data()
            }

            pub fn data_mut(&mut self) -> &mut [f64] {
                self.0.data_mut()
            }

            pub fn tensor(&self) -> &Tensor {
                &self.0
            }

            pub fn into_tensor(self) -> Tensor {
                self.0
            }

            pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
                Self(self.0.map(f))
            }
        }
    };
}

grid_common!(ImageGrid, "image");
grid_common!(LatentGrid, "latent");

impl ImageGrid {
    pub fn clamp01(&self) -> Self {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    /// Luma (BT.601 weights) for 3-channel images; single-channel images pass through.
    pub fn to_gray(&self) -> ImageGrid {
        let (h, w, c) = self.dims();
        match c {
            1 => self.clone(),
            3 => ImageGrid::from_fn(h, w, 1, |y, x, _| {
                0.299 * self.get(y, x, 0) + 0.587 * self.get(y, x, 1) + 0.114 * self.get(y, x, 2)
            }),
            _ => ImageGrid::from_fn(h, w, 1, |y, x, _| {
                (0..c).map(|k| self.get(y, x, k)).sum::<f64>() / c as f64
            }),
        }
    }

    pub fn mean(&self) -> f64 {
        self.data().iter().sum::<f64>() / self.data().len() as f64
    }
}
