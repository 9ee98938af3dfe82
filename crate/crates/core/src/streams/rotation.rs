//! Image rotation about the center with bilinear sampling, and the
//! rotated-digit task data built on it.

use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numcore::Matrix;
use crate::streams::idx::load_idx;

/// Precomputed bilinear sampling plan for one angle and image size.
///
/// Output pixel `(r, c)` reads the source at the position obtained by rotating
/// `(r, c)` by `−angle` about the image center; out-of-range taps read 0.
#[derive(Debug, Clone, PartialEq)]
pub struct RotationMap {
    height: usize,
    width: usize,
    angle: f64,
    /// Per output pixel, up to four `(source index, weight)` taps.
    taps: Vec<[(u32, f64); 4]>,
}

impl RotationMap {
    pub fn new(height: usize, width: usize, angle: f64) -> Self {
        let cy = (height as f64 - 1.0) / 2.0;
        let cx = (width as f64 - 1.0) / 2.0;
        let (sin, cos) = angle.sin_cos();
        let mut taps = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                let dy = r as f64 - cy;
                let dx = c as f64 - cx;
                let sx = cx + cos * dx + sin * dy;
                let sy = cy - sin * dx + cos * dy;
                let x0 = sx.floor();
                let y0 = sy.floor();
                let fx = sx - x0;
                let fy = sy - y0;
                let mut t = [(0u32, 0.0f64); 4];
                let corners = [
                    (y0, x0, (1.0 - fy) * (1.0 - fx)),
                    (y0, x0 + 1.0, (1.0 - fy) * fx),
                    (y0 + 1.0, x0, fy * (1.0 - fx)),
                    (y0 + 1.0, x0 + 1.0, fy * fx),
                ];
                for (slot, &(y, x, w)) in t.iter_mut().zip(&corners) {
                    let inside = y >= 0.0 && x >= 0.0 && y < height as f64 && x < width as f64;
                    if inside && w != 0.0 {
                        *slot = ((y as usize * width + x as usize) as u32, w);
                    }
                }
                taps.push(t);
            }
        }
        Self {
            height,
            width,
            angle,
            taps,
        }
    }

    pub fn angle(&self) -> f64 {
        self.angle
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    /// Rotates `src` (row-major pixels, any scale) into `out`.
    pub fn apply_with(&self, src: impl Fn(usize) -> f64, out: &mut [f64]) {
        for (o, taps) in out.iter_mut().zip(&self.taps) {
            let mut v = 0.0;
            for &(idx, w) in taps {
                if w != 0.0 {
                    v += w * src(idx as usize);
                }
            }
            *o = v;
        }
    }
}

/// Rotates an image by `angle` radians about its center.
pub fn rotate_image(img: &Matrix, angle: f64) -> Matrix {
    let map = RotationMap::new(img.rows(), img.cols(), angle);
    let mut out = Matrix::zeros(img.rows(), img.cols());
    let data = img.data();
    map.apply_with(|i| data[i], out.data_mut());
    out
}

/// One split of a digit dataset: raw bytes plus labels.
#[derive(Debug, Clone, PartialEq)]
pub struct DigitSplit {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
}

impl DigitSplit {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.pixel_count();
        &self.pixels[i * n..(i + 1) * n]
    }

    /// First `n` items (all of them when `n` exceeds the split).
    pub fn truncated(&self, n: usize) -> DigitSplit {
        let n = n.min(self.len());
        DigitSplit {
            height: self.height,
            width: self.width,
            pixels: self.pixels[..n * self.pixel_count()].to_vec(),
            labels: self.labels[..n].to_vec(),
        }
    }

    pub fn load(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Self> {
        let img = load_idx(images)?;
        let lab = load_idx(labels)?;
        if img.dims.len() != 3 || lab.dims.len() != 1 || img.dims[0] != lab.dims[0] {
            return Err(Error::Invariant(format!(
                "image dims {:?} do not match label dims {:?}",
                img.dims, lab.dims
            )));
        }
        Ok(Self {
            height: img.dims[1],
            width: img.dims[2],
            pixels: img.data,
            labels: lab.data,
        })
    }
}

/// Training and test splits of a digit dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DigitData {
    pub train: Arc<DigitSplit>,
    pub test: Arc<DigitSplit>,
}

impl DigitData {
    /// Loads the four standard MNIST files from `dir`.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let train = DigitSplit::load(
            dir.join("train-images-idx3-ubyte"),
            dir.join("train-labels-idx1-ubyte"),
        )?;
        let test = DigitSplit::load(
            dir.join("t10k-images-idx3-ubyte"),
            dir.join("t10k-labels-idx1-ubyte"),
        )?;
        Ok(Self {
            train: Arc::new(train),
            test: Arc::new(test),
        })
    }
}

/// A digit split seen through one rotation.
#[derive(Debug, Clone)]
pub struct RotatedDigits {
    pub split: Arc<DigitSplit>,
    pub map: Arc<RotationMap>,
}

impl RotatedDigits {
    pub fn new(split: Arc<DigitSplit>, angle: f64) -> Self {
        let map = Arc::new(RotationMap::new(split.height, split.width, angle));
        Self { split, map }
    }

    pub fn len(&self) -> usize {
        self.split.len()
    }

    pub fn is_empty(&self) -> bool {
        self.split.is_empty()
    }

    /// Writes rotated pixels of item `i` (scaled to `[0, 1]`) into `out` and
    /// returns its label.
    pub fn write(&self, i: usize, out: &mut [f64]) -> usize {
        let img = self.split.image(i);
        self.map.apply_with(|p| f64::from(img[p]) / 255.0, out);
        self.split.labels[i] as usize
    }
}
