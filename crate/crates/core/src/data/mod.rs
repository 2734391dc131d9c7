//! Datasets, resizing and synthetic glyphs.

mod idx;
pub mod persist;
mod synthetic;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use idx::{load_idx, parse_idx};
pub use synthetic::{synthetic_binary, synthetic_digits, SYNTHETIC_SIZE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Full,
    Train,
    Validation,
    Test,
}

/// Images `[N, H, W, C]` with values in [0, 1] and their class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    classes: usize,
    split: Split,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        if images.rank() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::Dimension { op: "dataset", shapes: vec![images.shape().to_vec(), vec![labels.len()]] });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::contract(format!("label {bad} not below class count {classes}")));
        }
        Ok(Dataset { images, labels, classes, split })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn height(&self) -> usize {
        self.images.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.images.shape()[2]
    }

    pub fn channels(&self) -> usize {
        self.images.shape()[3]
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    fn pixels(&self) -> usize {
        self.height() * self.width() * self.channels()
    }

    /// Image `i` as an `[H, W]` tensor of its first channel.
    pub fn image(&self, i: usize) -> Tensor {
        let (h, w, c) = (self.height(), self.width(), self.channels());
        let base = i * self.pixels();
        let data = (0..h * w).map(|p| self.images.data()[base + p * c]).collect();
        Tensor::new(vec![h, w], data).expect("image extents are positive")
    }

    /// Selected images stacked as `[n, C, H, W]`.
    pub fn batch_nchw(&self, indices: &[usize]) -> Result<Tensor> {
        let (h, w, c) = (self.height(), self.width(), self.channels());
        let mut data = Vec::with_capacity(indices.len() * self.pixels());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::contract(format!("sample index {i} out of range for {} samples", self.len())));
            }
            let base = i * self.pixels();
            for ch in 0..c {
                for p in 0..h * w {
                    data.push(self.images.data()[base + p * c + ch]);
                }
            }
        }
        Tensor::new(vec![indices.len(), c, h, w], data)
    }

    pub fn batch_labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    pub fn subset(&self, indices: &[usize], split: Split) -> Result<Dataset> {
        if indices.is_empty() {
            return Err(Error::contract("empty subset"));
        }
        let px = self.pixels();
        let mut data = Vec::with_capacity(indices.len() * px);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::contract(format!("sample index {i} out of range for {} samples", self.len())));
            }
            data.extend_from_slice(&self.images.data()[i * px..(i + 1) * px]);
        }
        let shape = vec![indices.len(), self.height(), self.width(), self.channels()];
        Dataset::new(Tensor::new(shape, data)?, self.batch_labels(indices), self.classes, split)
    }

    /// Seeded shuffle, then the last `holdout` fraction becomes the
    /// validation split.
    pub fn train_validation_split(&self, holdout: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&holdout) {
            return Err(Error::contract(format!("holdout fraction {holdout} outside [0, 1)")));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_val = ((self.len() as f64) * holdout).round() as usize;
        let n_val = n_val.clamp(1, self.len().saturating_sub(1));
        let (train, val) = order.split_at(self.len() - n_val);
        Ok((self.subset(train, Split::Train)?, self.subset(val, Split::Validation)?))
    }

    /// Every image resized to `height × width` with the chosen method.
    pub fn resized(&self, height: usize, width: usize, method: ResizeMethod) -> Result<Dataset> {
        if height == self.height() && width == self.width() {
            return Ok(self.clone());
        }
        let c = self.channels();
        let mut data = Vec::with_capacity(self.len() * height * width * c);
        for i in 0..self.len() {
            let base = i * self.pixels();
            let planes: Vec<Tensor> = (0..c)
                .map(|ch| {
                    let plane = Tensor::from_fn(vec![self.height(), self.width()], |p| self.images.data()[base + p * c + ch]);
                    resize(&plane, height, width, method)
                })
                .collect::<Result<_>>()?;
            for p in 0..height * width {
                for plane in &planes {
                    data.push(plane.data()[p]);
                }
            }
        }
        Dataset::new(Tensor::new(vec![self.len(), height, width, c], data)?, self.labels.clone(), self.classes, self.split)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResizeMethod {
    #[default]
    Nearest,
    Bilinear,
}

pub fn resize(image: &Tensor, height: usize, width: usize, method: ResizeMethod) -> Result<Tensor> {
    match method {
        ResizeMethod::Nearest => resize_nearest(image, height, width),
        ResizeMethod::Bilinear => resize_bilinear(image, height, width),
    }
}

fn plane_dims(image: &Tensor, height: usize, width: usize) -> Result<(usize, usize)> {
    if image.rank() != 2 || height == 0 || width == 0 {
        return Err(Error::Dimension { op: "resize", shapes: vec![image.shape().to_vec(), vec![height, width]] });
    }
    Ok((image.shape()[0], image.shape()[1]))
}

/// Source index of destination index `d` under center alignment.
pub fn nearest_source(d: usize, src: usize, dst: usize) -> usize {
    (((2 * d + 1) * src) / (2 * dst)).min(src - 1)
}

/// Nearest-neighbour resize of an `[H, W]` image with pixel centres aligned.
pub fn resize_nearest(image: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let (h, w) = plane_dims(image, height, width)?;
    let cols: Vec<usize> = (0..width).map(|x| nearest_source(x, w, width)).collect();
    let mut out = Vec::with_capacity(height * width);
    for y in 0..height {
        let sy = nearest_source(y, h, height);
        out.extend(cols.iter().map(|&sx| image.data()[sy * w + sx]));
    }
    Tensor::new(vec![height, width], out)
}

/// Bilinear resize with pixel centres aligned and edge clamping.
pub fn resize_bilinear(image: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let (h, w) = plane_dims(image, height, width)?;
    let coord = |d: usize, src: usize, dst: usize| -> (usize, usize, f64) {
        let s = ((d as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64);
        let lo = s.floor() as usize;
        (lo, (lo + 1).min(src - 1), s - lo as f64)
    };
    let px = |y: usize, x: usize| image.data()[y * w + x];
    let mut out = Vec::with_capacity(height * width);
    for y in 0..height {
        let (y0, y1, fy) = coord(y, h, height);
        for x in 0..width {
            let (x0, x1, fx) = coord(x, w, width);
            let top = px(y0, x0) * (1.0 - fx) + px(y0, x1) * fx;
            let bottom = px(y1, x0) * (1.0 - fx) + px(y1, x1) * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    Tensor::new(vec![height, width], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_and_identity_resize() {
        let c = Tensor::full(vec![28, 28], 0.4);
        for m in [ResizeMethod::Nearest, ResizeMethod::Bilinear] {
            let r = resize(&c, 32, 32, m).unwrap();
            assert!(r.data().iter().all(|&v| (v - 0.4).abs() < 1e-15));
        }
        let img = Tensor::from_fn(vec![5, 7], |i| i as f64 / 35.0);
        assert_eq!(resize_nearest(&img, 5, 7).unwrap(), img);
        assert_eq!(resize_bilinear(&img, 5, 7).unwrap(), img);
    }

    #[test]
    fn split_is_disjoint_and_seeded() {
        let ds = synthetic_digits(50, 1).unwrap();
        let (t, v) = ds.train_validation_split(0.2, 3).unwrap();
        assert_eq!((t.len(), v.len()), (40, 10));
        assert_eq!(t.split(), Split::Train);
        let (t2, _) = ds.train_validation_split(0.2, 3).unwrap();
        assert_eq!(t, t2);
    }

    #[test]
    fn batch_layout_is_nchw() {
        let ds = synthetic_digits(3, 2).unwrap();
        let b = ds.batch_nchw(&[2, 0]).unwrap();
        assert_eq!(b.shape(), &[2, 1, 32, 32]);
        assert_eq!(&b.data()[..1024], ds.image(2).data());
        assert!(ds.batch_nchw(&[3]).is_err());
    }
}
