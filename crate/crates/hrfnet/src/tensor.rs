//! Dense NCHW tensor used throughout the crate.
//!
//! Values are f64. Data is reference-counted so tensors clone cheaply;
//! mutation goes through [`Tensor::data_mut`], which copies on write only
//! when the buffer is shared.

use std::sync::Arc;

use crate::error::{Error, Result};

/// A dense 4-D tensor in NCHW layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: [usize; 4],
    data: Arc<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: [usize; 4], data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        Tensor::new(shape, vec![0.0; shape.iter().product()])
    }

    pub fn filled(shape: [usize; 4], value: f64) -> Self {
        Tensor::new(shape, vec![value; shape.iter().product()])
    }

    /// Scalar tensor of shape [1,1,1,1].
    pub fn scalar(value: f64) -> Self {
        Tensor::new([1, 1, 1, 1], vec![value])
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn n(&self) -> usize {
        self.shape[0]
    }
    pub fn c(&self) -> usize {
        self.shape[1]
    }
    pub fn h(&self) -> usize {
        self.shape[2]
    }
    pub fn w(&self) -> usize {
        self.shape[3]
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<f64> {
        match Arc::try_unwrap(self.data) {
            Ok(v) => v,
            Err(arc) => arc.as_ref().clone(),
        }
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        let [_, cs, hs, ws] = self.shape;
        self.data[((n * cs + c) * hs + h) * ws + w]
    }

    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: f64) {
        let [_, cs, hs, ws] = self.shape;
        let idx = ((n * cs + c) * hs + h) * ws + w;
        self.data_mut()[idx] = v;
    }

    /// Reshape without moving data.
    pub fn reshape(&self, shape: [usize; 4]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} ({} elements) to {:?}",
                self.shape,
                self.numel(),
                shape
            )));
        }
        Ok(Tensor {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::new(self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape, other.shape);
        Tensor::new(
            self.shape,
            self.data
                .iter()
                .zip(other.data.iter())
                .map(|(a, b)| a + b)
                .collect(),
        )
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape, other.shape);
        Tensor::new(
            self.shape,
            self.data
                .iter()
                .zip(other.data.iter())
                .map(|(a, b)| a - b)
                .collect(),
        )
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, &v| m.max(v.abs()))
    }

    pub fn min(&self) -> f64 {
        self.data.iter().fold(f64::INFINITY, |m, &v| m.min(v))
    }

    pub fn max(&self) -> f64 {
        self.data.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Single image slice [1,C,H,W] out of a batch tensor.
    pub fn slice_batch(&self, n: usize) -> Tensor {
        assert!(n < self.n());
        let per = self.c() * self.h() * self.w();
        Tensor::new(
            [1, self.c(), self.h(), self.w()],
            self.data[n * per..(n + 1) * per].to_vec(),
        )
    }

    /// Stack [1,C,H,W] tensors into one [N,C,H,W] batch.
    pub fn stack_batch(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::Shape("cannot stack an empty batch".into()))?;
        let [_, c, h, w] = first.shape();
        let mut data = Vec::with_capacity(items.len() * c * h * w);
        for t in items {
            if t.shape() != [1, c, h, w] {
                return Err(Error::Shape(format!(
                    "batch item shape {:?} differs from {:?}",
                    t.shape(),
                    [1, c, h, w]
                )));
            }
            data.extend_from_slice(t.data());
        }
        Ok(Tensor::new([items.len(), c, h, w], data))
    }
}

/// Convert an 8-bit RGB image to a [1,3,H,W] tensor with values in 0..=255.
pub fn tensor_from_rgb(img: &image::RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        let (x, y) = (x as usize, y as usize);
        for c in 0..3 {
            data[c * h * w + y * w + x] = p.0[c] as f64;
        }
    }
    Tensor::new([1, 3, h, w], data)
}

/// Convert a grayscale mask (any nonzero pixel = tampered) to a [1,1,H,W]
/// tensor of {0,1}.
pub fn tensor_from_mask(img: &image::GrayImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; h * w];
    for (x, y, p) in img.enumerate_pixels() {
        data[y as usize * w + x as usize] = if p.0[0] > 0 { 1.0 } else { 0.0 };
    }
    Tensor::new([1, 1, h, w], data)
}

/// Render a [1,1,H,W] tensor in [0,1] as an 8-bit grayscale image.
pub fn gray_from_tensor(t: &Tensor) -> image::GrayImage {
    assert_eq!(t.n(), 1);
    assert_eq!(t.c(), 1);
    let (h, w) = (t.h(), t.w());
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let v = (t.at(0, 0, y, x).clamp(0.0, 1.0) * 255.0).round() as u8;
            img.put_pixel(x as u32, y as u32, image::Luma([v]));
        }
    }
    img
}
