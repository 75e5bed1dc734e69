use crate::error::{Error, Result};
use crate::image::ImageTensor;

use super::Real;

/// `N x H x W x C` tensor, channel-last, the network's working format.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    data: Vec<T>,
}

impl<T: Real> Batch<T> {
    pub fn zeros(n: usize, h: usize, w: usize, c: usize) -> Self {
        Batch { n, h, w, c, data: vec![T::zero(); n * h * w * c] }
    }

    pub fn from_vec(n: usize, h: usize, w: usize, c: usize, data: Vec<T>) -> Result<Self> {
        let expected = n * h * w * c;
        if data.len() != expected {
            return Err(Error::LengthMismatch { expected, actual: data.len() });
        }
        Ok(Batch { n, h, w, c, data })
    }

    pub fn from_image(img: &ImageTensor) -> Self {
        let (h, w, c) = img.dims();
        Batch { n: 1, h, w, c, data: img.data().iter().map(|&v| T::of(f64::from(v))).collect() }
    }

    pub fn from_images(imgs: &[ImageTensor]) -> Result<Self> {
        let first = imgs.first().ok_or_else(|| Error::ShapeMismatch("empty batch".into()))?;
        let (h, w, c) = first.dims();
        let mut data = Vec::with_capacity(imgs.len() * first.len());
        for img in imgs {
            if img.dims() != (h, w, c) {
                return Err(Error::ShapeMismatch(format!("batch of {:?} got {:?}", (h, w, c), img.dims())));
            }
            data.extend(img.data().iter().map(|&v| T::of(f64::from(v))));
        }
        Ok(Batch { n: imgs.len(), h, w, c, data })
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.n, self.h, self.w, self.c)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn sample_len(&self) -> usize {
        self.h * self.w * self.c
    }

    pub fn sample(&self, i: usize) -> &[T] {
        let s = self.sample_len();
        &self.data[i * s..(i + 1) * s]
    }

    pub fn image(&self, i: usize) -> Result<ImageTensor> {
        ImageTensor::new(self.h, self.w, self.c, self.sample(i).iter().map(|v| v.as_f64() as f32).collect())
    }

    pub fn to_images(&self) -> Result<Vec<ImageTensor>> {
        (0..self.n).map(|i| self.image(i)).collect()
    }

    pub fn cast<U: Real>(&self) -> Batch<U> {
        Batch { n: self.n, h: self.h, w: self.w, c: self.c, data: self.data.iter().map(|v| U::of(v.as_f64())).collect() }
    }

    pub fn same_shape(&self, other: &Batch<T>) -> bool {
        self.dims() == other.dims()
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &Batch<T>) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", self.dims(), other.dims())));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub(crate) fn zeros_with_channels(&self, c: usize) -> Batch<T> {
        Batch::zeros(self.n, self.h, self.w, c)
    }
}

/// Mean squared error over every element.
pub fn batch_mse<T: Real>(a: &Batch<T>, b: &Batch<T>) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    let sum: f64 = a.data.iter().zip(&b.data).map(|(&x, &y)| (x.as_f64() - y.as_f64()).powi(2)).sum();
    Ok(sum / a.len() as f64)
}

/// `weight * d MSE(a, b) / d a`, i.e. `2 weight (a - b) / N`.
pub fn batch_mse_grad<T: Real>(a: &Batch<T>, b: &Batch<T>, weight: f64) -> Result<Batch<T>> {
    if !a.same_shape(b) {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    let scale = T::of(2.0 * weight / a.len() as f64);
    let data = a.data.iter().zip(&b.data).map(|(&x, &y)| (x - y) * scale).collect();
    Ok(Batch { n: a.n, h: a.h, w: a.w, c: a.c, data })
}
