use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{check_len, Error, Result};

/// Dense row-major float64 array. Constructors reject NaN and infinities.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        check_len("data length", shape.iter().product(), data.len())?;
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(value.is_finite());
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn random_normal<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    /// Internal constructor for buffers produced by finite arithmetic on finite inputs.
    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(C, H, W)` of a rank-3 tensor.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        check_len("rank", 3, self.shape.len())?;
        Ok((self.shape[0], self.shape[1], self.shape[2]))
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let plane = self.data.len() / self.shape[0];
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let plane = self.data.len() / self.shape[0];
        &mut self.data[c * plane..(c + 1) * plane]
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        dot(&self.data, &other.data)
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn scale(&self, a: f64) -> Tensor {
        self.map(|v| a * v)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_raw(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        Tensor::from_raw(
            self.shape.clone(),
            self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        )
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        self.zip_map(other, |a, b| a - b)
    }

    /// `self += a * other`
    pub fn axpy(&mut self, a: f64, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "axpy shape mismatch");
        for (s, o) in self.data.iter_mut().zip(&other.data) {
            *s += a * o;
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Tensor> {
        check_len("reshape size", self.data.len(), shape.iter().product())?;
        self.shape = shape.to_vec();
        Ok(self)
    }
}

/// Left-to-right dot product.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(0.0, |s, (x, y)| s + x * y)
}

pub fn mean(a: &[f64]) -> f64 {
    a.iter().sum::<f64>() / a.len() as f64
}

/// Elementwise binary mask with the shape of the tensor it was taken from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    shape: Vec<usize>,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(shape: Vec<usize>, bits: Vec<bool>) -> Result<Self> {
        check_len("mask length", shape.iter().product(), bits.len())?;
        Ok(Self { shape, bits })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn channel(&self, c: usize) -> &[bool] {
        let plane = self.bits.len() / self.shape[0];
        &self.bits[c * plane..(c + 1) * plane]
    }

    /// Multiply `g` by the mask in place.
    pub fn apply(&self, g: &mut Tensor) {
        assert_eq!(self.shape, g.shape, "mask shape mismatch");
        for (v, &b) in g.data.iter_mut().zip(&self.bits) {
            if !b {
                *v = 0.0;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_finite_and_bad_length() {
        assert!(matches!(Tensor::new(vec![2], vec![1.0, f64::NAN]), Err(Error::NonFinite(1))));
        assert!(matches!(
            Tensor::new(vec![2, 2], vec![1.0; 3]),
            Err(Error::Shape { expected: 4, got: 3, .. })
        ));
    }

    #[test]
    fn axpy_and_dot() {
        let mut a = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let b = Tensor::new(vec![3], vec![1.0, 1.0, 1.0]).unwrap();
        a.axpy(2.0, &b);
        assert_eq!(a.data(), &[3.0, 4.0, 5.0]);
        assert_eq!(a.dot(&b), 12.0);
    }
}
