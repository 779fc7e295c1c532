use serde::{Deserialize, Serialize};

use crate::error::{Result, TowerError};
use crate::image::Image;
use crate::scalar::Scalar;

/// Dense row-major array. Activations use `N x C x H x W`, dense layers
/// `N x F`, weights `O x I (x K x K)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TowerError::Data(format!(
                "shape {shape:?} holds {numel} values, buffer has {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![S::zero(); shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], v: S) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn scalar(v: S) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    /// Stacks equally shaped images into `N x C x H x W`.
    pub fn from_images(images: &[&Image<S>]) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| TowerError::Data("empty image batch".into()))?;
        let (h, w, c) = first.shape();
        let mut data = Vec::with_capacity(images.len() * h * w * c);
        for img in images {
            if img.shape() != (h, w, c) {
                return Err(TowerError::Data(format!(
                    "batch mixes shapes {:?} and {:?}",
                    (h, w, c),
                    img.shape()
                )));
            }
            data.extend(img.to_planar());
        }
        Ok(Self {
            shape: vec![images.len(), c, h, w],
            data,
        })
    }

    /// Splits an `N x C x H x W` tensor back into images.
    pub fn to_images(&self) -> Result<Vec<Image<S>>> {
        let &[n, c, h, w] = self.shape.as_slice() else {
            return Err(TowerError::Data(format!(
                "expected a 4-D tensor, got {:?}",
                self.shape
            )));
        };
        let per = c * h * w;
        (0..n)
            .map(|i| Image::from_planar(h, w, c, &self.data[i * per..(i + 1) * per]))
            .collect()
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn data(&self) -> &[S] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading dimension.
    pub fn batch(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    pub fn item(&self) -> S {
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> S {
        self.data.iter().fold(S::zero(), |a, &b| a + b)
    }

    pub fn sq_norm(&self) -> S {
        self.data.iter().fold(S::zero(), |a, &b| a + b * b)
    }

    pub fn add_assign(&mut self, other: &Tensor<S>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: S) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(TowerError::Data(format!(
                "cannot reshape {:?} to {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::lit(v.as_f64())).collect(),
        }
    }
}
