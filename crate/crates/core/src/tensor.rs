//! Dense row-major tensors without autodiff bookkeeping.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Initialization scheme for [`Tensor::alloc`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Constant(f64),
    Gaussian { mean: f64, std: f64, seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

/// Element count of `shape`, or an allocation error on overflow.
pub fn checked_numel(shape: &[usize]) -> Result<usize> {
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n <= isize::MAX as usize)
        .ok_or_else(|| Error::Alloc(format!("extent product of {shape:?} overflows")))
}

pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let n = checked_numel(&shape)?;
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Self::from_vec(shape, data.iter().map(|&v| T::from_f64_lossy(v)).collect())
    }

    pub fn alloc(shape: impl Into<Vec<usize>>, init: Init) -> Result<Self> {
        let shape = shape.into();
        let n = checked_numel(&shape)?;
        let data = match init {
            Init::Zeros => vec![T::zero(); n],
            Init::Ones => vec![T::one(); n],
            Init::Constant(c) => vec![T::from_f64_lossy(c); n],
            Init::Gaussian { mean, std, seed } => {
                if !(std >= 0.0) || !std.is_finite() || !mean.is_finite() {
                    return Err(Error::Domain(format!(
                        "gaussian init needs finite mean and std >= 0, got ({mean}, {std})"
                    )));
                }
                let dist = Normal::new(mean, std).map_err(|e| Error::Domain(e.to_string()))?;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..n)
                    .map(|_| T::from_f64_lossy(dist.sample(&mut rng)))
                    .collect()
            }
        };
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![T::zero(); n],
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn get(&self, index: &[usize]) -> T {
        assert_eq!(index.len(), self.shape.len());
        let st = strides(&self.shape);
        let off: usize = index
            .iter()
            .zip(&self.shape)
            .zip(&st)
            .map(|((&i, &d), &s)| {
                assert!(i < d, "index {index:?} out of bounds for {:?}", self.shape);
                i * s
            })
            .sum();
        self.data[off]
    }

    pub fn reshaped(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if checked_numel(&shape)? != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&v| U::from_f64_lossy(v.as_f64()))
                .collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[T] {
        assert_eq!(self.rank(), 2);
        let c = self.shape[1];
        &self.data[i * c..(i + 1) * c]
    }

    /// Bit-level equality, distinguishing signed zeros and NaN payloads.
    pub fn bit_eq(&self, other: &Tensor<T>) -> bool {
        let mut a = Vec::new();
        let mut b = Vec::new();
        for &v in &self.data {
            v.write_le(&mut a);
        }
        for &v in &other.data {
            v.write_le(&mut b);
        }
        self.shape == other.shape && a == b
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alloc_ones_and_empty() {
        let t = Tensor::<f32>::alloc([2, 2], Init::Ones).unwrap();
        assert_eq!(t.data(), &[1.0, 1.0, 1.0, 1.0]);
        let e = Tensor::<f32>::alloc([0], Init::Zeros).unwrap();
        assert_eq!(e.numel(), 0);
        assert_eq!(e.shape(), &[0]);
    }

    #[test]
    fn gaussian_is_deterministic() {
        let init = Init::Gaussian {
            mean: 0.0,
            std: 1.0,
            seed: 7,
        };
        let a = Tensor::<f32>::alloc([3], init).unwrap();
        let b = Tensor::<f32>::alloc([3], init).unwrap();
        assert!(a.bit_eq(&b));
        let c = Tensor::<f32>::alloc(
            [3],
            Init::Gaussian {
                mean: 0.0,
                std: 1.0,
                seed: 8,
            },
        )
        .unwrap();
        assert!(!a.bit_eq(&c));
    }

    #[test]
    fn overflowing_shape_is_an_allocation_error() {
        let err = Tensor::<f32>::alloc([usize::MAX, 4], Init::Zeros).unwrap_err();
        assert!(matches!(err, Error::Alloc(_)));
    }

    #[test]
    fn negative_std_rejected() {
        let err = Tensor::<f64>::alloc(
            [2],
            Init::Gaussian {
                mean: 0.0,
                std: -1.0,
                seed: 0,
            },
        )
        .unwrap_err();
        assert!(matches!(err, Error::Domain(_)));
    }

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::<f32>::from_vec([2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::<f32>::from_vec([2, 3], (0..6).map(|v| v as f32).collect()).unwrap();
        assert_eq!(t.get(&[1, 2]), 5.0);
        assert_eq!(strides(&[2, 3, 4]), vec![12, 4, 1]);
    }
}
