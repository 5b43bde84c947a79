//! Dense row-major tensors and their initializers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::real::Real;

/// How a freshly created tensor is filled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Constant(f64),
    Uniform { low: f64, high: f64 },
    Normal { mean: f64, std: f64 },
    /// Normal(0, sqrt(2 / fan_in)), with fan_in = product of all but the first extent.
    HeFanIn,
}

/// A contiguous row-major array of floating-point values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

pub(crate) fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::shape("tensor rank must be at least 1"));
    }
    if let Some(bad) = shape.iter().find(|&&d| d == 0) {
        return Err(Error::shape(format!(
            "extent {bad} in shape {shape:?}; all extents must be >= 1"
        )));
    }
    Ok(shape.iter().product())
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {n} elements but {} were supplied",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&x| T::of(x)).collect())
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let n = check_shape(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        })
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Creates a tensor filled according to `init`. Deterministic for a given seed.
    pub fn create(shape: &[usize], init: Init, seed: u64) -> Result<Self> {
        let n = check_shape(shape)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = match init {
            Init::Zeros => vec![T::zero(); n],
            Init::Constant(c) => vec![T::of(c); n],
            Init::Uniform { low, high } => {
                if !(low < high) {
                    return Err(Error::config(format!(
                        "uniform bounds must satisfy low < high, got ({low}, {high})"
                    )));
                }
                let dist = Uniform::new(low, high).map_err(|e| Error::config(e.to_string()))?;
                (0..n).map(|_| T::of(dist.sample(&mut rng))).collect()
            }
            Init::Normal { mean, std } => sample_normal(n, mean, std, &mut rng)?,
            Init::HeFanIn => {
                let fan_in: usize = shape[1..].iter().product::<usize>().max(1);
                sample_normal(n, 0.0, (2.0 / fan_in as f64).sqrt(), &mut rng)?
            }
        };
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect()
    }

    /// Converts between precision modes.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|x| U::of(x.to_f64().unwrap_or(f64::NAN)))
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    /// Inner product of two equally shaped tensors.
    pub fn dot(&self, other: &Self) -> Result<T> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "dot of {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a * b)
            .sum())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs().to_f64().unwrap_or(f64::INFINITY))
            .fold(0.0, f64::max)
    }

    pub fn get(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: T) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| {
                assert!(i < d, "index {index:?} out of bounds for {:?}", self.shape);
                acc * d + i
            })
    }
}

fn sample_normal<T: Real>(n: usize, mean: f64, std: f64, rng: &mut impl Rng) -> Result<Vec<T>> {
    if !(std >= 0.0) {
        return Err(Error::config(format!("normal std must be >= 0, got {std}")));
    }
    let dist = Normal::new(mean, std).map_err(|e| Error::config(e.to_string()))?;
    Ok((0..n).map(|_| T::of(dist.sample(rng))).collect())
}

/// Row-major strides of a shape.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeros_and_constant() {
        let z = Tensor::<f64>::create(&[2, 2], Init::Zeros, 0).unwrap();
        assert_eq!(z.data(), &[0.0; 4]);
        let c = Tensor::<f64>::create(&[3], Init::Constant(1.5), 0).unwrap();
        assert_eq!(c.data(), &[1.5, 1.5, 1.5]);
    }

    #[test]
    fn uniform_mean_is_near_half() {
        let u = Tensor::<f64>::create(&[1000], Init::Uniform { low: 0.0, high: 1.0 }, 7).unwrap();
        let mean = u.sum() / 1000.0;
        assert!((mean - 0.5).abs() < 0.05, "mean {mean}");
        assert!(u.data().iter().all(|&x| (0.0..1.0).contains(&x)));
    }

    #[test]
    fn he_init_matches_fan_in_scale() {
        let w = Tensor::<f64>::create(&[64, 8, 3, 3], Init::HeFanIn, 3).unwrap();
        let n = w.len() as f64;
        let var = w.data().iter().map(|x| x * x).sum::<f64>() / n;
        let expected = 2.0 / 72.0;
        assert!((var / expected - 1.0).abs() < 0.1, "var {var} vs {expected}");
    }

    #[test]
    fn creation_is_deterministic() {
        let a = Tensor::<f32>::create(&[50], Init::Normal { mean: 0.0, std: 1.0 }, 11).unwrap();
        let b = Tensor::<f32>::create(&[50], Init::Normal { mean: 0.0, std: 1.0 }, 11).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_shapes_and_bounds() {
        assert!(matches!(Tensor::<f64>::zeros(&[2, 0]), Err(Error::Shape(_))));
        assert!(Tensor::<f64>::create(&[2], Init::Uniform { low: 1.0, high: 1.0 }, 0).is_err());
        assert!(Tensor::<f64>::create(&[2], Init::Normal { mean: 0.0, std: -1.0 }, 0).is_err());
        assert!(Tensor::<f64>::new(&[2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn strides_are_row_major() {
        assert_eq!(strides(&[2, 3, 4]), vec![12, 4, 1]);
    }
}
