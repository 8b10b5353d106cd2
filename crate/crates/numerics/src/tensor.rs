use serde::{Deserialize, Serialize};

use crate::error::{NumericsError, Result};
use crate::scalar::Scalar;

/// Dense row-major n-dimensional array.
///
/// `shape.iter().product() == data.len()` always holds; constructors reject
/// anything else.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "tensor",
                expected: shape,
                got: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<T>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(NumericsError::ShapeMismatch {
                op: "dims2",
                expected: vec![0, 0],
                got: other.to_vec(),
            }),
        }
    }

    pub fn row(&self, i: usize) -> &[T] {
        let cols = *self.shape.last().unwrap_or(&1);
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "reshape",
                expected: shape,
                got: self.shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(NumericsError::NonFinite { op })
        }
    }

    /// Root mean square of all elements (0 for an empty tensor).
    pub fn rms(&self) -> T {
        if self.data.is_empty() {
            return T::zero();
        }
        let ss: T = self.data.iter().map(|&v| v * v).sum();
        (ss / T::lit(self.data.len() as f64)).sqrt()
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    /// Softmax along `axis`, computed after subtracting the per-slice maximum.
    pub fn softmax(&self, axis: usize) -> Result<Self> {
        if axis >= self.rank() {
            return Err(NumericsError::InvalidAxis {
                axis,
                rank: self.rank(),
            });
        }
        self.ensure_finite("softmax")?;
        let (outer, len, inner) = axis_split(&self.shape, axis);
        let mut out = vec![T::zero(); self.data.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let idx = |j: usize| base + j * inner;
                let mut max = T::neg_infinity();
                for j in 0..len {
                    max = max.max(self.data[idx(j)]);
                }
                let mut sum = T::zero();
                for j in 0..len {
                    let e = (self.data[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[idx(j)] /= sum;
                }
            }
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: out,
        })
    }
}

/// Decomposes `shape` around `axis` into (outer, axis length, inner) extents.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_shape() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn softmax_uniform() {
        let t = Tensor::<f64>::from_vec(vec![0.0, 0.0, 0.0]);
        let s = t.softmax(0).unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_shift_invariant() {
        let t = Tensor::<f64>::new(vec![2, 3], vec![0.3, -1.0, 2.0, 5.0, 5.5, -3.0]).unwrap();
        let shifted = t.map(|v| v + 123.25);
        let a = t.softmax(1).unwrap();
        let b = shifted.softmax(1).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_matches_high_precision_values() {
        // exp(k - 3) / (e^-2 + e^-1 + 1) evaluated with 40-digit arithmetic
        let expected = [
            0.090_030_573_170_380_458,
            0.244_728_471_054_797_652,
            0.665_240_955_774_821_890,
        ];
        let t = Tensor::<f64>::from_vec(vec![1.0, 2.0, 3.0]);
        let s = t.softmax(0).unwrap();
        for (v, e) in s.data().iter().zip(expected) {
            assert!((v - e).abs() < 1e-6, "{v} vs {e}");
        }
        let s32 = t.cast::<f32>().softmax(0).unwrap();
        for (v, e) in s32.data().iter().zip(expected) {
            assert!((*v as f64 - e).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_along_leading_axis() {
        let t = Tensor::<f64>::new(vec![2, 2], vec![0.0, 1.0, 0.0, 3.0]).unwrap();
        let s = t.softmax(0).unwrap();
        assert!((s.data()[0] - 0.5).abs() < 1e-12);
        assert!((s.data()[2] - 0.5).abs() < 1e-12);
        assert!((s.data()[1] + s.data()[3] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_rejects_non_finite_and_bad_axis() {
        let t = Tensor::<f32>::from_vec(vec![0.0, f32::NAN]);
        assert!(matches!(t.softmax(0), Err(NumericsError::NonFinite { .. })));
        assert!(matches!(t.softmax(1), Err(NumericsError::InvalidAxis { .. })));
    }
}
