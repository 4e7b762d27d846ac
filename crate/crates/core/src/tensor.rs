//! Dense row-major tensors.
//!
//! Values are held as `f64` regardless of dtype; a tensor tagged
//! [`Dtype::F32`] keeps every element exactly representable in 32 bits by
//! rounding through `f32` on construction. Ops that produce new tensors
//! re-apply the rounding, so an f32 run behaves like genuine
//! single-precision arithmetic while sharing one code path with the
//! f64 gradient-check mode.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn quantize(self, x: f64) -> f64 {
        match self {
            Dtype::F32 => x as f32 as f64,
            Dtype::F64 => x,
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Dtype> {
        match tag {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }
}

/// Contiguous row-major n-dimensional array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub dtype: Dtype,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>, dtype: Dtype) -> Tensor {
        assert_eq!(
            numel(&shape),
            data.len(),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        let data = data.into_iter().map(|x| dtype.quantize(x)).collect();
        Tensor { shape, data, dtype }
    }

    pub fn zeros(shape: Vec<usize>, dtype: Dtype) -> Tensor {
        let n = numel(&shape);
        Tensor { shape, data: vec![0.0; n], dtype }
    }

    pub fn full(shape: Vec<usize>, value: f64, dtype: Dtype) -> Tensor {
        let n = numel(&shape);
        Tensor { shape, data: vec![dtype.quantize(value); n], dtype }
    }

    pub fn scalar(value: f64, dtype: Dtype) -> Tensor {
        Tensor::new(vec![1], vec![value], dtype)
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Number of rows of a matrix, or 1 for a vector/scalar.
    pub fn rows(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn at2(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.shape[1] + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.shape[1];
        &self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn to_dtype(&self, dtype: Dtype) -> Tensor {
        Tensor::new(self.shape.clone(), self.data.clone(), dtype)
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f32_quantization_rounds_through_single_precision() {
        let t = Tensor::new(vec![2], vec![0.1, 1.0 / 3.0], Dtype::F32);
        assert_eq!(t.data[0], 0.1f32 as f64);
        assert_eq!(t.data[1], (1.0f32 / 3.0) as f64);
        let u = Tensor::new(vec![2], vec![0.1, 1.0 / 3.0], Dtype::F64);
        assert_eq!(u.data[0], 0.1);
    }

    #[test]
    #[should_panic(expected = "does not match shape")]
    fn shape_mismatch_panics() {
        Tensor::new(vec![2, 2], vec![1.0; 3], Dtype::F64);
    }
}
