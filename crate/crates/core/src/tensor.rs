//! Dense row-major tensors.
//!
//! Values are held in 64-bit floats so that every reduction accumulates in
//! double precision. The nominal element width used for payload accounting
//! and checkpoint blobs is tracked separately and defaults to 4 bytes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bytes per element on the wire and on disk.
pub const DEFAULT_ELEM_BYTES: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    elem_bytes: usize,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(
                "tensor",
                format!("extents must be positive, got {shape:?}"),
            ));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "tensor",
                format!(
                    "shape {shape:?} needs {expected} elements, got {}",
                    data.len()
                ),
            ));
        }
        Ok(Tensor {
            shape,
            data,
            elem_bytes: DEFAULT_ELEM_BYTES,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
            elem_bytes: DEFAULT_ELEM_BYTES,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(&[1], value)
    }

    /// Internal constructor for kernels that already guarantee `len == prod(shape)`.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data,
            elem_bytes: DEFAULT_ELEM_BYTES,
        }
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

    pub fn elem_bytes(&self) -> usize {
        self.elem_bytes
    }

    pub fn with_elem_bytes(mut self, bytes: usize) -> Self {
        self.elem_bytes = bytes;
        self
    }

    /// Payload size at the nominal element width.
    pub fn nbytes(&self) -> usize {
        self.data.len() * self.elem_bytes
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        Ok(Tensor { shape, ..self })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn ensure_finite(self, op: &'static str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(Error::NumericOverflow { op })
        }
    }

    /// Rounds every element to the nearest 32-bit float.
    pub fn round_to_f32(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on mismatched shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Selects `indices` along `axis`, keeping their order.
    pub fn select(&self, axis: usize, indices: &[usize]) -> Result<Tensor> {
        if axis >= self.shape.len() {
            return Err(Error::shape(
                "select",
                format!("axis {axis} out of range for {:?}", self.shape),
            ));
        }
        let extent = self.shape[axis];
        if indices.is_empty() || indices.iter().any(|&i| i >= extent) {
            return Err(Error::shape(
                "select",
                format!("indices {indices:?} invalid for axis extent {extent}"),
            ));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            let base = o * extent * inner;
            for &i in indices {
                let start = base + i * inner;
                data.extend_from_slice(&self.data[start..start + inner]);
            }
        }
        let mut shape = self.shape.clone();
        shape[axis] = indices.len();
        Ok(Tensor::from_parts(shape, data).with_elem_bytes(self.elem_bytes))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_length_mismatch() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
        assert_eq!(Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap().len(), 6);
    }

    #[test]
    fn default_width_is_four_bytes() {
        let t = Tensor::zeros(&[3, 5]);
        assert_eq!(t.elem_bytes(), 4);
        assert_eq!(t.nbytes(), 60);
    }

    #[test]
    fn select_along_middle_axis() {
        let t = Tensor::new(vec![2, 3, 2], (0..12).map(f64::from).collect()).unwrap();
        let s = t.select(1, &[0, 2]).unwrap();
        assert_eq!(s.shape(), &[2, 2, 2]);
        assert_eq!(s.data(), &[0.0, 1.0, 4.0, 5.0, 6.0, 7.0, 10.0, 11.0]);
        assert!(t.select(1, &[3]).is_err());
        assert!(t.select(1, &[]).is_err());
    }

    #[test]
    fn non_finite_is_reported() {
        let t = Tensor::new(vec![2], vec![1.0, f64::INFINITY]).unwrap();
        assert!(matches!(
            t.ensure_finite("test"),
            Err(Error::NumericOverflow { op: "test" })
        ));
    }
}
