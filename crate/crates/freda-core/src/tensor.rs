//! Dense row-major real tensors.
//!
//! The single value carrier for the whole laboratory: images, spectra
//! components, features, and model parameters. Values are `f64` in memory
//! (numerics-critical paths need the headroom); files store `f32`.

use crate::error::{Error, Result};

/// Dense multi-dimensional array of `f64`, C-order (row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor from extents and data; `data.len()` must equal the
    /// product of `dims` and every extent must be positive.
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("zero extent in dims {dims:?}")));
        }
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "dims {dims:?} imply {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { dims, data })
    }

    /// All-zeros tensor with the given extents.
    pub fn zeros(dims: Vec<usize>) -> Self {
        let n: usize = dims.iter().product();
        Tensor {
            dims,
            data: vec![0.0; n],
        }
    }

    /// Tensor filled with a constant.
    pub fn full(dims: Vec<usize>, value: f64) -> Self {
        let n: usize = dims.iter().product();
        Tensor {
            dims,
            data: vec![value; n],
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    /// Total number of elements.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Reinterprets the tensor with new extents of identical total size.
    pub fn reshape(mut self, dims: Vec<usize>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} ({} values) to {dims:?} ({n} values)",
                self.dims,
                self.data.len()
            )));
        }
        self.dims = dims;
        Ok(self)
    }

    /// True when every value is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute value (0 for the empty edge case).
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Rounds every value to the nearest f32, staying in f64 storage.
    /// This is the precision tensors have after a disk round-trip.
    pub fn quantize_f32(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }

    /// Maximum absolute elementwise difference; errors on shape mismatch.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.dims != other.dims {
            return Err(Error::shape(format!(
                "dims {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    /// Selects rows along the first axis, in the order given.
    pub fn gather_first(&self, indices: &[usize]) -> Result<Tensor> {
        if self.dims.is_empty() {
            return Err(Error::shape("gather_first needs rank ≥ 1"));
        }
        let rows = self.dims[0];
        if indices.is_empty() {
            return Err(Error::shape("gather_first: empty index set"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::shape(format!("row {bad} out of {rows}")));
        }
        let stride: usize = self.dims[1..].iter().product();
        let mut data = Vec::with_capacity(indices.len() * stride);
        for &i in indices {
            data.extend_from_slice(&self.data[i * stride..(i + 1) * stride]);
        }
        let mut dims = self.dims.clone();
        dims[0] = indices.len();
        Tensor::new(dims, data)
    }
}
