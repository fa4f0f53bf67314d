//! Dense 4-D NCHW tensor with single-precision values.
//!
//! This is the universal currency of the engine: activations, parameters and
//! gradients are all `Tensor`s (or flat `f32` slices derived from them).
//! Data is contiguous row-major in (batch, channel, height, width) order.

use rand::Rng;

use crate::error::{Error, Result};

/// Dense NCHW tensor of `f32` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f32>,
}

impl Tensor {
    /// Zero-filled tensor. All extents must be >= 1.
    pub fn zeros(shape: [usize; 4]) -> Tensor {
        assert!(
            shape.iter().all(|&e| e >= 1),
            "tensor extents must be >= 1, got {shape:?}"
        );
        Tensor {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    /// Constant-filled tensor.
    pub fn filled(shape: [usize; 4], value: f32) -> Tensor {
        let mut t = Tensor::zeros(shape);
        t.data.fill(value);
        t
    }

    /// Wrap an existing buffer. Fails if the length does not match the shape
    /// or any extent is zero.
    pub fn from_vec(shape: [usize; 4], data: Vec<f32>) -> Result<Tensor> {
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::Config(format!(
                "tensor extents must be >= 1, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::Config(format!(
                "tensor data length {} does not match shape {:?} (= {} values)",
                data.len(),
                shape,
                expected
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Uniform values in `[lo, hi)` drawn from `rng` in index order.
    pub fn uniform<R: Rng>(shape: [usize; 4], lo: f32, hi: f32, rng: &mut R) -> Tensor {
        let mut t = Tensor::zeros(shape);
        for v in t.data.iter_mut() {
            *v = lo + (hi - lo) * rng.gen::<f32>();
        }
        t
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    /// Flat offset of element (n, c, i, j).
    #[inline]
    pub fn offset(&self, n: usize, c: usize, i: usize, j: usize) -> usize {
        ((n * self.shape[1] + c) * self.shape[2] + i) * self.shape[3] + j
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, i: usize, j: usize) -> f32 {
        self.data[self.offset(n, c, i, j)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, i: usize, j: usize, value: f32) {
        let idx = self.offset(n, c, i, j);
        self.data[idx] = value;
    }

    /// One (channel, row) line of the tensor; rows are contiguous.
    #[inline]
    pub fn row(&self, n: usize, c: usize, i: usize) -> &[f32] {
        let start = self.offset(n, c, i, 0);
        &self.data[start..start + self.shape[3]]
    }

    /// View of one full (n, c) plane, `h * w` contiguous values.
    #[inline]
    pub fn plane(&self, n: usize, c: usize) -> &[f32] {
        let hw = self.shape[2] * self.shape[3];
        let start = (n * self.shape[1] + c) * hw;
        &self.data[start..start + hw]
    }

    /// True when every value is finite (no NaN or infinity).
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Error unless every value is finite; `what` names the offending tensor.
    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::Numeric(format!("{what} contains non-finite values")))
        }
    }

    /// Elementwise `self += other`. Shapes must match.
    pub fn add_in_place(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "shape mismatch in add_in_place");
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += *b;
        }
    }

    /// Largest absolute difference against another tensor of the same shape.
    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.shape, other.shape, "shape mismatch in max_abs_diff");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}
