//! Dense tensors and the hand-written layer kernels the training path is built on.
//!
//! Everything here is 64-bit and single-threaded. Every reduction runs in a
//! fixed order (row-major, innermost index accumulated last), so identical
//! inputs always produce bit-identical outputs.

pub mod batchnorm;
pub mod conv;
pub mod linear;
pub mod loss;

pub use batchnorm::{
    batchnorm_backward, batchnorm_forward, batchnorm_inference, BatchNormCache, BatchNormParams, DEFAULT_EPS,
};
pub use conv::{conv2d_backward, conv2d_forward, conv2d_forward_cached, conv_output_size, Conv2dCache};
pub use linear::{fc_backward, fc_forward, fc_forward_cached, FcCache};
pub use loss::{argmax, softmax_cross_entropy};

use serde::{Deserialize, Serialize};

use crate::error::{Result, SyqError};

/// Four-dimensional row-major tensor with dims `(n, c, h, w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    dims: [usize; 4],
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn new(dims: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if data.len() != expected {
            return Err(SyqError::shape("Tensor4::new", expected, data.len()));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: [usize; 4]) -> Self {
        Self {
            dims,
            data: vec![0.0; dims.iter().product()],
        }
    }

    pub fn from_fn(dims: [usize; 4], mut f: impl FnMut([usize; 4]) -> f64) -> Self {
        let mut data = Vec::with_capacity(dims.iter().product());
        for n in 0..dims[0] {
            for c in 0..dims[1] {
                for h in 0..dims[2] {
                    for w in 0..dims[3] {
                        data.push(f([n, c, h, w]));
                    }
                }
            }
        }
        Self { dims, data }
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of elements per leading index.
    pub fn item_len(&self) -> usize {
        self.dims[1] * self.dims[2] * self.dims[3]
    }

    pub fn offset(&self, idx: [usize; 4]) -> usize {
        let [_, c, h, w] = self.dims;
        ((idx[0] * c + idx[1]) * h + idx[2]) * w + idx[3]
    }

    pub fn get(&self, idx: [usize; 4]) -> f64 {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: [usize; 4], value: f64) {
        let o = self.offset(idx);
        self.data[o] = value;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn item(&self, n: usize) -> &[f64] {
        let len = self.item_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(self, dims: [usize; 4]) -> Result<Self> {
        Self::new(dims, self.data)
    }

    /// Views the tensor as an `n × (c·h·w)` matrix without copying.
    pub fn into_matrix(self) -> Matrix {
        let rows = self.dims[0];
        let cols = self.item_len();
        Matrix {
            rows,
            cols,
            data: self.data,
        }
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(SyqError::shape("Matrix::new", (rows, cols), data.len()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(SyqError::shape("Matrix::from_rows", cols, r.len()));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Reinterprets the matrix as a `(rows, cols, 1, 1)` tensor.
    pub fn into_tensor(self) -> Tensor4 {
        Tensor4 {
            dims: [self.rows, self.cols, 1, 1],
            data: self.data,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Layer dimension bundle.
///
/// `k`, `i`, `n`, `f` describe a convolution (kernel size, input maps, output
/// maps, input spatial size); `l` and `h` describe a fully-connected layer
/// (input width, hidden nodes). Fields that do not apply to a layer are 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub k: usize,
    pub i: usize,
    pub n: usize,
    pub f: usize,
    pub l: usize,
    pub h: usize,
}

impl LayerShape {
    pub fn conv(k: usize, i: usize, n: usize, f: usize) -> Result<Self> {
        let shape = Self { k, i, n, f, l: 0, h: 0 };
        shape.validate_conv()?;
        Ok(shape)
    }

    pub fn fc(l: usize, h: usize) -> Result<Self> {
        let shape = Self {
            k: 0,
            i: 0,
            n: 0,
            f: 0,
            l,
            h,
        };
        shape.validate_fc()?;
        Ok(shape)
    }

    pub fn is_conv(&self) -> bool {
        self.k > 0
    }

    pub fn validate_conv(&self) -> Result<()> {
        for (name, v) in [("K", self.k), ("I", self.i), ("N", self.n), ("F", self.f)] {
            if v == 0 {
                return Err(SyqError::InvalidArgument(format!(
                    "convolution dimension {name} must be positive"
                )));
            }
        }
        Ok(())
    }

    pub fn validate_fc(&self) -> Result<()> {
        if self.l == 0 || self.h == 0 {
            return Err(SyqError::InvalidArgument(
                "fully-connected dimensions L and H must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Weight count: `K·K·I·N` for convolutions, `L·H` for fully-connected layers.
    pub fn z(&self) -> u64 {
        if self.is_conv() {
            (self.k * self.k) as u64 * self.i as u64 * self.n as u64
        } else {
            self.l as u64 * self.h as u64
        }
    }

    /// Operation count: `K·K·I·N·F·F` for convolutions, `L·H` for fully-connected layers.
    pub fn p(&self) -> u64 {
        if self.is_conv() {
            self.z() * (self.f * self.f) as u64
        } else {
            self.z()
        }
    }

    /// Convolution weight dims in `(N, I, K, K)` order.
    pub fn conv_weight_dims(&self) -> [usize; 4] {
        [self.n, self.i, self.k, self.k]
    }
}

/// `acc[j] += scale * x[j]`, in index order.
#[inline]
pub(crate) fn axpy(acc: &mut [f64], scale: f64, x: &[f64]) {
    debug_assert_eq!(acc.len(), x.len());
    for (a, &v) in acc.iter_mut().zip(x) {
        *a += scale * v;
    }
}

/// Dot product with eight interleaved partial sums combined in a fixed order.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [0.0f64; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let xa = &a[c * 8..c * 8 + 8];
        let xb = &b[c * 8..c * 8 + 8];
        for j in 0..8 {
            lanes[j] += xa[j] * xb[j];
        }
    }
    let mut tail = 0.0;
    for j in chunks * 8..a.len() {
        tail += a[j] * b[j];
    }
    ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3])) + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7])) + tail
}
