//! Dense row-major `f32` tensors and latent-grid coordinates.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use crate::error::{shape_err, Error, Result};

/// A dense row-major tensor of 32-bit reals.
///
/// Most kernels treat a tensor as a matrix: the last extent is the column
/// count and all leading extents are folded into rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(shape_err("Tensor::new", n, data.len()));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let n = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: vec![0.0; n],
        }
    }

    /// Matrix with `rows` rows of width `cols`; `rows` may be zero.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[&[f32]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(shape_err("Tensor::from_rows", cols, r.len()));
            }
            data.extend_from_slice(r);
        }
        Self::matrix(rows.len(), cols, data)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Width of the trailing axis.
    pub fn cols(&self) -> usize {
        self.dims.last().copied().unwrap_or(0)
    }

    /// Product of all leading extents.
    pub fn rows(&self) -> usize {
        match self.cols() {
            0 => self.dims[..self.dims.len().saturating_sub(1)]
                .iter()
                .product(),
            c => self.data.len() / c,
        }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols() + j]
    }

    /// Same data viewed as a `rows × cols` matrix.
    pub fn as_matrix(&self) -> Self {
        Self {
            dims: vec![self.rows(), self.cols()],
            data: self.data.clone(),
        }
    }

    pub fn reshape(self, dims: Vec<usize>) -> Result<Self> {
        Self::new(dims, self.data)
    }

    /// `self · other` for matrices `N×K` and `K×M`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (n, k) = (self.rows(), self.cols());
        if other.rows() != k {
            return Err(shape_err("matmul", k, other.rows()));
        }
        let m = other.cols();
        let mut out = vec![0.0f32; n * m];
        for i in 0..n {
            let a = self.row(i);
            let o = &mut out[i * m..(i + 1) * m];
            for (p, &av) in a.iter().enumerate() {
                let b = other.row(p);
                for (ov, &bv) in o.iter_mut().zip(b) {
                    *ov += av * bv;
                }
            }
        }
        Self::matrix(n, m, out)
    }

    /// `self · otherᵀ` for matrices `N×K` and `M×K`.
    pub fn matmul_t(&self, other: &Self) -> Result<Self> {
        let (n, k) = (self.rows(), self.cols());
        if other.cols() != k {
            return Err(shape_err("matmul_t", k, other.cols()));
        }
        let m = other.rows();
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            let a = self.row(i);
            for j in 0..m {
                out.push(dot(a, other.row(j)));
            }
        }
        Self::matrix(n, m, out)
    }

    pub fn transpose(&self) -> Self {
        let (n, m) = (self.rows(), self.cols());
        let mut out = vec![0.0f32; n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = self.data[i * m + j];
            }
        }
        Self {
            dims: vec![m, n],
            data: out,
        }
    }

    /// Rows at the given indices, in order.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Self> {
        let (n, c) = (self.rows(), self.cols());
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= n {
                return Err(Error::OutOfRange { index: i, len: n });
            }
            data.extend_from_slice(self.row(i));
        }
        Self::matrix(idx.len(), c, data)
    }

    pub fn slice_rows(&self, range: Range<usize>) -> Self {
        let c = self.cols();
        Self {
            dims: vec![range.len(), c],
            data: self.data[range.start * c..range.end * c].to_vec(),
        }
    }

    pub fn slice_cols(&self, range: Range<usize>) -> Result<Self> {
        if range.end > self.cols() {
            return Err(shape_err("slice_cols", self.cols(), range.end));
        }
        let n = self.rows();
        let mut data = Vec::with_capacity(n * range.len());
        for i in 0..n {
            data.extend_from_slice(&self.row(i)[range.clone()]);
        }
        Self::matrix(n, range.len(), data)
    }

    /// Vertical concatenation of matrices with a shared width.
    pub fn concat_rows(parts: &[&Self]) -> Result<Self> {
        let c = parts.first().map_or(0, |p| p.cols());
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols() != c && !p.is_empty() {
                return Err(shape_err("concat_rows", c, p.cols()));
            }
            rows += p.rows();
            data.extend_from_slice(&p.data);
        }
        Self::matrix(rows, c, data)
    }

    pub fn max_abs_diff(&self, other: &Self) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0f32, |m, (a, b)| m.max((a - b).abs()))
    }

    /// FNV-1a over the raw bit patterns; used for determinism checks.
    pub fn checksum(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for v in &self.data {
            for b in v.to_bits().to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}

/// Left-to-right dot product.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut s = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// Position of a latent pixel in the `(t, h, w)` grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct GridPosition {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl GridPosition {
    pub const ORIGIN: Self = Self { t: 0, h: 0, w: 0 };

    pub fn new(t: usize, h: usize, w: usize) -> Self {
        Self { t, h, w }
    }
}

/// Extents of the latent video grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GridDims {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl GridDims {
    pub fn new(t: usize, h: usize, w: usize) -> Self {
        Self { t, h, w }
    }

    /// Number of latent pixels, `T·H·W`.
    pub fn len(&self) -> usize {
        self.t * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn frame_len(&self) -> usize {
        self.h * self.w
    }

    pub fn position(&self, index: usize) -> GridPosition {
        let hw = self.frame_len();
        GridPosition {
            t: index / hw,
            h: (index % hw) / self.w,
            w: index % self.w,
        }
    }

    pub fn index(&self, p: GridPosition) -> usize {
        (p.t * self.h + p.h) * self.w + p.w
    }

    pub fn contains(&self, p: GridPosition) -> bool {
        p.t < self.t && p.h < self.h && p.w < self.w
    }

    pub fn positions(&self, indices: &[usize]) -> Vec<GridPosition> {
        indices.iter().map(|&i| self.position(i)).collect()
    }

    /// Positions of every pixel in flat order.
    pub fn all_positions(&self) -> Vec<GridPosition> {
        (0..self.len()).map(|i| self.position(i)).collect()
    }
}
