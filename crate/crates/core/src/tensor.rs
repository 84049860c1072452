//! Dense 2-D tensors of `f64` in row-major order.
//!
//! This is the only array type in the crate. Everything — parameters,
//! activations, gradients, attention score matrices — is a [`Tensor2`].
//! Vectors are 1×n or n×1 tensors; scalars are 1×1. Keeping a single
//! concrete layout makes the autodiff tape simple and the arithmetic
//! bit-for-bit reproducible: every op walks the data in the same order
//! on every run.

use crate::error::{Error, Result};

/// A dense rows×cols matrix of `f64`, row-major.
///
/// Invariant: `data.len() == rows * cols`, and every entry is finite
/// whenever the tensor came out of a public constructor or op in this
/// crate fed with finite inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor2 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor2 {
    /// All-zeros tensor.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor2 { rows, cols, data: vec![0.0; rows * cols] }
    }

    /// Build from a row-major buffer. Fails if the length does not match.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "buffer of length {} cannot fill a {}x{} tensor",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Tensor2 { rows, cols, data })
    }

    /// Build element-wise from a function of (row, col).
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Tensor2 { rows, cols, data }
    }

    /// Identity matrix of size n×n.
    pub fn identity(n: usize) -> Self {
        Tensor2::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    /// A 1×1 tensor holding one value.
    pub fn scalar(v: f64) -> Self {
        Tensor2 { rows: 1, cols: 1, data: vec![v] }
    }

    /// A 1×n row vector.
    pub fn row(values: &[f64]) -> Self {
        Tensor2 { rows: 1, cols: values.len(), data: values.to_vec() }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// (rows, cols).
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    /// The single value of a 1×1 tensor.
    pub fn item(&self) -> Result<f64> {
        if self.shape() != (1, 1) {
            return Err(Error::Shape(format!(
                "item() requires a 1x1 tensor, got {}x{}",
                self.rows, self.cols
            )));
        }
        Ok(self.data[0])
    }

    /// Row-major backing slice.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// One row as a slice.
    pub fn row_slice(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Matrix product `self · rhs`.
    ///
    /// Loop order is (i, k, j) so the inner loop runs over contiguous
    /// rows of both the output and `rhs`; this is the hot path of the
    /// whole crate and vectorizes well.
    pub fn matmul(&self, rhs: &Tensor2) -> Result<Tensor2> {
        if self.cols != rhs.rows {
            return Err(Error::Shape(format!(
                "matmul: lhs is {}x{} but rhs is {}x{} (inner dims {} != {})",
                self.rows, self.cols, rhs.rows, rhs.cols, self.cols, rhs.rows
            )));
        }
        let (m, k, n) = (self.rows, self.cols, rhs.cols);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                let b_row = &rhs.data[p * n..(p + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor2 { rows: m, cols: n, data: out })
    }

    /// Transposed copy.
    pub fn transpose(&self) -> Tensor2 {
        let mut out = vec![0.0; self.data.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        Tensor2 { rows: self.cols, cols: self.rows, data: out }
    }

    /// Element-wise map into a new tensor.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor2 {
        Tensor2 {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Element-wise combination of two same-shaped tensors.
    pub fn zip_map(&self, other: &Tensor2, f: impl Fn(f64, f64) -> f64) -> Result<Tensor2> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "zip_map: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor2 { rows: self.rows, cols: self.cols, data })
    }

    /// `self += other`, shapes must match.
    pub fn add_assign(&mut self, other: &Tensor2) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "add_assign: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// `self += a · bᵀ` without materializing the transpose: every
    /// output element is a dot product of two contiguous rows.
    pub fn add_matmul_nt_assign(&mut self, a: &Tensor2, b: &Tensor2) -> Result<()> {
        if a.cols != b.cols || self.rows != a.rows || self.cols != b.rows {
            return Err(Error::Shape(format!(
                "add_matmul_nt_assign: out {}x{} += ({}x{}) · ({}x{})ᵀ",
                self.rows, self.cols, a.rows, a.cols, b.rows, b.cols
            )));
        }
        for i in 0..self.rows {
            let a_row = &a.data[i * a.cols..(i + 1) * a.cols];
            let o_row = &mut self.data[i * self.cols..(i + 1) * self.cols];
            for (p, o) in o_row.iter_mut().enumerate() {
                let b_row = &b.data[p * b.cols..(p + 1) * b.cols];
                let mut acc = 0.0;
                for (&x, &y) in a_row.iter().zip(b_row) {
                    acc += x * y;
                }
                *o += acc;
            }
        }
        Ok(())
    }

    /// `self += aᵀ · g` without materializing the transpose: row `i` of
    /// `g` is scaled into row `p` of the output for every `a[i][p]`.
    pub fn add_matmul_tn_assign(&mut self, a: &Tensor2, g: &Tensor2) -> Result<()> {
        if a.rows != g.rows || self.rows != a.cols || self.cols != g.cols {
            return Err(Error::Shape(format!(
                "add_matmul_tn_assign: out {}x{} += ({}x{})ᵀ · ({}x{})",
                self.rows, self.cols, a.rows, a.cols, g.rows, g.cols
            )));
        }
        for i in 0..a.rows {
            let a_row = &a.data[i * a.cols..(i + 1) * a.cols];
            let g_row = &g.data[i * g.cols..(i + 1) * g.cols];
            for (p, &w) in a_row.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                let o_row = &mut self.data[p * self.cols..(p + 1) * self.cols];
                for (o, &gv) in o_row.iter_mut().zip(g_row) {
                    *o += w * gv;
                }
            }
        }
        Ok(())
    }

    /// `self += scale * other`, shapes must match.
    pub fn add_scaled_assign(&mut self, other: &Tensor2, scale: f64) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "add_scaled_assign: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }

    /// Same data, new shape; element count must be preserved.
    pub fn reshaped(&self, rows: usize, cols: usize) -> Result<Tensor2> {
        if rows * cols != self.data.len() {
            return Err(Error::Shape(format!(
                "reshape: {}x{} has {} elements, cannot become {}x{}",
                self.rows,
                self.cols,
                self.data.len(),
                rows,
                cols
            )));
        }
        Ok(Tensor2 { rows, cols, data: self.data.clone() })
    }

    /// True iff every entry is finite (no NaN, no ±inf).
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute difference against another tensor of the same shape.
    pub fn max_abs_diff(&self, other: &Tensor2) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "max_abs_diff: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}
