//! Dense row-major matrix kernel.
//!
//! This is the vocabulary the rest of the engine is written in:
//!
//! - [`Matrix`] — 2-D array of reals; rows index tokens (or samples), columns
//!   index features. Carries activations, error signals, attention weights,
//!   and weight matrices alike.
//! - [`CausalMask`] — lower-triangular selector used by masked attention.
//! - The vectorized operators the layer formulas need: matrix product,
//!   Hadamard product, Frobenius dot `A·B = Tr(AᵗB)`, the row-wise feature
//!   dot `A ⊖ B`, the two broadcast patterns (row-wise for feature vectors,
//!   column-wise for per-token vectors), column sums, and a numerically
//!   stabilized row softmax with optional causal support restriction.
//!
//! Everything is 0-indexed. All reductions accumulate left-to-right in index
//! order so results are bit-reproducible across runs.

use crate::scalar::Scalar;

// ---------------------------------------------------------------------------
// Matrix
// ---------------------------------------------------------------------------

/// Dense 2-D array in row-major order.
///
/// ```
/// use gradgpt_core::tensor::Matrix;
/// let a = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
/// let b = Matrix::from_rows(&[&[1.0], &[1.0]]);
/// assert_eq!(a.matmul(&b).row(0), &[3.0]);
/// assert_eq!(a.matmul(&b).row(1), &[7.0]);
/// ```
#[derive(Clone, PartialEq)]
pub struct Matrix<T = f64> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    /// All-zeros matrix. Panics if either dimension is 0.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows >= 1 && cols >= 1, "matrix must be at least 1x1, got {rows}x{cols}");
        Matrix { rows, cols, data: vec![T::ZERO; rows * cols] }
    }

    /// Build from an explicit row-major buffer; `data.len()` must equal `rows × cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert!(rows >= 1 && cols >= 1, "matrix must be at least 1x1, got {rows}x{cols}");
        assert_eq!(
            data.len(),
            rows * cols,
            "buffer length {} does not match {rows}x{cols}",
            data.len()
        );
        Matrix { rows, cols, data }
    }

    /// Build from row slices (test-friendly constructor).
    pub fn from_rows(rows: &[&[T]]) -> Self {
        assert!(!rows.is_empty(), "matrix must have at least one row");
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows: expected {cols} columns, got {}", r.len());
            data.extend_from_slice(r);
        }
        Matrix { rows: rows.len(), cols, data }
    }

    /// A 1×n matrix wrapping one row (decode paths work on single token rows).
    pub fn row_matrix(row: Vec<T>) -> Self {
        let cols = row.len();
        Matrix::from_vec(1, cols, row)
    }

    /// n×n identity.
    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::ONE;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// The raw row-major buffer.
    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// Matrix product with deterministic left-to-right accumulation over the
    /// contracted index.
    pub fn matmul(&self, other: &Matrix<T>) -> Matrix<T> {
        assert_eq!(
            self.cols, other.rows,
            "matmul shape mismatch: lhs {}x{}, rhs {}x{}",
            self.rows, self.cols, other.rows, other.cols
        );
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &aik) in a_row.iter().enumerate() {
                let b_row = other.row(k);
                for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                    *o += aik * bkj;
                }
            }
        }
        out
    }

    /// Standard transpose.
    pub fn transpose(&self) -> Matrix<T> {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[(j, i)] = self[(i, j)];
            }
        }
        out
    }

    /// Elementwise (Hadamard) product `A ∘ B`.
    pub fn hadamard(&self, other: &Matrix<T>) -> Matrix<T> {
        self.assert_same_shape(other, "hadamard");
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a * b).collect();
        Matrix { rows: self.rows, cols: self.cols, data }
    }

    /// Frobenius dot `A·B = Σᵢⱼ AᵢⱼBᵢⱼ = Tr(AᵗB)`.
    pub fn frobenius_dot(&self, other: &Matrix<T>) -> T {
        self.assert_same_shape(other, "frobenius_dot");
        let mut acc = T::ZERO;
        for (&a, &b) in self.data.iter().zip(&other.data) {
            acc += a * b;
        }
        acc
    }

    /// Feature dot `A ⊖ B`: one scalar per row, the dot product of the
    /// matching rows of `A` and `B`.
    pub fn feature_dot(&self, other: &Matrix<T>) -> Vec<T> {
        self.assert_same_shape(other, "feature_dot");
        (0..self.rows).map(|i| dot(self.row(i), other.row(i))).collect()
    }

    /// Column sums — the `Σ_tokens` reduction (vertical, cutting across rows).
    pub fn sum_over_tokens(&self) -> Vec<T> {
        let mut out = vec![T::ZERO; self.cols];
        for i in 0..self.rows {
            for (o, &x) in out.iter_mut().zip(self.row(i)) {
                *o += x;
            }
        }
        out
    }

    /// Elementwise sum.
    pub fn add(&self, other: &Matrix<T>) -> Matrix<T> {
        self.assert_same_shape(other, "add");
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a + b).collect();
        Matrix { rows: self.rows, cols: self.cols, data }
    }

    /// Elementwise difference.
    pub fn sub(&self, other: &Matrix<T>) -> Matrix<T> {
        self.assert_same_shape(other, "sub");
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a - b).collect();
        Matrix { rows: self.rows, cols: self.cols, data }
    }

    /// Elementwise scaling by a constant.
    pub fn scale(&self, c: T) -> Matrix<T> {
        let data = self.data.iter().map(|&a| a * c).collect();
        Matrix { rows: self.rows, cols: self.cols, data }
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Matrix<T>) {
        self.assert_same_shape(other, "add_assign");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Column-wise concatenation (all parts must share the row count).
    pub fn concat_cols(parts: &[&Matrix<T>]) -> Matrix<T> {
        assert!(!parts.is_empty(), "concat_cols needs at least one part");
        let rows = parts[0].rows;
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let mut out = Matrix::zeros(rows, cols);
        for i in 0..rows {
            let out_row = out.row_mut(i);
            let mut offset = 0;
            for p in parts {
                assert_eq!(p.rows, rows, "concat_cols: row count mismatch {} vs {rows}", p.rows);
                out_row[offset..offset + p.cols].copy_from_slice(p.row(i));
                offset += p.cols;
            }
        }
        out
    }

    /// Copy out the column block `[start, start+width)`.
    pub fn slice_cols(&self, start: usize, width: usize) -> Matrix<T> {
        assert!(
            start + width <= self.cols,
            "slice_cols [{start}, {}) out of bounds for {} columns",
            start + width,
            self.cols
        );
        let mut out = Matrix::zeros(self.rows, width);
        for i in 0..self.rows {
            out.row_mut(i).copy_from_slice(&self.row(i)[start..start + width]);
        }
        out
    }

    /// Largest absolute difference against another matrix of the same shape.
    pub fn max_abs_diff(&self, other: &Matrix<T>) -> f64 {
        self.assert_same_shape(other, "max_abs_diff");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs().to_f64())
            .fold(0.0, f64::max)
    }

    fn assert_same_shape(&self, other: &Matrix<T>, op: &str) {
        assert!(
            self.rows == other.rows && self.cols == other.cols,
            "{op} shape mismatch: lhs {}x{}, rhs {}x{}",
            self.rows,
            self.cols,
            other.rows,
            other.cols
        );
    }
}

impl<T: Scalar> std::ops::Index<(usize, usize)> for Matrix<T> {
    type Output = T;
    fn index(&self, (i, j): (usize, usize)) -> &T {
        assert!(i < self.rows && j < self.cols, "index ({i},{j}) out of bounds for {}x{}", self.rows, self.cols);
        &self.data[i * self.cols + j]
    }
}

impl<T: Scalar> std::ops::IndexMut<(usize, usize)> for Matrix<T> {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        assert!(i < self.rows && j < self.cols, "index ({i},{j}) out of bounds for {}x{}", self.rows, self.cols);
        &mut self.data[i * self.cols + j]
    }
}

impl<T: Scalar> std::fmt::Debug for Matrix<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            writeln!(f, "  {:?}", self.row(i))?;
        }
        write!(f, "]")
    }
}

/// Dot product of two equal-length slices (deterministic left-to-right sum).
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    assert_eq!(a.len(), b.len(), "dot length mismatch: {} vs {}", a.len(), b.len());
    let mut acc = T::ZERO;
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

// ---------------------------------------------------------------------------
// Broadcasts
// ---------------------------------------------------------------------------

/// Row-wise broadcast of a feature-space vector: every row of the result
/// equals `v` (the pattern used for bias vectors `b̃`).
pub fn broadcast_row<T: Scalar>(v: &[T], n: usize) -> Matrix<T> {
    assert!(!v.is_empty(), "cannot broadcast an empty vector");
    let mut out = Matrix::zeros(n, v.len());
    for i in 0..n {
        out.row_mut(i).copy_from_slice(v);
    }
    out
}

/// Column-wise broadcast of a token-space vector: every column of the result
/// equals `v` (the pattern used for per-token statistics `μ̃`, `σ̃` and for
/// per-row attention sums).
pub fn broadcast_col<T: Scalar>(v: &[T], f: usize) -> Matrix<T> {
    assert!(!v.is_empty(), "cannot broadcast an empty vector");
    let mut out = Matrix::zeros(v.len(), f);
    for (i, &x) in v.iter().enumerate() {
        for o in out.row_mut(i) {
            *o = x;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Causal mask and softmax
// ---------------------------------------------------------------------------

/// Lower-triangular binary selector: position `i` may attend to `j` iff `j ≤ i`.
#[derive(Clone, Copy, Debug)]
pub struct CausalMask {
    size: usize,
}

impl CausalMask {
    pub fn new(size: usize) -> Self {
        assert!(size >= 1, "mask must cover at least one token");
        CausalMask { size }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Whether entry `(i, j)` is inside the causal support.
    pub fn admits(&self, i: usize, j: usize) -> bool {
        j <= i
    }
}

/// Row-wise softmax, optionally restricted to the causal support.
///
/// Masked entries (`j > i`) are excluded from the normalizing sum and come
/// out as exact `0.0` — the masking is a support restriction, equivalent to
/// setting those scores to −∞ before exponentiating. Each row is stabilized
/// by subtracting its maximum over admitted entries, which leaves the result
/// unchanged because the softmax is invariant under constant row shifts.
///
/// ```
/// use gradgpt_core::tensor::{softmax_rows, CausalMask, Matrix};
/// let scores = Matrix::from_rows(&[&[0.0_f64, 100.0], &[1.0, 1.0]]);
/// let rho = softmax_rows(&scores, Some(&CausalMask::new(2)));
/// assert_eq!(rho.row(0), &[1.0, 0.0]); // only j=0 admitted in row 0
/// assert_eq!(rho.row(1), &[0.5, 0.5]);
/// ```
pub fn softmax_rows<T: Scalar>(a: &Matrix<T>, mask: Option<&CausalMask>) -> Matrix<T> {
    if let Some(m) = mask {
        assert_eq!(
            a.rows(),
            a.cols(),
            "causal softmax needs a square matrix, got {}x{}",
            a.rows(),
            a.cols()
        );
        assert_eq!(m.size(), a.rows(), "mask size {} does not match matrix {}", m.size(), a.rows());
    }
    let mut out = Matrix::zeros(a.rows(), a.cols());
    for i in 0..a.rows() {
        let row = a.row(i);
        let admitted = match mask {
            Some(_) => i + 1, // causal support of row i is j ∈ [0, i]
            None => a.cols(),
        };
        let mut max = row[0];
        for &x in &row[1..admitted] {
            max = max.max(x);
        }
        let out_row = out.row_mut(i);
        let mut sum = T::ZERO;
        for j in 0..admitted {
            let e = (row[j] - max).exp();
            out_row[j] = e;
            sum += e;
        }
        for o in &mut out_row[..admitted] {
            *o /= sum;
        }
        // Entries beyond the admitted prefix stay exactly 0.
    }
    out
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------
