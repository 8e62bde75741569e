//! Row-major matrices and strided views over them.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

/// Dense row-major matrix. Vectors are stored as `1 x n`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mat<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

/// Borrowed strided view; strides are in elements.
#[derive(Clone, Copy, Debug)]
pub struct View<'a, T> {
    data: &'a [T],
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

/// Mutable strided view.
#[derive(Debug)]
pub struct ViewMut<'a, T> {
    data: &'a mut [T],
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

fn span(rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs + 1
    }
}

impl<T: Scalar> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Self { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| if r == c { T::one() } else { T::zero() })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut T {
        &mut self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        let c = self.cols;
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn view(&self) -> View<'_, T> {
        View {
            data: &self.data,
            rows: self.rows,
            cols: self.cols,
            rs: self.cols,
            cs: 1,
        }
    }

    pub fn view_mut(&mut self) -> ViewMut<'_, T> {
        ViewMut {
            rows: self.rows,
            cols: self.cols,
            rs: self.cols,
            cs: 1,
            data: &mut self.data,
        }
    }

    /// Transposed view.
    pub fn t(&self) -> View<'_, T> {
        self.view().t()
    }

    pub fn cast<U: Scalar>(&self) -> Mat<U> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: crate::scalar::cast_slice(&self.data),
        }
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn add_assign(&mut self, other: &Mat<T>) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: T) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    /// Adds a `1 x cols` row vector to every row.
    pub fn add_row_broadcast(&mut self, bias: &Mat<T>) {
        assert_eq!(bias.len(), self.cols);
        let cols = self.cols;
        for row in self.data.chunks_exact_mut(cols) {
            for (x, &b) in row.iter_mut().zip(&bias.data) {
                *x += b;
            }
        }
    }

    /// Accumulates the column sums into `out` (`1 x cols`).
    pub fn col_sums_into(&self, out: &mut Mat<T>) {
        assert_eq!(out.len(), self.cols);
        for row in self.data.chunks_exact(self.cols) {
            for (o, &x) in out.data.iter_mut().zip(row) {
                *o += x;
            }
        }
    }

    /// Copies `count` columns starting at `start`.
    pub fn col_block(&self, start: usize, count: usize) -> Mat<T> {
        assert!(start + count <= self.cols);
        Mat::from_fn(self.rows, count, |r, c| self.at(r, start + c))
    }

    /// Copies `count` rows starting at `start`.
    pub fn row_block(&self, start: usize, count: usize) -> Mat<T> {
        assert!(start + count <= self.rows);
        Mat::from_vec(
            count,
            self.cols,
            self.data[start * self.cols..(start + count) * self.cols].to_vec(),
        )
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }
}

impl<'a, T: Scalar> View<'a, T> {
    pub fn new(data: &'a [T], rows: usize, cols: usize, rs: usize, cs: usize) -> Self {
        assert!(span(rows, cols, rs, cs) <= data.len(), "view out of bounds");
        Self {
            data,
            rows,
            cols,
            rs,
            cs,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    /// Sub-view of `count` columns starting at `start`.
    pub fn cols_range(self, start: usize, count: usize) -> Self {
        assert!(start + count <= self.cols);
        let offset = if self.rows == 0 || count == 0 {
            0
        } else {
            start * self.cs
        };
        Self::new(&self.data[offset..], self.rows, count, self.rs, self.cs)
    }

    /// Sub-view of `count` rows starting at `start`.
    pub fn rows_range(self, start: usize, count: usize) -> Self {
        assert!(start + count <= self.rows);
        let offset = if self.cols == 0 || count == 0 {
            0
        } else {
            start * self.rs
        };
        Self::new(&self.data[offset..], count, self.cols, self.rs, self.cs)
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> T {
        self.data[r * self.rs + c * self.cs]
    }

    pub fn to_mat(&self) -> Mat<T> {
        Mat::from_fn(self.rows, self.cols, |r, c| self.at(r, c))
    }
}

impl<'a, T: Scalar> ViewMut<'a, T> {
    pub fn new(data: &'a mut [T], rows: usize, cols: usize, rs: usize, cs: usize) -> Self {
        assert!(span(rows, cols, rs, cs) <= data.len(), "view out of bounds");
        Self {
            data,
            rows,
            cols,
            rs,
            cs,
        }
    }

    /// Sub-view of `count` columns starting at `start`.
    pub fn cols_range(self, start: usize, count: usize) -> Self {
        assert!(start + count <= self.cols);
        let offset = if self.rows == 0 || count == 0 {
            0
        } else {
            start * self.cs
        };
        let (rows, rs, cs) = (self.rows, self.rs, self.cs);
        Self::new(&mut self.data[offset..], rows, count, rs, cs)
    }
}

/// `c <- alpha * a * b + beta * c`.
pub fn gemm<T: Scalar>(alpha: T, a: View<'_, T>, b: View<'_, T>, beta: T, c: ViewMut<'_, T>) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension mismatch");
    assert_eq!((a.rows, b.cols), (c.rows, c.cols), "gemm output shape mismatch");
    if c.rows == 0 || c.cols == 0 {
        return;
    }
    // SAFETY: the view constructors check that every strided index lies
    // inside the borrowed slices, and `c` is uniquely borrowed.
    unsafe {
        T::gemm_raw(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr(),
            c.rs as isize,
            c.cs as isize,
        );
    }
}

/// Returns `a * b`.
pub fn matmul<T: Scalar>(a: View<'_, T>, b: View<'_, T>) -> Mat<T> {
    let mut out = Mat::zeros(a.rows, b.cols);
    gemm(T::one(), a, b, T::zero(), out.view_mut());
    out
}

/// `out += a * b`.
pub fn matmul_acc<T: Scalar>(a: View<'_, T>, b: View<'_, T>, out: &mut Mat<T>) {
    gemm(T::one(), a, b, T::one(), out.view_mut());
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &Mat<f64>, b: &Mat<f64>) -> Mat<f64> {
        Mat::from_fn(a.rows, b.cols, |r, c| {
            (0..a.cols).map(|k| a.at(r, k) * b.at(k, c)).sum()
        })
    }

    #[test]
    fn gemm_matches_naive_product_with_transposes() {
        let a = Mat::from_fn(5, 3, |r, c| (r * 3 + c) as f64 * 0.5 - 2.0);
        let b = Mat::from_fn(3, 4, |r, c| (r as f64 - c as f64).sin());
        let direct = matmul(a.view(), b.view());
        for (x, y) in direct.data.iter().zip(&naive(&a, &b).data) {
            assert!((x - y).abs() < 1e-12);
        }
        let at = a.t().to_mat();
        let bt = b.t().to_mat();
        let via_t = matmul(at.t(), bt.t());
        for (x, y) in via_t.data.iter().zip(&naive(&a, &b).data) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn column_subviews_address_the_right_block() {
        let a = Mat::from_fn(2, 6, |r, c| (r * 10 + c) as f64);
        let sub = a.view().cols_range(2, 3).to_mat();
        assert_eq!(sub.data, vec![2.0, 3.0, 4.0, 12.0, 13.0, 14.0]);
        assert_eq!(a.col_block(2, 3), sub);
    }
}
