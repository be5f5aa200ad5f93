use crate::error::{Error, Result};

/// Dense 2-D matrix of `f64`, row-major.
///
/// The universal numeric carrier for features, logits and parameters.
/// Constructors reject non-finite elements; arithmetic on finite inputs
/// stays finite for the magnitudes this crate works with.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::InvalidArgument(format!(
                "matrix data length {} does not match {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("Matrix::from_vec"));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::InvalidArgument("ragged rows".into()));
        }
        Matrix::from_vec(r, c, rows.concat())
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        Matrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn same_shape(&self, other: &Matrix) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn check_finite(&self, context: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(context))
        }
    }

    fn shape_err(&self, other: &Matrix, op: &'static str) -> Error {
        Error::ShapeMismatch {
            op,
            left_rows: self.rows,
            left_cols: self.cols,
            right_rows: other.rows,
            right_cols: other.cols,
        }
    }

    /// `self (m x k) * other (k x n) -> m x n`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(self.shape_err(other, "matmul"));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let src = &other.data[k * other.cols..(k + 1) * other.cols];
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += a * s;
                }
            }
        }
        Ok(out)
    }

    /// `self (m x k) * other^T (n x k) -> m x n`.
    pub fn matmul_transpose_b(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(self.shape_err(other, "matmul_transpose_b"));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                let b = other.row(j);
                out.data[i * other.rows + j] = dot(a, b);
            }
        }
        Ok(out)
    }

    /// `self^T (k x m) * other (k x n) -> m x n`.
    pub fn transpose_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(self.shape_err(other, "transpose_matmul"));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            for i in 0..self.cols {
                let a = self.data[k * self.cols + i];
                if a == 0.0 {
                    continue;
                }
                let src = &other.data[k * other.cols..(k + 1) * other.cols];
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += a * s;
                }
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        if !self.same_shape(other) {
            return Err(self.shape_err(other, "add"));
        }
        let mut out = self.clone();
        for (d, s) in out.data.iter_mut().zip(&other.data) {
            *d += s;
        }
        Ok(out)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        if !self.same_shape(other) {
            return Err(self.shape_err(other, "sub"));
        }
        let mut out = self.clone();
        for (d, s) in out.data.iter_mut().zip(&other.data) {
            *d -= s;
        }
        Ok(out)
    }

    /// `self += scale * other`, in place.
    pub fn add_scaled(&mut self, other: &Matrix, scale: f64) -> Result<()> {
        if !self.same_shape(other) {
            return Err(self.shape_err(other, "add_scaled"));
        }
        for (d, s) in self.data.iter_mut().zip(&other.data) {
            *d += scale * s;
        }
        Ok(())
    }

    pub fn scale(&self, factor: f64) -> Matrix {
        let mut out = self.clone();
        for v in &mut out.data {
            *v *= factor;
        }
        out
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        if !self.same_shape(other) {
            return Err(self.shape_err(other, "hadamard"));
        }
        let mut out = self.clone();
        for (d, s) in out.data.iter_mut().zip(&other.data) {
            *d *= s;
        }
        Ok(out)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        let mut out = self.clone();
        for v in &mut out.data {
            *v = f(*v);
        }
        out
    }

    /// Sum over rows -> 1 x cols.
    pub fn col_sum(&self) -> Matrix {
        let mut out = Matrix::zeros(1, self.cols);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j] += self.get(i, j);
            }
        }
        out
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Horizontal concatenation: [self | other].
    pub fn hcat(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(self.shape_err(other, "hcat"));
        }
        let mut out = Matrix::zeros(self.rows, self.cols + other.cols);
        for i in 0..self.rows {
            out.row_mut(i)[..self.cols].copy_from_slice(self.row(i));
            out.row_mut(i)[self.cols..].copy_from_slice(other.row(i));
        }
        Ok(out)
    }

    /// Vertical concatenation.
    pub fn vcat(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(self.shape_err(other, "vcat"));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Matrix {
            rows: self.rows + other.rows,
            cols: self.cols,
            data,
        })
    }

    /// New matrix made of the selected rows.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(indices.len(), self.cols);
        for (k, &i) in indices.iter().enumerate() {
            out.row_mut(k).copy_from_slice(self.row(i));
        }
        out
    }

    /// Index of the largest element in each row; ties resolve to the lowest index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.rows)
            .map(|i| {
                let row = self.row(i);
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_matmul_is_identity() {
        let m = Matrix::from_vec(3, 4, (0..12).map(|v| v as f64).collect()).unwrap();
        let i3 = Matrix::identity(3);
        assert_eq!(i3.matmul(&m).unwrap(), m);
    }

    #[test]
    fn hand_arithmetic() {
        let a = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Matrix::from_vec(2, 1, vec![1.0, 1.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.as_slice(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        // Independent naive reference.
        fn naive(a: &Matrix, b: &Matrix) -> Matrix {
            let mut out = Matrix::zeros(a.rows(), b.cols());
            for i in 0..a.rows() {
                for j in 0..b.cols() {
                    let mut s = 0.0;
                    for k in 0..a.cols() {
                        s += a.get(i, k) * b.get(k, j);
                    }
                    out.set(i, j, s);
                }
            }
            out
        }
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let a = Matrix::from_fn(5, 7, |_, _| rng.gen_range(-2.0..2.0));
        let b = Matrix::from_fn(7, 3, |_, _| rng.gen_range(-2.0..2.0));
        let got = a.matmul(&b).unwrap();
        let want = naive(&a, &b);
        for (x, y) in got.as_slice().iter().zip(want.as_slice()) {
            assert!((x - y).abs() < 1e-12);
        }
        // transpose-product variants agree with the plain route
        let bt = b.transpose();
        let got2 = a.matmul_transpose_b(&bt).unwrap();
        assert_eq!(got2, got);
        let at = a.transpose();
        let got3 = at.transpose_matmul(&b).unwrap();
        assert_eq!(got3, got);
    }

    #[test]
    fn dimension_mismatch_names_both_shapes() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(4, 2);
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3") && msg.contains("4x2"), "{msg}");
    }

    #[test]
    fn rejects_non_finite() {
        assert!(Matrix::from_vec(1, 2, vec![1.0, f64::NAN]).is_err());
    }
}
