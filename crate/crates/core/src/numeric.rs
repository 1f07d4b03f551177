//! Dense f64 linear algebra for the editing pipeline, plus the central
//! finite-difference oracle used to verify every analytic gradient.
//!
//! Matrices are row-major. All public operations reject non-finite inputs or
//! outputs rather than letting NaN/Inf propagate silently.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Central finite-difference step. Balances truncation against round-off
/// for f64: error of the central stencil is O(h^2) + O(eps/h).
pub const FD_STEP: f64 = 1e-4;

/// Dense row-major matrix of f64.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
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
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    /// I.i.d. N(0, std^2) entries.
    pub fn random_normal(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Self {
        let data = (0..rows * cols)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Matrix { rows, cols, data }
    }

    /// I.i.d. uniform entries in [lo, hi).
    pub fn random_uniform(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Flat index of the first non-finite entry, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.set(c, r, self.get(r, c));
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// self += scale * other.
    pub fn scaled_add_assign(&mut self, other: &Matrix, scale: f64) -> Result<()> {
        self.check_same_shape(other, "scaled_add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other, "sub")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Matrix { rows: self.rows, cols: self.cols, data })
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other, "hadamard")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a * b).collect();
        Ok(Matrix { rows: self.rows, cols: self.cols, data })
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::ShapeMismatch {
                context: "matmul",
                left_rows: self.rows,
                left_cols: self.cols,
                right_rows: other.rows,
                right_cols: other.cols,
            });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(r, k);
                if a == 0.0 {
                    continue;
                }
                let lhs_row = r * other.cols;
                let rhs_row = k * other.cols;
                for c in 0..other.cols {
                    out.data[lhs_row + c] += a * other.data[rhs_row + c];
                }
            }
        }
        Ok(out)
    }

    fn check_same_shape(&self, other: &Matrix, context: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                context,
                left_rows: self.rows,
                left_cols: self.cols,
                right_rows: other.rows,
                right_cols: other.cols,
            });
        }
        Ok(())
    }
}

/// Dense f64 vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vector {
    data: Vec<f64>,
}

impl Vector {
    pub fn zeros(dim: usize) -> Self {
        Vector { data: vec![0.0; dim] }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Vector { data }
    }

    pub fn random_normal(dim: usize, std: f64, rng: &mut impl Rng) -> Self {
        let data = (0..dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Vector { data }
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, i: usize) -> f64 {
        self.data[i]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &Vector) -> Result<f64> {
        if self.dim() != other.dim() {
            return Err(Error::DimMismatch {
                context: "dot",
                expected: self.dim(),
                got: other.dim(),
            });
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    /// Unit-norm copy; rejects the zero vector.
    pub fn normalized(&self) -> Result<Vector> {
        let n = self.l2_norm();
        if n == 0.0 {
            return Err(Error::InvalidArgument("cannot normalize a zero vector".into()));
        }
        Ok(Vector { data: self.data.iter().map(|v| v / n).collect() })
    }

    pub fn scaled_add_assign(&mut self, other: &Vector, scale: f64) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn sub(&self, other: &Vector) -> Vector {
        Vector {
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Vector {
        Vector { data: self.data.iter().map(|v| v * s).collect() }
    }

    /// Cosine similarity; rejected when either vector is zero.
    pub fn cosine(&self, other: &Vector) -> Result<f64> {
        let na = self.l2_norm();
        let nb = other.l2_norm();
        if na == 0.0 || nb == 0.0 {
            return Err(Error::InvalidArgument("cosine of a zero vector".into()));
        }
        Ok(self.dot(other)? / (na * nb))
    }
}

/// Row-vector times matrix: v (1 x m.rows) * m -> (1 x m.cols).
///
/// This is the workhorse behind the activation score and every forward pass.
pub fn vec_mat(v: &Vector, m: &Matrix) -> Result<Vector> {
    if v.dim() != m.rows() {
        return Err(Error::DimMismatch {
            context: "vec_mat",
            expected: m.rows(),
            got: v.dim(),
        });
    }
    let mut out = vec![0.0; m.cols()];
    for r in 0..m.rows() {
        let a = v.get(r);
        if a == 0.0 {
            continue;
        }
        let row = m.row(r);
        for (o, x) in out.iter_mut().zip(row) {
            *o += a * x;
        }
    }
    Ok(Vector::from_vec(out))
}

/// Backward rule for `c = a.matmul(b)`: given dL/dc, returns (dL/da, dL/db).
pub fn matmul_grads(d_out: &Matrix, a: &Matrix, b: &Matrix) -> Result<(Matrix, Matrix)> {
    let d_a = d_out.matmul(&b.transpose())?;
    let d_b = a.transpose().matmul(d_out)?;
    Ok((d_a, d_b))
}

/// Rank-one accumulation: m += scale * col * row^T, with col as a column
/// vector (m.rows) and row as a row vector (m.cols).
pub fn outer_add_assign(m: &mut Matrix, col: &Vector, row: &Vector, scale: f64) -> Result<()> {
    if col.dim() != m.rows() || row.dim() != m.cols() {
        return Err(Error::DimMismatch {
            context: "outer_add_assign",
            expected: m.rows() * m.cols(),
            got: col.dim() * row.dim(),
        });
    }
    let cols = m.cols();
    for r in 0..m.rows() {
        let a = scale * col.get(r);
        if a == 0.0 {
            continue;
        }
        let base = r * cols;
        for c in 0..cols {
            m.data_mut()[base + c] += a * row.get(c);
        }
    }
    Ok(())
}

/// Compares an analytic gradient against central finite differences of
/// `loss_fn`, entry by entry, and returns the max absolute error.
///
/// Rejects (naming the flat index) when the loss is non-finite at a
/// perturbed point.
pub fn grad_check(
    loss_fn: impl Fn(&Matrix) -> f64,
    params: &Matrix,
    analytic: &Matrix,
) -> Result<f64> {
    if params.shape() != analytic.shape() {
        return Err(Error::ShapeMismatch {
            context: "grad_check",
            left_rows: params.rows(),
            left_cols: params.cols(),
            right_rows: analytic.rows(),
            right_cols: analytic.cols(),
        });
    }
    let mut work = params.clone();
    let mut max_err: f64 = 0.0;
    for idx in 0..params.len() {
        let orig = work.data()[idx];

        work.data_mut()[idx] = orig + FD_STEP;
        let plus = loss_fn(&work);
        if !plus.is_finite() {
            return Err(Error::NonFinite { context: "grad_check loss (+h)", index: idx });
        }

        work.data_mut()[idx] = orig - FD_STEP;
        let minus = loss_fn(&work);
        if !minus.is_finite() {
            return Err(Error::NonFinite { context: "grad_check loss (-h)", index: idx });
        }

        work.data_mut()[idx] = orig;
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        let err = (numeric - analytic.data()[idx]).abs();
        if err > max_err {
            max_err = err;
        }
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matmul_identity() {
        let i = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Matrix::from_vec(2, 2, vec![2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(i.matmul(&b).unwrap(), b);
    }

    #[test]
    fn matmul_hand_arithmetic() {
        let a = Matrix::from_vec(1, 2, vec![1.0, 2.0]).unwrap();
        let b = Matrix::from_vec(2, 1, vec![3.0, 4.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), (1, 1));
        assert_eq!(c.get(0, 0), 11.0);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 3);
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3"), "message should carry shapes: {msg}");
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        // loss(A) = sum(W ⊙ (A B)) for fixed random W, B; dL/dA = W B^T.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Matrix::random_uniform(5, 4, -1.0, 1.0, &mut rng);
        let b = Matrix::random_uniform(4, 3, -1.0, 1.0, &mut rng);
        let w = Matrix::random_uniform(5, 3, -1.0, 1.0, &mut rng);

        let loss = |m: &Matrix| {
            let prod = m.matmul(&b).unwrap();
            prod.data().iter().zip(w.data()).map(|(p, q)| p * q).sum()
        };
        let analytic = w.matmul(&b.transpose()).unwrap();
        let err = grad_check(loss, &a, &analytic).unwrap();
        assert!(err < 1e-5, "matmul grad error {err}");
    }

    #[test]
    fn l2_norm_pythagorean() {
        let v = Vector::from_vec(vec![3.0, 4.0]);
        assert_eq!(v.l2_norm(), 5.0);
    }

    #[test]
    fn l2_norm_zero_vector() {
        let v = Vector::zeros(7);
        assert_eq!(v.l2_norm(), 0.0);
    }

    #[test]
    fn l2_norm_squared_matches_sum_of_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let v = Vector::random_normal(16, 1.0, &mut rng);
        let n = v.l2_norm();
        let sum_sq: f64 = v.data().iter().map(|x| x * x).sum();
        let rel = ((n * n - sum_sq) / sum_sq).abs();
        assert!(rel < 1e-12, "rel err {rel}");
    }

    #[test]
    fn grad_check_quadratic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = Matrix::random_uniform(4, 5, -1.0, 1.0, &mut rng);
        let loss = |m: &Matrix| 0.5 * m.data().iter().map(|v| v * v).sum::<f64>();
        let err = grad_check(loss, &w, &w.clone()).unwrap();
        assert!(err < 1e-7, "quadratic grad error {err}");
    }

    #[test]
    fn grad_check_reports_non_finite_index() {
        let w = Matrix::from_vec(1, 2, vec![0.5, 0.5]).unwrap();
        let loss = |m: &Matrix| {
            if m.get(0, 1) > 0.5 {
                f64::NAN
            } else {
                m.get(0, 0)
            }
        };
        let err = grad_check(loss, &w, &Matrix::zeros(1, 2)).unwrap_err();
        match err {
            Error::NonFinite { index, .. } => assert_eq!(index, 1),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn vec_mat_matches_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = Matrix::random_uniform(6, 4, -1.0, 1.0, &mut rng);
        let v = Vector::random_normal(6, 1.0, &mut rng);
        let via_vec = vec_mat(&v, &m).unwrap();
        let row = Matrix::from_vec(1, 6, v.data().to_vec()).unwrap();
        let via_mat = row.matmul(&m).unwrap();
        for c in 0..4 {
            assert!((via_vec.get(c) - via_mat.get(0, c)).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn matmul_associative(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Matrix::random_uniform(3, 4, -1.0, 1.0, &mut rng);
            let b = Matrix::random_uniform(4, 5, -1.0, 1.0, &mut rng);
            let c = Matrix::random_uniform(5, 2, -1.0, 1.0, &mut rng);
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            let scale = left.frobenius_norm().max(1e-9);
            let diff = left.sub(&right).unwrap().frobenius_norm();
            prop_assert!(diff / scale < 1e-10);
        }

        #[test]
        fn matmul_stays_finite(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Matrix::random_uniform(4, 4, -1.0, 1.0, &mut rng);
            let b = Matrix::random_uniform(4, 4, -1.0, 1.0, &mut rng);
            prop_assert!(a.matmul(&b).unwrap().is_finite());
        }
    }
}
