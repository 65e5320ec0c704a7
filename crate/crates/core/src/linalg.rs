//! Dense linear algebra shared by every analysis path: least squares,
//! coefficient of determination, numerical rank and projector residuals.
//!
//! [`Matrix`] is a plain row-major `f64` buffer. Decompositions are delegated
//! to `nalgebra`, which is single-threaded and therefore bit-reproducible for
//! identical inputs.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default relative tolerance for [`numerical_rank`].
pub const DEFAULT_RANK_RTOL: f64 = 1e-10;

/// Relative floor under which the total sum of squares counts as zero in
/// [`r2_score`].
pub const SST_RTOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::InvalidShape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput("matrix data"));
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

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from row slices. Panics on ragged input; intended for
    /// literals in tests and small fixtures.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(Error::InvalidShape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        Ok(Self::from_na(&(self.to_na() * rhs.to_na())))
    }

    pub fn sub(&self, rhs: &Matrix) -> Result<Matrix> {
        self.ensure_same_shape(rhs)?;
        let data = self.data.iter().zip(&rhs.data).map(|(a, b)| a - b).collect();
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Column-wise concatenation `[a | b | ...]`.
    pub fn hcat(blocks: &[&Matrix]) -> Result<Matrix> {
        let rows = blocks.first().map_or(0, |b| b.rows);
        if blocks.iter().any(|b| b.rows != rows) {
            return Err(Error::InvalidShape("hcat blocks differ in row count".into()));
        }
        let cols = blocks.iter().map(|b| b.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for b in blocks {
                data.extend_from_slice(b.row(i));
            }
        }
        Ok(Self { rows, cols, data })
    }

    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    /// Appends a trailing column of ones.
    pub fn with_intercept(&self) -> Matrix {
        let mut data = Vec::with_capacity(self.rows * (self.cols + 1));
        for i in 0..self.rows {
            data.extend_from_slice(self.row(i));
            data.push(1.0);
        }
        Self {
            rows: self.rows,
            cols: self.cols + 1,
            data,
        }
    }

    pub fn to_na(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }

    pub fn from_na(m: &DMatrix<f64>) -> Matrix {
        Self::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
    }

    fn ensure_same_shape(&self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::InvalidShape(format!(
                "{}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstsqSolution {
    /// `(p+1) x d` when fitted with an intercept (intercept in the last row),
    /// `p x d` otherwise.
    pub weights: Matrix,
    pub residual_ss: f64,
    pub effective_rank: usize,
}

/// A factorized design matrix. Factorizing once and solving against many
/// targets is how the pairwise probe amortizes the SVD per reference head.
#[derive(Debug, Clone)]
pub struct LstsqFactor {
    design: DMatrix<f64>,
    u: DMatrix<f64>,
    v_t: DMatrix<f64>,
    /// Filtered inverse singular values (zero below the cutoff, ridge-shrunk
    /// when ridge is enabled).
    inv_sigma: Vec<f64>,
    rank: usize,
    intercept: bool,
}

impl LstsqFactor {
    pub fn new(x: &Matrix, intercept: bool, ridge_lambda: f64) -> Result<Self> {
        if x.rows == 0 {
            return Err(Error::InvalidShape("design has no rows".into()));
        }
        if !(ridge_lambda >= 0.0 && ridge_lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "ridge_lambda must be finite and >= 0, got {ridge_lambda}"
            )));
        }
        if !x.is_finite() {
            return Err(Error::NonFiniteInput("design matrix"));
        }
        let design = if intercept {
            x.with_intercept().to_na()
        } else {
            x.to_na()
        };
        let (t, q) = design.shape();
        let svd = design.clone().svd(true, true);
        let sigma = svd.singular_values;
        let smax = sigma.iter().cloned().fold(0.0_f64, f64::max);
        let cutoff = f64::EPSILON * t.max(q) as f64 * smax;
        let mut rank = 0;
        let inv_sigma = sigma
            .iter()
            .map(|&s| {
                if s > cutoff && s > 0.0 {
                    rank += 1;
                    if ridge_lambda > 0.0 {
                        s / (s * s + ridge_lambda)
                    } else {
                        1.0 / s
                    }
                } else {
                    0.0
                }
            })
            .collect();
        Ok(Self {
            design,
            u: svd.u.expect("u requested"),
            v_t: svd.v_t.expect("v_t requested"),
            inv_sigma,
            rank,
            intercept,
        })
    }

    pub fn rows(&self) -> usize {
        self.design.nrows()
    }

    pub fn has_intercept(&self) -> bool {
        self.intercept
    }

    pub fn solve(&self, y: &Matrix) -> Result<LstsqSolution> {
        if y.rows != self.design.nrows() {
            return Err(Error::InvalidShape(format!(
                "design has {} rows, target has {}",
                self.design.nrows(),
                y.rows
            )));
        }
        if !y.is_finite() {
            return Err(Error::NonFiniteInput("target matrix"));
        }
        let y = y.to_na();
        let mut uty = self.u.tr_mul(&y);
        for (i, mut row) in uty.row_iter_mut().enumerate() {
            row *= self.inv_sigma[i];
        }
        let w = self.v_t.tr_mul(&uty);
        let resid = &y - &self.design * &w;
        Ok(LstsqSolution {
            weights: Matrix::from_na(&w),
            residual_ss: resid.norm_squared(),
            effective_rank: self.rank,
        })
    }
}

/// Minimum-norm least squares `min_W ||Y - [X | 1] W||_F^2` via SVD. With
/// `ridge_lambda > 0` the singular values are shrunk as `s / (s^2 + lambda)`.
pub fn lstsq(x: &Matrix, y: &Matrix, intercept: bool, ridge_lambda: f64) -> Result<LstsqSolution> {
    if x.rows != y.rows {
        return Err(Error::InvalidShape(format!(
            "X has {} rows, Y has {}",
            x.rows, y.rows
        )));
    }
    LstsqFactor::new(x, intercept, ridge_lambda)?.solve(y)
}

/// Applies fitted weights to a design (appending the intercept column when
/// the weights carry one).
pub fn predict(x: &Matrix, weights: &Matrix, intercept: bool) -> Result<Matrix> {
    if intercept {
        x.with_intercept().matmul(weights)
    } else {
        x.matmul(weights)
    }
}

/// Total-variance-weighted coefficient of determination:
/// `1 - ||Y - Yhat||_F^2 / ||Y - mean(Y)||_F^2` with per-column means.
///
/// When the total sum of squares is numerically zero the score is 1.0 if the
/// residual is also zero and 0.0 otherwise.
pub fn r2_score(y: &Matrix, yhat: &Matrix) -> Result<f64> {
    y.ensure_same_shape(yhat)?;
    let sse = y
        .data
        .iter()
        .zip(&yhat.data)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    r2_from_sse(y, sse)
}

/// [`r2_score`] for an already computed residual sum of squares.
pub fn r2_from_sse(y: &Matrix, sse: f64) -> Result<f64> {
    if y.rows < 2 {
        return Err(Error::InsufficientSamples {
            needed: 2,
            available: y.rows,
        });
    }
    let (t, d) = y.shape();
    let mut means = vec![0.0; d];
    for i in 0..t {
        for (m, v) in means.iter_mut().zip(y.row(i)) {
            *m += v;
        }
    }
    for m in &mut means {
        *m /= t as f64;
    }
    let mut sst = 0.0;
    let mut energy = 0.0;
    for i in 0..t {
        for (yv, m) in y.row(i).iter().zip(&means) {
            sst += (yv - m) * (yv - m);
            energy += yv * yv;
        }
    }
    let eps = SST_RTOL * energy.max(f64::MIN_POSITIVE);
    if sst < eps {
        return Ok(if sse < eps { 1.0 } else { 0.0 });
    }
    Ok(1.0 - sse / sst)
}

/// Number of singular values above `rtol * sigma_max * max(rows, cols)`.
pub fn numerical_rank(m: &Matrix, rtol: f64) -> Result<usize> {
    if m.rows == 0 || m.cols == 0 {
        return Err(Error::InvalidShape("empty matrix".into()));
    }
    if !m.is_finite() {
        return Err(Error::NonFiniteInput("rank input"));
    }
    let sv = m.to_na().singular_values();
    let smax = sv.iter().cloned().fold(0.0_f64, f64::max);
    if smax == 0.0 {
        return Ok(0);
    }
    let cutoff = rtol * smax * m.rows.max(m.cols) as f64;
    Ok(sv.iter().filter(|&&s| s > cutoff).count())
}

/// `||(I - P_A) B||_F^2`, the optimum of `inf_C ||A C - B||_F^2`.
///
/// The column space of `A` is spanned by the leading columns of a
/// column-pivoted Householder QR, truncated where `|R_ii|` falls below the
/// default rank tolerance. The projector itself is never materialized.
pub fn projector_residual(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.rows != b.rows {
        return Err(Error::InvalidShape(format!(
            "A has {} rows, B has {}",
            a.rows, b.rows
        )));
    }
    if !a.is_finite() || !b.is_finite() {
        return Err(Error::NonFiniteInput("projector_residual"));
    }
    let bn = b.to_na();
    if a.cols == 0 || a.rows == 0 {
        return Ok(bn.norm_squared());
    }
    let qr = a.to_na().col_piv_qr();
    let r = qr.r();
    let diag: Vec<f64> = (0..r.nrows().min(r.ncols())).map(|i| r[(i, i)].abs()).collect();
    let lead = diag.first().copied().unwrap_or(0.0);
    let cutoff = DEFAULT_RANK_RTOL * lead * a.rows.max(a.cols) as f64;
    let rank = diag.iter().take_while(|&&d| d > cutoff && d > 0.0).count();
    if rank == 0 {
        return Ok(bn.norm_squared());
    }
    let q = qr.q();
    let basis = q.columns(0, rank);
    let coeffs = basis.tr_mul(&bn);
    let resid = bn - basis * coeffs;
    Ok(resid.norm_squared())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
    }

    #[test]
    fn lstsq_identity_design() {
        let x = Matrix::identity(3);
        let sol = lstsq(&x, &x, false, 0.0).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!(close(sol.weights.get(i, j), want, 1e-12));
            }
        }
        assert!(sol.residual_ss < 1e-24);
        assert_eq!(sol.effective_rank, 3);
    }

    #[test]
    fn lstsq_exact_scalar_line() {
        let x = Matrix::from_rows(&[&[1.0], &[2.0], &[3.0]]);
        let y = Matrix::from_rows(&[&[2.0], &[4.0], &[6.0]]);
        let sol = lstsq(&x, &y, false, 0.0).unwrap();
        assert_eq!(sol.weights.shape(), (1, 1));
        assert!(close(sol.weights.get(0, 0), 2.0, 1e-12));
        assert!(sol.residual_ss < 1e-20);
    }

    #[test]
    fn lstsq_two_points_with_intercept() {
        // Normal equations for y = a x + b through (1,1), (2,3):
        //   [5 3; 3 2] [a; b] = [7; 4]  =>  a = 2, b = -1.
        let x = Matrix::from_rows(&[&[1.0], &[2.0]]);
        let y = Matrix::from_rows(&[&[1.0], &[3.0]]);
        let sol = lstsq(&x, &y, true, 0.0).unwrap();
        assert_eq!(sol.weights.shape(), (2, 1));
        assert!(close(sol.weights.get(0, 0), 2.0, 1e-12));
        assert!(close(sol.weights.get(1, 0), -1.0, 1e-12));
        assert!(sol.residual_ss < 1e-20);
    }

    #[test]
    fn lstsq_rejects_bad_inputs() {
        let x = Matrix::zeros(3, 2);
        let y = Matrix::zeros(4, 1);
        assert!(matches!(lstsq(&x, &y, true, 0.0), Err(Error::InvalidShape(_))));
        assert!(matches!(
            Matrix::new(1, 2, vec![1.0, f64::NAN]),
            Err(Error::NonFiniteInput(_))
        ));
        assert!(matches!(
            lstsq(&x, &Matrix::zeros(3, 1), false, -1.0),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn lstsq_rank_deficient_is_minimum_norm() {
        // Two identical columns: the minimum-norm solution splits the weight.
        let x = Matrix::from_rows(&[&[1.0, 1.0], &[2.0, 2.0], &[3.0, 3.0]]);
        let y = Matrix::from_rows(&[&[2.0], &[4.0], &[6.0]]);
        let sol = lstsq(&x, &y, false, 0.0).unwrap();
        assert_eq!(sol.effective_rank, 1);
        assert!(close(sol.weights.get(0, 0), 1.0, 1e-10));
        assert!(close(sol.weights.get(1, 0), 1.0, 1e-10));
    }

    #[test]
    fn ridge_shrinks_weights() {
        let x = Matrix::from_rows(&[&[1.0], &[2.0], &[3.0]]);
        let y = Matrix::from_rows(&[&[2.0], &[4.0], &[6.0]]);
        let plain = lstsq(&x, &y, false, 0.0).unwrap();
        let ridge = lstsq(&x, &y, false, 1.0).unwrap();
        // Closed form: w = x'y / (x'x + lambda) = 28 / 15.
        assert!(close(ridge.weights.get(0, 0), 28.0 / 15.0, 1e-12));
        assert!(ridge.weights.get(0, 0) < plain.weights.get(0, 0));
    }

    #[test]
    fn r2_examples() {
        let y = Matrix::from_rows(&[&[0.0], &[1.0], &[2.0]]);
        assert_eq!(r2_score(&y, &y).unwrap(), 1.0);
        let mean = Matrix::from_rows(&[&[1.0], &[1.0], &[1.0]]);
        assert!(r2_score(&y, &mean).unwrap().abs() < 1e-15);
        let yhat = Matrix::from_rows(&[&[0.0], &[1.0], &[1.0]]);
        assert!(close(r2_score(&y, &yhat).unwrap(), 0.5, 1e-15));
    }

    #[test]
    fn r2_degenerate_targets() {
        let y = Matrix::from_rows(&[&[3.0], &[3.0], &[3.0]]);
        assert_eq!(r2_score(&y, &y).unwrap(), 1.0);
        let off = Matrix::from_rows(&[&[3.0], &[3.0], &[4.0]]);
        assert_eq!(r2_score(&y, &off).unwrap(), 0.0);
        assert!(matches!(
            r2_score(&Matrix::zeros(1, 1), &Matrix::zeros(1, 1)),
            Err(Error::InsufficientSamples { .. })
        ));
        assert!(matches!(
            r2_score(&Matrix::zeros(3, 1), &Matrix::zeros(3, 2)),
            Err(Error::InvalidShape(_))
        ));
    }

    #[test]
    fn rank_examples() {
        assert_eq!(numerical_rank(&Matrix::identity(4), 1e-9).unwrap(), 4);
        let u = [1.0, -2.0, 0.5, 3.0, 1.5];
        let v = [2.0, 1.0, -1.0];
        let outer = Matrix::from_fn(5, 3, |i, j| u[i] * v[j]);
        assert_eq!(numerical_rank(&outer, DEFAULT_RANK_RTOL).unwrap(), 1);
        assert_eq!(numerical_rank(&Matrix::zeros(3, 3), DEFAULT_RANK_RTOL).unwrap(), 0);
    }

    #[test]
    fn projector_residual_trivial_cases() {
        let a = Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 1.0], &[0.0, 0.0], &[0.0, 0.0]]);
        assert!(projector_residual(&a, &a).unwrap() < 1e-28);
        let b = Matrix::from_rows(&[&[0.0, 0.0], &[0.0, 0.0], &[3.0, 1.0], &[0.0, 2.0]]);
        assert!(close(projector_residual(&a, &b).unwrap(), b.frobenius_sq(), 1e-14));
    }
}
