//! Dense kernels: column-pivoted Householder QR, projectors onto range
//! complements, and minimum-norm least squares.
//!
//! Matrices are stored row-major. Everything here is sized for the small
//! dense systems that appear in projection layers (tens to low hundreds of
//! rows), so no blocking or BLAS dispatch is attempted.

use crate::error::{check_len, Error, Result};
use crate::scalar::Scalar;

/// Default relative cutoff for numerical rank decisions.
pub const DEFAULT_RANK_TOL: f64 = 1e-10;

/// Row-major dense matrix with finite entries.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> DenseMatrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        check_len("matrix entries", rows * cols, data.len())?;
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Input(format!(
                "non-finite matrix entry at ({}, {})",
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    /// Builds from a list of rows; `cols` is needed when `rows` is empty.
    pub fn from_rows(cols: usize, rows: &[Vec<T>]) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            check_len("row length", cols, r.len())?;
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    /// Builds an `rows × columns.len()` matrix from column vectors.
    pub fn from_columns(rows: usize, columns: &[Vec<T>]) -> Result<Self> {
        let cols = columns.len();
        let mut m = Self::zeros(rows, cols);
        for (j, c) in columns.iter().enumerate() {
            check_len("column length", rows, c.len())?;
            for (i, &v) in c.iter().enumerate() {
                m.data[i * cols + j] = v;
            }
        }
        if m.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("non-finite matrix entry".into()));
        }
        Ok(m)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub(crate) fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<T> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.get(i, j);
            }
        }
        t
    }

    /// `self · v`
    pub fn matvec(&self, v: &[T]) -> Result<Vec<T>> {
        check_len("matvec operand", self.cols, v.len())?;
        Ok((0..self.rows).map(|i| dot(self.row(i), v)).collect())
    }

    /// `selfᵀ · v`
    pub fn tr_matvec(&self, v: &[T]) -> Result<Vec<T>> {
        check_len("transposed matvec operand", self.rows, v.len())?;
        let mut out = vec![T::zero(); self.cols];
        for (i, &vi) in v.iter().enumerate() {
            if vi != T::zero() {
                axpy(vi, self.row(i), &mut out);
            }
        }
        Ok(out)
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        check_len("matmul inner dimension", self.cols, other.rows)?;
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == T::zero() {
                    continue;
                }
                let orow = other.row(k);
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                axpy(a, orow, dst);
            }
        }
        Ok(out)
    }

    pub fn frobenius_norm(&self) -> T {
        norm2(&self.data)
    }

    /// Keeps the listed rows, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
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

    /// Stacks `self` on top of `other`.
    pub fn vstack(&self, other: &Self) -> Result<Self> {
        check_len("vstack column count", self.cols, other.cols)?;
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Self {
            rows: self.rows + other.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        check_len("matrix rows", self.rows, other.rows)?;
        check_len("matrix cols", self.cols, other.cols)?;
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a - b)
                .collect(),
        })
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// `y += alpha * x`
#[inline]
pub fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Euclidean norm, scaled to avoid overflow.
pub fn norm2<T: Scalar>(v: &[T]) -> T {
    let scale = v.iter().fold(T::zero(), |m, x| m.max(x.abs()));
    if scale == T::zero() {
        return T::zero();
    }
    let s: T = v.iter().map(|&x| (x / scale) * (x / scale)).sum();
    scale * s.sqrt()
}

pub fn norm_inf<T: Scalar>(v: &[T]) -> T {
    v.iter().fold(T::zero(), |m, x| m.max(x.abs()))
}

/// Column-pivoted QR of an `m × n` matrix truncated at its numerical rank:
/// `H[:, pivot] ≈ q1 · r` with `q1` of size `m × rank`.
#[derive(Clone, Debug)]
pub struct QrFactorization<T> {
    q1: DenseMatrix<T>,
    r: DenseMatrix<T>,
    pivot: Vec<usize>,
    rank: usize,
    rows: usize,
    cols: usize,
}

impl<T: Scalar> QrFactorization<T> {
    /// Orthonormal basis of the column space, `rows × rank`.
    pub fn q1(&self) -> &DenseMatrix<T> {
        &self.q1
    }

    /// Upper-trapezoidal factor, `rank × cols`, columns in pivoted order.
    pub fn r(&self) -> &DenseMatrix<T> {
        &self.r
    }

    pub fn pivot(&self) -> &[usize] {
        &self.pivot
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    /// Row count of the factored matrix.
    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Column count of the factored matrix.
    pub fn cols(&self) -> usize {
        self.cols
    }

    /// `q1ᵀ v`
    pub fn q1t_apply(&self, v: &[T]) -> Result<Vec<T>> {
        self.q1.tr_matvec(v)
    }

    /// `q1 q1ᵀ v`, the orthogonal projection onto the column space.
    pub fn range_apply(&self, v: &[T]) -> Result<Vec<T>> {
        let c = self.q1.tr_matvec(v)?;
        self.q1.matvec(&c)
    }

    /// Solves `H z = rhs` in the least-squares sense for full column rank `H`.
    /// Returns `None` when the factored matrix is column-rank deficient.
    pub fn solve_full_rank(&self, rhs: &[T]) -> Result<Option<Vec<T>>> {
        if self.rank < self.cols {
            return Ok(None);
        }
        let c = self.q1.tr_matvec(rhs)?;
        let w = back_substitute(&self.r, &c);
        let mut z = vec![T::zero(); self.cols];
        for (k, &p) in self.pivot.iter().enumerate() {
            z[p] = w[k];
        }
        Ok(Some(z))
    }
}

/// Solves `R w = c` with `R` the leading square block of an upper-trapezoidal matrix.
fn back_substitute<T: Scalar>(r: &DenseMatrix<T>, c: &[T]) -> Vec<T> {
    let k = r.rows();
    let mut w = vec![T::zero(); k];
    for i in (0..k).rev() {
        let mut s = c[i];
        for j in i + 1..k {
            s -= r.get(i, j) * w[j];
        }
        w[i] = s / r.get(i, i);
    }
    w
}

/// Householder QR with column pivoting.
///
/// Rank is the number of leading diagonal entries with
/// `|r_ii| > rank_tol · |r_11|`.
pub fn qr_pivoted<T: Scalar>(h: &DenseMatrix<T>, rank_tol: T) -> Result<QrFactorization<T>> {
    if !(rank_tol > T::zero()) {
        return Err(Error::Input("rank_tol must be positive".into()));
    }
    if h.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("non-finite entry in QR input".into()));
    }
    let m = h.rows();
    let n = h.cols();
    // column-major working copy
    let mut a: Vec<Vec<T>> = (0..n).map(|j| h.column(j)).collect();
    let mut pivot: Vec<usize> = (0..n).collect();
    let steps = m.min(n);
    let mut vs: Vec<(Vec<T>, T)> = Vec::with_capacity(steps);
    let mut diag = Vec::with_capacity(steps);

    for k in 0..steps {
        // pick the remaining column of largest trailing norm; ties go to the lower index
        let mut best = k;
        let mut best_norm = norm2(&a[k][k..]);
        for (j, col) in a.iter().enumerate().skip(k + 1) {
            let nj = norm2(&col[k..]);
            if nj > best_norm {
                best = j;
                best_norm = nj;
            }
        }
        a.swap(k, best);
        pivot.swap(k, best);

        let alpha = best_norm;
        if alpha == T::zero() {
            vs.push((vec![T::zero(); m - k], T::zero()));
            diag.push(T::zero());
            continue;
        }
        let x0 = a[k][k];
        let rkk = if x0 >= T::zero() { -alpha } else { alpha };
        let mut v: Vec<T> = a[k][k..].to_vec();
        v[0] -= rkk;
        let vnorm2 = dot(&v, &v);
        let beta = if vnorm2 == T::zero() {
            T::zero()
        } else {
            T::lit(2.0) / vnorm2
        };
        for col in a.iter_mut().skip(k) {
            let s = beta * dot(&v, &col[k..]);
            if s != T::zero() {
                for (ci, &vi) in col[k..].iter_mut().zip(&v) {
                    *ci -= s * vi;
                }
            }
        }
        // exact values on the pivot column
        a[k][k] = rkk;
        for i in k + 1..m {
            a[k][i] = T::zero();
        }
        vs.push((v, beta));
        diag.push(rkk);
    }

    let lead = diag.first().map(|d| d.abs()).unwrap_or(T::zero());
    let rank = if lead == T::zero() {
        0
    } else {
        diag.iter()
            .take_while(|d| d.abs() > rank_tol * lead)
            .count()
    };

    let mut r = DenseMatrix::zeros(rank, n);
    for i in 0..rank {
        for (j, col) in a.iter().enumerate().skip(i) {
            r.set(i, j, col[i]);
        }
    }

    // q1 = H_1 H_2 ... H_s applied to the first `rank` unit vectors
    let mut q1 = DenseMatrix::zeros(m, rank);
    for j in 0..rank {
        let mut e = vec![T::zero(); m];
        e[j] = T::one();
        for (k, (v, beta)) in vs.iter().enumerate().rev() {
            let s = *beta * dot(v, &e[k..]);
            if s != T::zero() {
                for (ei, &vi) in e[k..].iter_mut().zip(v) {
                    *ei -= s * vi;
                }
            }
        }
        for i in 0..m {
            q1.set(i, j, e[i]);
        }
    }

    Ok(QrFactorization {
        q1,
        r,
        pivot,
        rank,
        rows: m,
        cols: n,
    })
}

/// `(I − q1 q1ᵀ) v`: orthogonal projection onto the complement of range(H).
pub fn orth_complement_apply<T: Scalar>(f: &QrFactorization<T>, v: &[T]) -> Result<Vec<T>> {
    check_len("complement operand", f.rows, v.len())?;
    let c = f.q1.tr_matvec(v)?;
    let mut out = v.to_vec();
    for (j, &cj) in c.iter().enumerate() {
        if cj != T::zero() {
            for (i, o) in out.iter_mut().enumerate() {
                *o -= cj * f.q1.get(i, j);
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct LstsqSolution<T> {
    pub x: Vec<T>,
    /// `‖H x − r‖₂`
    pub residual: T,
    pub rank: usize,
}

/// Minimum-norm minimizer of `‖H z − r‖₂`, via a complete orthogonal
/// decomposition built from two pivoted QR factorizations.
pub fn lstsq_min_norm<T: Scalar>(
    h: &DenseMatrix<T>,
    r: &[T],
    rank_tol: T,
) -> Result<LstsqSolution<T>> {
    check_len("least-squares right-hand side", h.rows(), r.len())?;
    let f = qr_pivoted(h, rank_tol)?;
    let n = h.cols();
    let c = f.q1.tr_matvec(r)?;
    let w = if f.rank == n {
        back_substitute(&f.r, &c)
    } else if f.rank == 0 {
        vec![T::zero(); n]
    } else {
        // R w = c with R (rank × n) of full row rank; minimum-norm w lies in range(Rᵀ).
        let rt = f.r.transpose();
        let g = qr_pivoted(&rt, rank_tol)?;
        let k = g.rank;
        let permuted: Vec<T> = g.pivot[..k].iter().map(|&p| c[p]).collect();
        // forward substitution with the lower-triangular R3ᵀ
        let mut u = vec![T::zero(); k];
        for i in 0..k {
            let mut s = permuted[i];
            for (j, &uj) in u.iter().enumerate().take(i) {
                s -= g.r.get(j, i) * uj;
            }
            u[i] = s / g.r.get(i, i);
        }
        g.q1.matvec(&u)?
    };
    let mut x = vec![T::zero(); n];
    for (k, &p) in f.pivot.iter().enumerate() {
        if k < w.len() {
            x[p] = w[k];
        }
    }
    let hx = h.matvec(&x)?;
    let res: Vec<T> = hx.iter().zip(r).map(|(&a, &b)| a - b).collect();
    Ok(LstsqSolution {
        x,
        residual: norm2(&res),
        rank: f.rank,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mat(rows: usize, cols: usize, v: &[f64]) -> DenseMatrix<f64> {
        DenseMatrix::new(rows, cols, v.to_vec()).unwrap()
    }

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DenseMatrix<f64> {
        let data = (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        DenseMatrix::new(r, c, data).unwrap()
    }

    #[test]
    fn rejects_non_finite() {
        assert!(DenseMatrix::new(1, 2, vec![1.0, f64::NAN]).is_err());
        assert!(DenseMatrix::new(1, 2, vec![1.0]).is_err());
    }

    #[test]
    fn qr_identity() {
        let f = qr_pivoted(&DenseMatrix::<f64>::identity(2), 1e-12).unwrap();
        assert_eq!(f.rank(), 2);
        for i in 0..2 {
            for j in 0..2 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(f.q1().get(i, j).abs(), e, epsilon = 1e-15);
                assert_abs_diff_eq!(f.r().get(i, j).abs(), e, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn qr_column_vector() {
        let f = qr_pivoted(&mat(2, 1, &[1.0, 2.0]), 1e-12).unwrap();
        assert_eq!(f.rank(), 1);
        let s = 5f64.sqrt();
        let sign = f.q1().get(0, 0).signum();
        assert_abs_diff_eq!(f.q1().get(0, 0), sign / s, epsilon = 1e-15);
        assert_abs_diff_eq!(f.q1().get(1, 0), sign * 2.0 / s, epsilon = 1e-15);
    }

    #[test]
    fn qr_duplicated_column() {
        let f = qr_pivoted(&mat(2, 2, &[1.0, 1.0, 1.0, 1.0]), 1e-12).unwrap();
        assert_eq!(f.rank(), 1);
        assert_eq!(f.q1().cols(), 1);
    }

    #[test]
    fn qr_rejects_bad_tol() {
        assert!(qr_pivoted(&DenseMatrix::<f64>::identity(2), 0.0).is_err());
    }

    #[test]
    fn complement_of_empty_is_identity() {
        let h = DenseMatrix::<f64>::zeros(2, 0);
        let f = qr_pivoted(&h, 1e-10).unwrap();
        assert_eq!(f.rank(), 0);
        assert_eq!(
            orth_complement_apply(&f, &[3.0, -1.0]).unwrap(),
            vec![3.0, -1.0]
        );
    }

    #[test]
    fn complement_of_line() {
        let f = qr_pivoted(&mat(2, 1, &[1.0, 2.0]), 1e-10).unwrap();
        let out = orth_complement_apply(&f, &[1.0, 0.0]).unwrap();
        assert_abs_diff_eq!(out[0], 0.8, epsilon = 1e-15);
        assert_abs_diff_eq!(out[1], -0.4, epsilon = 1e-15);
    }

    #[test]
    fn complement_of_full_space() {
        let f = qr_pivoted(&mat(2, 2, &[2.0, 1.0, 0.5, 3.0]), 1e-10).unwrap();
        let out = orth_complement_apply(&f, &[1.0, 1.0]).unwrap();
        assert!(norm_inf(&out) < 1e-15);
    }

    #[test]
    fn complement_dimension_mismatch() {
        let f = qr_pivoted(&mat(2, 1, &[1.0, 2.0]), 1e-10).unwrap();
        assert!(matches!(
            orth_complement_apply(&f, &[1.0]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn lstsq_examples() {
        let s = lstsq_min_norm(&mat(2, 1, &[1.0, 1.0]), &[1.0, 1.0], 1e-10).unwrap();
        assert_abs_diff_eq!(s.x[0], 1.0, epsilon = 1e-15);
        assert!(s.residual < 1e-15);

        let s = lstsq_min_norm(&DenseMatrix::identity(2), &[3.0, 4.0], 1e-10).unwrap();
        assert_abs_diff_eq!(s.x[0], 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s.x[1], 4.0, epsilon = 1e-15);

        let s = lstsq_min_norm(&mat(2, 1, &[1.0, 2.0]), &[1.0, 0.0], 1e-10).unwrap();
        assert_abs_diff_eq!(s.x[0], 0.2, epsilon = 1e-15);
        assert_abs_diff_eq!(s.residual, 0.8f64.sqrt(), epsilon = 1e-15);

        assert!(lstsq_min_norm(&mat(2, 1, &[1.0, 2.0]), &[1.0], 1e-10).is_err());
    }

    #[test]
    fn lstsq_rank_deficient_is_minimum_norm() {
        // z1 + z2 = 2 has minimum-norm solution (1, 1)
        let s = lstsq_min_norm(&mat(1, 2, &[1.0, 1.0]), &[2.0], 1e-10).unwrap();
        assert_abs_diff_eq!(s.x[0], 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(s.x[1], 1.0, epsilon = 1e-14);
        assert_eq!(s.rank, 1);
    }

    #[test]
    fn lstsq_matches_svd_pseudoinverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..50 {
            let rows = rng.random_range(1..10);
            let cols = rng.random_range(1..10);
            let k = rng.random_range(1..=rows.min(cols));
            let u = random_matrix(&mut rng, rows, k);
            let v = random_matrix(&mut rng, k, cols);
            let h = u.matmul(&v).unwrap();
            let r: Vec<f64> = (0..rows).map(|_| rng.random_range(-1.0..1.0)).collect();
            let ours = lstsq_min_norm(&h, &r, 1e-10).unwrap();
            let nh = nalgebra::DMatrix::from_row_slice(rows, cols, h.as_slice());
            let svd = nh.svd(true, true);
            let pinv = svd.pseudo_inverse(1e-10).unwrap();
            let reference = pinv * nalgebra::DVector::from_column_slice(&r);
            for j in 0..cols {
                assert!(
                    (ours.x[j] - reference[j]).abs() < 1e-8 * (1.0 + reference[j].abs()),
                    "trial {trial}: {} vs {}",
                    ours.x[j],
                    reference[j]
                );
            }
        }
    }

    #[test]
    fn qr_reconstructs_and_is_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..30 {
            let rows = rng.random_range(1..12);
            let cols = rng.random_range(1..12);
            let h = random_matrix(&mut rng, rows, cols);
            let f = qr_pivoted(&h, 1e-12).unwrap();
            assert!(f.rank() <= rows.min(cols));
            let qtq = f.q1().transpose().matmul(f.q1()).unwrap();
            let eye = DenseMatrix::identity(f.rank());
            assert!(qtq.sub(&eye).unwrap().max_abs() < 1e-12);
            let qr = f.q1().matmul(f.r()).unwrap();
            let mut hp = DenseMatrix::zeros(rows, cols);
            for (k, &p) in f.pivot().iter().enumerate() {
                for i in 0..rows {
                    hp.set(i, k, h.get(i, p));
                }
            }
            let err = qr.sub(&hp).unwrap().frobenius_norm() / hp.frobenius_norm();
            assert!(err < 1e-10, "reconstruction error {err}");
        }
    }

    #[test]
    fn generic_over_f32() {
        let h = DenseMatrix::<f32>::new(2, 1, vec![1.0, 2.0]).unwrap();
        let f = qr_pivoted(&h, 1e-6).unwrap();
        let out = orth_complement_apply(&f, &[1.0, 0.0]).unwrap();
        assert!((out[0] - 0.8).abs() < 1e-6 && (out[1] + 0.4).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn complement_plus_range_reconstructs(
            rows in 1usize..=12, cols in 1usize..=12, seed in any::<u64>()
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h = random_matrix(&mut rng, rows, cols);
            let v: Vec<f64> = (0..rows).map(|_| rng.random_range(-2.0..2.0)).collect();
            let f = qr_pivoted(&h, 1e-10).unwrap();
            let perp = orth_complement_apply(&f, &v).unwrap();
            let par = f.range_apply(&v).unwrap();
            for i in 0..rows {
                prop_assert!((perp[i] + par[i] - v[i]).abs() < 1e-10);
            }
            // orthogonal to every basis column, idempotent
            for j in 0..f.rank() {
                prop_assert!(dot(&f.q1().column(j), &perp).abs() < 1e-10);
            }
            let twice = orth_complement_apply(&f, &perp).unwrap();
            for i in 0..rows {
                prop_assert!((twice[i] - perp[i]).abs() < 1e-10);
            }
        }

        #[test]
        fn full_rank_lstsq_matches_normal_equations(
            rows in 2usize..=10, extra in 0usize..=4, seed in any::<u64>()
        ) {
            let cols = (rows - 1).min(1 + extra).max(1);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h = random_matrix(&mut rng, rows, cols);
            let r: Vec<f64> = (0..rows).map(|_| rng.random_range(-1.0..1.0)).collect();
            let ours = lstsq_min_norm(&h, &r, 1e-10).unwrap();
            let nh = nalgebra::DMatrix::from_row_slice(rows, cols, h.as_slice());
            let gram = nh.transpose() * &nh;
            let rhs = nh.transpose() * nalgebra::DVector::from_column_slice(&r);
            let reference = gram.lu().solve(&rhs).unwrap();
            let scale = reference.amax().max(1e-300);
            for j in 0..cols {
                prop_assert!((ours.x[j] - reference[j]).abs() <= 1e-9 * scale.max(1.0));
            }
        }

        #[test]
        fn rank_of_low_rank_products(k in 1usize..=8, extra_r in 0usize..4, extra_c in 0usize..4, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rows = k + extra_r + 1;
            let cols = k + extra_c + 1;
            let u = random_matrix(&mut rng, rows, k);
            let v = random_matrix(&mut rng, cols, k);
            let h = u.matmul(&v.transpose()).unwrap();
            prop_assert_eq!(qr_pivoted(&h, 1e-10).unwrap().rank(), k);
        }
    }
}
