//! Polyhedral sets `{y | A y ≤ a, B y = b}` and the constraint families used
//! by the projection layers: simplex, portfolio budget with a group floor,
//! partial matching, and the Birkhoff polytope.
//!
//! Every constructor certifies nonemptiness by projecting the origin, so a
//! `Polytope` value always carries a feasible witness. Index sets are 0-based
//! in this API.

use std::fmt::Write as _;

use crate::error::{check_len, Error, Result};
use crate::linalg::{lstsq_min_norm, norm_inf, qr_pivoted, DenseMatrix, DEFAULT_RANK_TOL};
use crate::qp::{default_tol, project};
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct Polytope<T> {
    a_mat: DenseMatrix<T>,
    a_vec: Vec<T>,
    b_mat: DenseMatrix<T>,
    b_vec: Vec<T>,
    witness: Vec<T>,
    /// Original indices of the equality rows that were kept, when the
    /// equalities were reduced to full row rank.
    kept_equalities: Option<Vec<usize>>,
}

/// Squared-norm constraint violation per block, and their maximum.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViolationReport<T> {
    pub v_ineq: T,
    pub v_eq: T,
    pub v_all: T,
}

impl<T: Scalar> Polytope<T> {
    /// Validates shapes, requires `B` to have full row rank, and certifies
    /// that the set is nonempty.
    pub fn new(
        a_mat: DenseMatrix<T>,
        a_vec: Vec<T>,
        b_mat: DenseMatrix<T>,
        b_vec: Vec<T>,
    ) -> Result<Self> {
        let n = a_mat.cols();
        check_len("equality matrix columns", n, b_mat.cols())?;
        check_len("inequality right-hand side", a_mat.rows(), a_vec.len())?;
        check_len("equality right-hand side", b_mat.rows(), b_vec.len())?;
        if n == 0 {
            return Err(Error::Input("ambient dimension must be positive".into()));
        }
        if a_vec.iter().chain(&b_vec).any(|v| !v.is_finite()) {
            return Err(Error::Input("non-finite right-hand side".into()));
        }
        let l = b_mat.rows();
        if l > 0 {
            let rank = qr_pivoted(&b_mat.transpose(), T::lit(DEFAULT_RANK_TOL))?.rank();
            if rank < l {
                return Err(Error::Rank { rank, rows: l });
            }
        }
        let mut p = Self {
            a_mat,
            a_vec,
            b_mat,
            b_vec,
            witness: Vec::new(),
            kept_equalities: None,
        };
        let origin = vec![T::zero(); n];
        let res = project(&p, &origin, default_tol::<T>()).map_err(|e| match e {
            Error::Infeasible(msg) => Error::Infeasible(msg),
            Error::Convergence { .. } => {
                Error::Infeasible(format!("could not certify nonemptiness: {e}"))
            }
            other => other,
        })?;
        if !p.contains(&res.y, default_tol::<T>() * T::lit(10.0)) {
            return Err(Error::Infeasible(
                "projection of the origin is not feasible".into(),
            ));
        }
        p.witness = res.y;
        Ok(p)
    }

    /// Like [`Polytope::new`], but first drops linearly dependent equality
    /// rows, remembering which original rows were kept.
    pub fn with_reduced_equalities(
        a_mat: DenseMatrix<T>,
        a_vec: Vec<T>,
        b_mat: DenseMatrix<T>,
        b_vec: Vec<T>,
    ) -> Result<Self> {
        let reduced = drop_redundant_equalities(&b_mat, &b_vec, T::lit(DEFAULT_RANK_TOL))?;
        let mut p = Self::new(a_mat, a_vec, reduced.b_mat, reduced.b_vec)?;
        p.kept_equalities = Some(reduced.kept);
        Ok(p)
    }

    pub fn n(&self) -> usize {
        self.a_mat.cols()
    }

    /// Number of inequality rows.
    pub fn m(&self) -> usize {
        self.a_mat.rows()
    }

    /// Number of equality rows.
    pub fn l(&self) -> usize {
        self.b_mat.rows()
    }

    pub fn a_mat(&self) -> &DenseMatrix<T> {
        &self.a_mat
    }

    pub fn a_vec(&self) -> &[T] {
        &self.a_vec
    }

    pub fn b_mat(&self) -> &DenseMatrix<T> {
        &self.b_mat
    }

    pub fn b_vec(&self) -> &[T] {
        &self.b_vec
    }

    /// A feasible point found at construction.
    pub fn witness(&self) -> &[T] {
        &self.witness
    }

    pub fn kept_equalities(&self) -> Option<&[usize]> {
        self.kept_equalities.as_deref()
    }

    /// `v_ineq = ‖max(Ay − a, 0)‖²`, `v_eq = ‖By − b‖²`, `v_all = max` of the two.
    pub fn feasibility_violation(&self, y: &[T]) -> Result<ViolationReport<T>> {
        check_len("point", self.n(), y.len())?;
        let ay = self.a_mat.matvec(y)?;
        let v_ineq = ay
            .iter()
            .zip(&self.a_vec)
            .map(|(&s, &a)| {
                let e = (s - a).max(T::zero());
                e * e
            })
            .sum::<T>();
        let by = self.b_mat.matvec(y)?;
        let v_eq = by
            .iter()
            .zip(&self.b_vec)
            .map(|(&s, &b)| (s - b) * (s - b))
            .sum::<T>();
        Ok(ViolationReport {
            v_ineq,
            v_eq,
            v_all: v_ineq.max(v_eq),
        })
    }

    /// `max(Ay − a) ≤ tol` and `‖By − b‖∞ ≤ tol`. False on a length mismatch.
    pub fn contains(&self, y: &[T], tol: T) -> bool {
        if y.len() != self.n() {
            return false;
        }
        let ineq_ok =
            (0..self.m()).all(|i| crate::linalg::dot(self.a_mat.row(i), y) - self.a_vec[i] <= tol);
        let eq_ok = (0..self.l())
            .all(|k| (crate::linalg::dot(self.b_mat.row(k), y) - self.b_vec[k]).abs() <= tol);
        ineq_ok && eq_ok
    }

    /// Plain-text serialization: a `polytope v1` header, the dimensions
    /// `n m l`, then the rows of A, the vector a, the rows of B and b.
    /// Values are written in shortest round-trip form.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "polytope v1");
        let _ = writeln!(s, "{} {} {}", self.n(), self.m(), self.l());
        let line = |s: &mut String, v: &[T]| {
            let parts: Vec<String> = v.iter().map(|x| x.to_string()).collect();
            let _ = writeln!(s, "{}", parts.join(" "));
        };
        for i in 0..self.m() {
            line(&mut s, self.a_mat.row(i));
        }
        line(&mut s, &self.a_vec);
        for k in 0..self.l() {
            line(&mut s, self.b_mat.row(k));
        }
        line(&mut s, &self.b_vec);
        s
    }

    /// Parses the format written by [`Polytope::to_text`]. Lines starting
    /// with `#` are ignored. Equalities are reduced to full row rank.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'));
        match lines.next() {
            Some("polytope v1") => {}
            other => {
                return Err(Error::Parse(format!(
                    "expected header `polytope v1`, found {:?}",
                    other.unwrap_or("")
                )))
            }
        }
        let mut tokens = lines.flat_map(str::split_whitespace);
        let mut dim = |name: &str| -> Result<usize> {
            let tok = tokens
                .next()
                .ok_or_else(|| Error::Parse(format!("missing dimension `{name}`")))?;
            tok.parse()
                .map_err(|_| Error::Parse(format!("invalid dimension `{name}`: `{tok}`")))
        };
        let n = dim("n")?;
        let m = dim("m")?;
        let l = dim("l")?;
        let rest: Vec<&str> = tokens.collect();
        let expected = m * n + m + l * n + l;
        if rest.len() != expected {
            return Err(Error::Parse(format!(
                "expected {expected} numeric entries for n={n} m={m} l={l}, found {}",
                rest.len()
            )));
        }
        let values = rest
            .iter()
            .map(|t| {
                t.parse::<T>()
                    .map_err(|_| Error::Parse(format!("invalid number `{t}`")))
            })
            .collect::<Result<Vec<T>>>()?;
        let (a_data, rest) = values.split_at(m * n);
        let (a_vec, rest) = rest.split_at(m);
        let (b_data, b_vec) = rest.split_at(l * n);
        let a_mat = DenseMatrix::new(m, n, a_data.to_vec())?;
        let b_mat = DenseMatrix::new(l, n, b_data.to_vec())?;
        Self::with_reduced_equalities(a_mat, a_vec.to_vec(), b_mat, b_vec.to_vec())
    }
}

/// Full-row-rank equivalent of an equality system.
#[derive(Clone, Debug)]
pub struct ReducedEqualities<T> {
    pub b_mat: DenseMatrix<T>,
    pub b_vec: Vec<T>,
    /// Original row indices retained, increasing.
    pub kept: Vec<usize>,
}

/// Removes linearly dependent rows of `B y = b`. Fails if a dropped row's
/// right-hand side is inconsistent with the kept rows.
pub fn drop_redundant_equalities<T: Scalar>(
    b_mat: &DenseMatrix<T>,
    b_vec: &[T],
    tol: T,
) -> Result<ReducedEqualities<T>> {
    check_len("equality right-hand side", b_mat.rows(), b_vec.len())?;
    let l = b_mat.rows();
    if l == 0 {
        return Ok(ReducedEqualities {
            b_mat: b_mat.clone(),
            b_vec: Vec::new(),
            kept: Vec::new(),
        });
    }
    let f = qr_pivoted(&b_mat.transpose(), tol)?;
    let mut kept: Vec<usize> = f.pivot()[..f.rank()].to_vec();
    kept.sort_unstable();
    if kept.len() == l {
        return Ok(ReducedEqualities {
            b_mat: b_mat.clone(),
            b_vec: b_vec.to_vec(),
            kept,
        });
    }
    let reduced = b_mat.select_rows(&kept);
    let reduced_rhs: Vec<T> = kept.iter().map(|&k| b_vec[k]).collect();
    let basis = reduced.transpose();
    let scale = T::one() + norm_inf(b_vec);
    for j in (0..l).filter(|j| !kept.contains(j)) {
        let coeffs = lstsq_min_norm(&basis, b_mat.row(j), tol)?;
        let implied: T = crate::linalg::dot(&coeffs.x, &reduced_rhs);
        let slack = T::lit(1e3) * tol.max(T::epsilon()) * scale;
        if (implied - b_vec[j]).abs() > slack {
            return Err(Error::Infeasible(format!(
                "equality row {j} is a combination of other rows but its right-hand side disagrees"
            )));
        }
    }
    Ok(ReducedEqualities {
        b_mat: reduced,
        b_vec: reduced_rhs,
        kept,
    })
}

/// Probability simplex `{w ≥ 0, Σw = 1}`.
pub fn make_simplex<T: Scalar>(n: usize) -> Result<Polytope<T>> {
    make_portfolio(n, &[], T::zero())
}

/// Budget simplex with a group floor: `Σw = 1`, `w ≥ 0`,
/// `Σ_{i∈group} w_i ≥ delta`. `group` holds 0-based asset indices; an empty
/// group drops the floor row.
pub fn make_portfolio<T: Scalar>(n: usize, group: &[usize], delta: T) -> Result<Polytope<T>> {
    if n == 0 {
        return Err(Error::Input("portfolio needs at least one asset".into()));
    }
    if let Some(&bad) = group.iter().find(|&&i| i >= n) {
        return Err(Error::Input(format!(
            "group index {bad} out of range for n = {n}"
        )));
    }
    if !delta.is_finite() {
        return Err(Error::Input("delta must be finite".into()));
    }
    let mut rows = Vec::with_capacity(n + 1);
    let mut rhs = Vec::with_capacity(n + 1);
    for i in 0..n {
        let mut r = vec![T::zero(); n];
        r[i] = -T::one();
        rows.push(r);
        rhs.push(T::zero());
    }
    if !group.is_empty() {
        let mut r = vec![T::zero(); n];
        for &i in group {
            r[i] = -T::one();
        }
        rows.push(r);
        rhs.push(-delta);
    } else if delta > T::zero() {
        return Err(Error::Infeasible(
            "positive group floor with an empty group".into(),
        ));
    }
    let a_mat = DenseMatrix::from_rows(n, &rows)?;
    let b_mat = DenseMatrix::new(1, n, vec![T::one(); n])?;
    Polytope::new(a_mat, rhs, b_mat, vec![T::one()])
}

/// Partial matching polytope on row-major `vec(X)`, `X ∈ R^{d1×d2}`:
/// row sums ≤ 1, column sums ≤ 1, total ≤ alpha, `X ≥ 0`.
pub fn make_matching<T: Scalar>(d1: usize, d2: usize, alpha: T) -> Result<Polytope<T>> {
    if d1 == 0 || d2 == 0 {
        return Err(Error::Input("matching dimensions must be positive".into()));
    }
    if !(alpha >= T::zero()) || !alpha.is_finite() {
        return Err(Error::Input("alpha must be finite and nonnegative".into()));
    }
    let n = d1 * d2;
    let mut rows = Vec::with_capacity(d1 + d2 + 1 + n);
    let mut rhs = Vec::with_capacity(d1 + d2 + 1 + n);
    for i in 0..d1 {
        let mut r = vec![T::zero(); n];
        for j in 0..d2 {
            r[i * d2 + j] = T::one();
        }
        rows.push(r);
        rhs.push(T::one());
    }
    for j in 0..d2 {
        let mut r = vec![T::zero(); n];
        for i in 0..d1 {
            r[i * d2 + j] = T::one();
        }
        rows.push(r);
        rhs.push(T::one());
    }
    rows.push(vec![T::one(); n]);
    rhs.push(alpha);
    for k in 0..n {
        let mut r = vec![T::zero(); n];
        r[k] = -T::one();
        rows.push(r);
        rhs.push(T::zero());
    }
    let a_mat = DenseMatrix::from_rows(n, &rows)?;
    Polytope::new(a_mat, rhs, DenseMatrix::zeros(0, n), Vec::new())
}

/// Row and column sum equalities of a `c × c` matrix on row-major `vec(H)`,
/// before any rank reduction (`2c` rows, rank `2c − 1`).
pub fn birkhoff_equalities<T: Scalar>(c: usize) -> DenseMatrix<T> {
    let n = c * c;
    let mut m = DenseMatrix::zeros(2 * c, n);
    for i in 0..c {
        for j in 0..c {
            m.set(i, i * c + j, T::one());
            m.set(c + j, i * c + j, T::one());
        }
    }
    m
}

/// Birkhoff polytope of `c × c` doubly stochastic matrices, with the
/// equalities reduced to `2c − 1` independent rows.
pub fn make_birkhoff<T: Scalar>(c: usize) -> Result<Polytope<T>> {
    if c == 0 {
        return Err(Error::Input("Birkhoff size must be positive".into()));
    }
    let n = c * c;
    let mut a = DenseMatrix::zeros(n, n);
    for k in 0..n {
        a.set(k, k, -T::one());
    }
    Polytope::with_reduced_equalities(
        a,
        vec![T::zero(); n],
        birkhoff_equalities(c),
        vec![T::one(); 2 * c],
    )
}
