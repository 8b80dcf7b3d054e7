//! Backward pass of the projection layer.
//!
//! The Jacobian element used for backpropagation is the orthogonal projector
//! onto the complement of `range([A_Iᵀ Bᵀ])`, where `I` is the active set
//! identified by the forward solve:
//!
//! ```text
//!     J = I_n − H (HᵀH)⁺ Hᵀ = I_n − Q1 Q1ᵀ,   H = [A_Iᵀ Bᵀ]
//! ```
//!
//! It needs no multipliers, is symmetric, and is never materialized on the
//! hot path: [`HsFactor`] keeps only the orthonormal basis `Q1`.
//! [`hs_enumerate`] builds the whole finite family `{J_K}` over admissible
//! index sets `K` and is meant as a test oracle.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{check_len, Error, Result};
use crate::linalg::{
    lstsq_min_norm, orth_complement_apply, qr_pivoted, DenseMatrix, QrFactorization,
    DEFAULT_RANK_TOL,
};
use crate::polytope::Polytope;
use crate::qp::{default_tol, project, ProjectionResult};
use crate::scalar::Scalar;

/// Largest ambient dimension [`dense_jacobian`] will materialize.
pub const DENSE_MAX_N: usize = 64;

/// Largest active set [`hs_enumerate`] will enumerate subsets of.
pub const ENUMERATE_MAX_ACTIVE: usize = 12;

/// Implicit representation of `J = I − q1 q1ᵀ`.
#[derive(Clone, Debug)]
pub struct HsFactor<T> {
    active: Vec<usize>,
    qr: QrFactorization<T>,
    n: usize,
}

impl<T: Scalar> HsFactor<T> {
    pub fn active(&self) -> &[usize] {
        &self.active
    }

    pub fn q1(&self) -> &DenseMatrix<T> {
        self.qr.q1()
    }

    pub fn rank(&self) -> usize {
        self.qr.rank()
    }

    pub fn n(&self) -> usize {
        self.n
    }
}

/// `H_K = [A_Kᵀ Bᵀ]`, an `n × (|K| + l)` matrix.
fn constraint_normals<T: Scalar>(p: &Polytope<T>, k: &[usize]) -> DenseMatrix<T> {
    let mut cols: Vec<Vec<T>> = k.iter().map(|&i| p.a_mat().row(i).to_vec()).collect();
    cols.extend((0..p.l()).map(|j| p.b_mat().row(j).to_vec()));
    DenseMatrix::from_columns(p.n(), &cols).expect("finite constraint rows")
}

/// Builds the factor of `J(x)` from the active set of a forward solve.
pub fn hs_element<T: Scalar>(p: &Polytope<T>, result: &ProjectionResult<T>) -> Result<HsFactor<T>> {
    hs_element_for_active(p, &result.active)
}

/// Same as [`hs_element`] for an explicit active set.
pub fn hs_element_for_active<T: Scalar>(p: &Polytope<T>, active: &[usize]) -> Result<HsFactor<T>> {
    if let Some(&bad) = active.iter().find(|&&i| i >= p.m()) {
        return Err(Error::Input(format!("active index {bad} out of range")));
    }
    let h = constraint_normals(p, active);
    let qr = qr_pivoted(&h, T::lit(DEFAULT_RANK_TOL))?;
    Ok(HsFactor {
        active: active.to_vec(),
        qr,
        n: p.n(),
    })
}

/// `Jᵀ g = J g = g − q1 (q1ᵀ g)`.
pub fn vjp<T: Scalar>(f: &HsFactor<T>, g: &[T]) -> Result<Vec<T>> {
    check_len("cotangent", f.n, g.len())?;
    orth_complement_apply(&f.qr, g)
}

/// `J u`; identical to [`vjp`] since `J` is symmetric.
pub fn jvp<T: Scalar>(f: &HsFactor<T>, u: &[T]) -> Result<Vec<T>> {
    check_len("tangent", f.n, u.len())?;
    orth_complement_apply(&f.qr, u)
}

/// Materializes `J = I − q1 q1ᵀ`.
pub fn dense_jacobian<T: Scalar>(f: &HsFactor<T>) -> Result<DenseMatrix<T>> {
    if f.n > DENSE_MAX_N {
        return Err(Error::Size(format!(
            "refusing to materialize a {0}×{0} Jacobian (limit {DENSE_MAX_N})",
            f.n
        )));
    }
    projector_complement(f.qr.q1(), f.n)
}

fn projector_complement<T: Scalar>(q1: &DenseMatrix<T>, n: usize) -> Result<DenseMatrix<T>> {
    let qqt = q1.matmul(&q1.transpose())?;
    DenseMatrix::identity(n).sub(&qqt)
}

/// One member of the HS-Jacobian family.
#[derive(Clone, Debug)]
pub struct HsElement<T> {
    pub index_set: Vec<usize>,
    pub jacobian: DenseMatrix<T>,
}

#[derive(Clone, Debug)]
pub struct HsSet<T> {
    pub elements: Vec<HsElement<T>>,
}

/// Enumerates `{J_K : K ⊆ I(x)}` over index sets `K` for which `H_K` has full
/// column rank and some multiplier pair is supported on `K`. This is tested by
/// solving `H_K z = x − y` and requiring a consistent system with a
/// nonnegative inequality part.
pub fn hs_enumerate<T: Scalar>(
    p: &Polytope<T>,
    x: &[T],
    result: &ProjectionResult<T>,
) -> Result<HsSet<T>> {
    check_len("projection input", p.n(), x.len())?;
    check_len("projected point", p.n(), result.y.len())?;
    let active = &result.active;
    if active.len() > ENUMERATE_MAX_ACTIVE {
        return Err(Error::Size(format!(
            "active set of size {} exceeds the enumeration limit {ENUMERATE_MAX_ACTIVE}",
            active.len()
        )));
    }
    let n = p.n();
    let l = p.l();
    let target: Vec<T> = x.iter().zip(&result.y).map(|(&a, &b)| a - b).collect();
    let res_tol = T::lit(1e-9);
    let sign_tol = T::lit(-1e-12);
    let mut elements = Vec::new();
    for mask in 0u32..(1u32 << active.len()) {
        let k: Vec<usize> = active
            .iter()
            .enumerate()
            .filter(|(pos, _)| mask & (1 << pos) != 0)
            .map(|(_, &i)| i)
            .collect();
        let cols = k.len() + l;
        if cols > n {
            continue;
        }
        let h = constraint_normals(p, &k);
        let qr = qr_pivoted(&h, T::lit(DEFAULT_RANK_TOL))?;
        if qr.rank() < cols {
            continue;
        }
        if cols > 0 {
            let sol = lstsq_min_norm(&h, &target, T::lit(DEFAULT_RANK_TOL))?;
            if sol.residual > res_tol {
                continue;
            }
            if sol.x[..k.len()].iter().any(|&v| v < sign_tol) {
                continue;
            }
        } else if target.iter().any(|v| v.abs() > res_tol) {
            continue;
        }
        elements.push(HsElement {
            index_set: k,
            jacobian: projector_complement(qr.q1(), n)?,
        });
    }
    Ok(HsSet { elements })
}

/// Result of integrating the Jacobian field along a segment.
#[derive(Clone, Debug, PartialEq)]
pub struct PathIntegral<T> {
    /// Trapezoid estimate of `∫₀¹ J(γ(t)) (x1 − x0) dt`.
    pub integral: Vec<T>,
    /// `‖integral − (Π(x1) − Π(x0))‖∞`
    pub error: T,
    /// Number of active-set changes between consecutive nodes.
    pub breakpoints: usize,
}

/// Integrates `J` along `γ(t) = x0 + t (x1 − x0)` with the trapezoid rule on
/// `samples` equally spaced nodes and compares with `Π(x1) − Π(x0)`. The
/// error vanishes as `samples → ∞` because the Jacobian family is a
/// conservative field for the projection.
pub fn path_integral<T: Scalar>(
    p: &Polytope<T>,
    x0: &[T],
    x1: &[T],
    samples: usize,
) -> Result<PathIntegral<T>> {
    check_len("segment start", p.n(), x0.len())?;
    check_len("segment end", p.n(), x1.len())?;
    if samples < 2 {
        return Err(Error::Input(
            "path integral needs at least 2 samples".into(),
        ));
    }
    let d: Vec<T> = x1.iter().zip(x0).map(|(&b, &a)| b - a).collect();
    let h = T::one() / T::from_usize(samples - 1).unwrap();
    let mut acc = vec![T::zero(); p.n()];
    let mut point = vec![T::zero(); p.n()];
    let mut y0 = Vec::new();
    let mut prev_active: Option<Vec<usize>> = None;
    let mut breakpoints = 0;
    for k in 0..samples {
        let t = T::from_usize(k).unwrap() * h;
        for i in 0..point.len() {
            point[i] = x0[i] + t * d[i];
        }
        let res = project(p, &point, default_tol())?;
        let jd = jvp(&hs_element(p, &res)?, &d)?;
        let w = if k == 0 || k == samples - 1 {
            T::lit(0.5) * h
        } else {
            h
        };
        for (a, v) in acc.iter_mut().zip(jd) {
            *a += w * v;
        }
        if prev_active.as_ref().is_some_and(|a| *a != res.active) {
            breakpoints += 1;
        }
        if k == 0 {
            y0 = res.y.clone();
        }
        prev_active = Some(res.active);
    }
    // the last node x0 + 1·d may differ from x1 by a rounding
    let y1 = project(p, x1, default_tol())?.y;
    let error = acc
        .iter()
        .zip(y1.iter().zip(&y0))
        .fold(T::zero(), |m, (&g, (&b, &a))| m.max((g - (b - a)).abs()));
    Ok(PathIntegral {
        integral: acc,
        error,
        breakpoints,
    })
}

/// Random segment near the boundary: a center `Π(w + z)` on a face of the
/// polytope (`w` the stored witness, `z` standard normal) and endpoints
/// `center + scale · z'` drawn independently.
pub fn random_segment<R: Rng>(
    rng: &mut R,
    p: &Polytope<f64>,
    scale: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = p.n();
    let normal = |rng: &mut R| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(rng)).collect() };
    let z = normal(rng);
    let start: Vec<f64> = p.witness().iter().zip(&z).map(|(w, z)| w + z).collect();
    let center = project(p, &start, default_tol())?.y;
    let endpoint = |rng: &mut R| -> Vec<f64> {
        center
            .iter()
            .zip(normal(rng))
            .map(|(c, z)| c + scale * z)
            .collect()
    };
    let x0 = endpoint(rng);
    let x1 = endpoint(rng);
    Ok((x0, x1))
}
