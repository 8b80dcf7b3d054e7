//! Euclidean projection onto a polytope:
//!
//! ```text
//!     minimize   ½‖y − x‖²
//!     subject to A y ≤ a,  B y = b
//! ```
//!
//! The solver is a Goldfarb–Idnani style dual active-set method specialized
//! to the identity Hessian. It starts from the projection onto the affine
//! hull of the equalities, then repeatedly adds the most violated inequality,
//! taking partial steps that drop working constraints whose multipliers would
//! turn negative. The working set stays linearly independent throughout, and
//! the final point is re-solved from the working set to clean up drift.

use crate::error::{check_len, Error, Result};
use crate::linalg::{dot, lstsq_min_norm, norm2, norm_inf, qr_pivoted, DenseMatrix};
use crate::polytope::Polytope;
use crate::scalar::Scalar;

/// Default solver tolerance.
pub const DEFAULT_TOL: f64 = 1e-10;

/// Relative active-set identification tolerance:
/// constraint `i` is active when `|A_i y − a_i| ≤ eps · (1 + |a_i|)`.
pub const DEFAULT_EPS_ACT: f64 = 1e-9;

/// Default tolerance adjusted to the precision of `T`.
pub fn default_tol<T: Scalar>() -> T {
    T::lit(DEFAULT_TOL).max(T::epsilon() * T::lit(100.0))
}

/// Largest inequality count accepted by [`project_bruteforce`].
pub const BRUTEFORCE_MAX_M: usize = 16;

#[derive(Clone, Debug)]
pub struct ProjectionOptions<T> {
    pub tol: T,
    pub eps_act: T,
    /// Defaults to `50 · (m + l + n)`.
    pub max_iter: Option<usize>,
    /// Inequality indices to try as the initial working set.
    pub warm_start: Option<Vec<usize>>,
}

impl<T: Scalar> Default for ProjectionOptions<T> {
    fn default() -> Self {
        Self {
            tol: T::lit(DEFAULT_TOL),
            eps_act: T::lit(DEFAULT_EPS_ACT),
            max_iter: None,
            warm_start: None,
        }
    }
}

impl<T: Scalar> ProjectionOptions<T> {
    pub fn with_tol(tol: T) -> Self {
        Self {
            tol,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug)]
pub struct ProjectionResult<T> {
    /// The projected point.
    pub y: Vec<T>,
    /// Inequality multipliers, length m.
    pub lambda: Vec<T>,
    /// Equality multipliers, length l.
    pub mu: Vec<T>,
    /// Inequalities holding with equality at `y`, increasing.
    pub active: Vec<usize>,
    /// Linearly independent inequalities the solver ended with; a subset of
    /// `active` up to tolerance. Usable as a warm start.
    pub working_set: Vec<usize>,
    pub kkt_residual: T,
    pub iterations: usize,
}

/// Projects `x` onto `p` with default options at tolerance `tol`.
pub fn project<T: Scalar>(p: &Polytope<T>, x: &[T], tol: T) -> Result<ProjectionResult<T>> {
    project_with(p, x, &ProjectionOptions::with_tol(tol))
}

/// Equality-constrained projection onto `{N_kᵀ y = rhs_k}`: returns `y` and
/// the multipliers `ν` with `y − x + N ν = 0`.
struct Solved<T> {
    y: Vec<T>,
    nu: Vec<T>,
}

/// Working-set bookkeeping: equalities come first and are never dropped.
struct Working<'a, T> {
    p: &'a Polytope<T>,
    ineq: Vec<usize>,
}

impl<T: Scalar> Working<'_, T> {
    fn len(&self) -> usize {
        self.p.l() + self.ineq.len()
    }

    fn normals(&self) -> DenseMatrix<T> {
        let n = self.p.n();
        let mut cols: Vec<Vec<T>> = Vec::with_capacity(self.len());
        for k in 0..self.p.l() {
            cols.push(self.p.b_mat().row(k).to_vec());
        }
        for &i in &self.ineq {
            cols.push(self.p.a_mat().row(i).to_vec());
        }
        DenseMatrix::from_columns(n, &cols).expect("finite normals")
    }

    fn rhs(&self) -> Vec<T> {
        let mut r = self.p.b_vec().to_vec();
        r.extend(self.ineq.iter().map(|&i| self.p.a_vec()[i]));
        r
    }

    /// Solves the equality-constrained projection for the current working set.
    fn solve(&self, x: &[T]) -> Option<Solved<T>> {
        let q = self.len();
        if q == 0 {
            return Some(Solved {
                y: x.to_vec(),
                nu: Vec::new(),
            });
        }
        let nmat = self.normals();
        let f = qr_pivoted(&nmat, T::lit(1e-13)).ok()?;
        if f.rank() < q {
            return None;
        }
        // NᵀN ν = Nᵀx − rhs with N P = Q1 R  ⇒  ν = P (RᵀR)⁻¹ Pᵀ c
        let piv = f.pivot();
        let r = f.r();
        let normal_solve = |c: &[T]| -> Vec<T> {
            let mut s = vec![T::zero(); q];
            for i in 0..q {
                let mut acc = c[piv[i]];
                for (j, &sj) in s.iter().enumerate().take(i) {
                    acc -= r.get(j, i) * sj;
                }
                s[i] = acc / r.get(i, i);
            }
            let mut w = vec![T::zero(); q];
            for i in (0..q).rev() {
                let mut acc = s[i];
                for j in i + 1..q {
                    acc -= r.get(i, j) * w[j];
                }
                w[i] = acc / r.get(i, i);
            }
            let mut nu = vec![T::zero(); q];
            for (k, &pk) in piv.iter().enumerate() {
                nu[pk] = w[k];
            }
            nu
        };
        let rhs = self.rhs();
        let ntx = nmat.tr_matvec(x).ok()?;
        let c: Vec<T> = ntx.iter().zip(&rhs).map(|(&a, &b)| a - b).collect();
        let mut nu = normal_solve(&c);
        let corr = nmat.matvec(&nu).ok()?;
        let mut y: Vec<T> = x.iter().zip(&corr).map(|(&a, &b)| a - b).collect();
        // two rounds of refinement on the constraint residual Nᵀy − rhs
        for _ in 0..2 {
            let nty = nmat.tr_matvec(&y).ok()?;
            let e: Vec<T> = nty.iter().zip(&rhs).map(|(&a, &b)| a - b).collect();
            let d = normal_solve(&e);
            let corr = nmat.matvec(&d).ok()?;
            for (yi, ci) in y.iter_mut().zip(&corr) {
                *yi -= *ci;
            }
            for (ni, di) in nu.iter_mut().zip(&d) {
                *ni += *di;
            }
        }
        Some(Solved { y, nu })
    }
}

fn scaled_tol<T: Scalar>(tol: T, rhs: T) -> T {
    tol * (T::one() + rhs.abs())
}

/// Most violated inequality outside the working set; ties go to the lowest index.
fn most_violated<T: Scalar>(p: &Polytope<T>, y: &[T], working: &[usize], tol: T) -> Option<usize> {
    let mut best: Option<(usize, T)> = None;
    for i in 0..p.m() {
        if working.contains(&i) {
            continue;
        }
        let s = dot(p.a_mat().row(i), y) - p.a_vec()[i];
        if s > scaled_tol(tol, p.a_vec()[i]) && best.is_none_or(|(_, bs)| s > bs) {
            best = Some((i, s));
        }
    }
    best.map(|(i, _)| i)
}

/// Full solver with options. See the module docs for the method.
pub fn project_with<T: Scalar>(
    p: &Polytope<T>,
    x: &[T],
    opts: &ProjectionOptions<T>,
) -> Result<ProjectionResult<T>> {
    check_len("projection input", p.n(), x.len())?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("non-finite projection input".into()));
    }
    if !(opts.tol > T::zero()) {
        return Err(Error::Input("tolerance must be positive".into()));
    }
    let (n, m, l) = (p.n(), p.m(), p.l());
    let tol = opts.tol;
    let cap = opts.max_iter.unwrap_or(50 * (m + l + n));

    if let Some(ws) = &opts.warm_start {
        if let Some(res) = try_warm_start(p, x, ws, opts) {
            return Ok(res);
        }
    }

    let mut work = Working {
        p,
        ineq: Vec::new(),
    };
    let start = work.solve(x).ok_or_else(|| {
        Error::Input("equality constraints are numerically rank deficient".into())
    })?;
    let mut y = start.y;
    // multipliers of the working inequalities, aligned with `work.ineq`
    let mut u: Vec<T> = Vec::new();
    let mut iterations = 0usize;
    let lin_dep = T::lit(1e-10);

    while let Some(pidx) = most_violated(p, &y, &work.ineq, tol) {
        let c = p.a_mat().row(pidx).to_vec();
        let c_norm = norm2(&c);
        let mut t_p = T::zero();
        loop {
            iterations += 1;
            if iterations > cap {
                let residual = p.feasibility_violation(&y)?.v_all.sqrt().as_f64();
                return Err(Error::Convergence {
                    iterations: cap,
                    residual,
                    best: y.iter().map(|v| v.as_f64()).collect(),
                });
            }
            // z = (I − Q1Q1ᵀ)c, r = N⁺c
            let (z, r) = if work.len() == 0 {
                (c.clone(), Vec::new())
            } else {
                let nmat = work.normals();
                let f = qr_pivoted(&nmat, T::lit(1e-14))?;
                let z = crate::linalg::orth_complement_apply(&f, &c)?;
                let r = match f.solve_full_rank(&c)? {
                    Some(r) => r,
                    None => lstsq_min_norm(&nmat, &c, T::lit(1e-14))?.x,
                };
                (z, r)
            };
            // partial step: the first working inequality whose multiplier hits zero
            let mut t1: Option<(T, usize)> = None;
            for (pos, &i) in work.ineq.iter().enumerate() {
                let rj = r[l + pos];
                if rj > T::zero() {
                    let ratio = u[pos] / rj;
                    let better = match t1 {
                        None => true,
                        Some((bt, bpos)) => ratio < bt || (ratio == bt && i < work.ineq[bpos]),
                    };
                    if better {
                        t1 = Some((ratio, pos));
                    }
                }
            }
            let zz = dot(&z, &z);
            let dependent = norm2(&z) <= lin_dep * c_norm;
            if dependent {
                let Some((t, pos)) = t1 else {
                    return Err(Error::Infeasible(format!(
                        "inequality {pidx} cannot be satisfied together with the working set"
                    )));
                };
                for (j, uj) in u.iter_mut().enumerate() {
                    *uj -= t * r[l + j];
                }
                t_p += t;
                work.ineq.remove(pos);
                u.remove(pos);
                continue;
            }
            let s_p = dot(&c, &y) - p.a_vec()[pidx];
            let t2 = s_p / zz;
            let (t, block) = match t1 {
                Some((t1v, pos)) if t1v < t2 => (t1v, Some(pos)),
                _ => (t2, None),
            };
            for (yi, &zi) in y.iter_mut().zip(&z) {
                *yi -= t * zi;
            }
            for (j, uj) in u.iter_mut().enumerate() {
                *uj -= t * r[l + j];
            }
            t_p += t;
            match block {
                None => {
                    work.ineq.push(pidx);
                    u.push(t_p);
                    break;
                }
                Some(pos) => {
                    work.ineq.remove(pos);
                    u.remove(pos);
                }
            }
        }
    }

    let ws = work.ineq.clone();
    finish(p, x, y, &ws, iterations, opts)
}

/// Re-solves from a working set and packages the result.
fn finish<T: Scalar>(
    p: &Polytope<T>,
    x: &[T],
    fallback_y: Vec<T>,
    working: &[usize],
    iterations: usize,
    opts: &ProjectionOptions<T>,
) -> Result<ProjectionResult<T>> {
    let work = Working {
        p,
        ineq: working.to_vec(),
    };
    let y = match work.solve(x) {
        Some(s) if p.contains(&s.y, opts.tol * T::lit(10.0)) => s.y,
        _ => fallback_y,
    };
    // multipliers by least squares on the working normals against x − y
    let (lambda, mu) = recover_multipliers(p, x, &y, working)?;
    let mut res = ProjectionResult {
        active: active_set(p, &y, opts.eps_act),
        y,
        lambda,
        mu,
        working_set: {
            let mut w = working.to_vec();
            w.sort_unstable();
            w
        },
        kkt_residual: T::zero(),
        iterations,
    };
    res.kkt_residual = kkt_residual(p, x, &res)?;
    Ok(res)
}

fn recover_multipliers<T: Scalar>(
    p: &Polytope<T>,
    x: &[T],
    y: &[T],
    working: &[usize],
) -> Result<(Vec<T>, Vec<T>)> {
    let mut lambda = vec![T::zero(); p.m()];
    let mut mu = vec![T::zero(); p.l()];
    let work = Working {
        p,
        ineq: working.to_vec(),
    };
    if work.len() == 0 {
        return Ok((lambda, mu));
    }
    let rhs: Vec<T> = x.iter().zip(y).map(|(&a, &b)| a - b).collect();
    let sol = lstsq_min_norm(&work.normals(), &rhs, T::lit(1e-13))?;
    mu.copy_from_slice(&sol.x[..p.l()]);
    for (pos, &i) in working.iter().enumerate() {
        lambda[i] = sol.x[p.l() + pos];
    }
    Ok((lambda, mu))
}

fn try_warm_start<T: Scalar>(
    p: &Polytope<T>,
    x: &[T],
    ws: &[usize],
    opts: &ProjectionOptions<T>,
) -> Option<ProjectionResult<T>> {
    if ws.iter().any(|&i| i >= p.m()) {
        return None;
    }
    let work = Working {
        p,
        ineq: ws.to_vec(),
    };
    let s = work.solve(x)?;
    if s.nu[p.l()..].iter().any(|&v| v < -opts.tol) {
        return None;
    }
    if most_violated(p, &s.y, ws, opts.tol).is_some() {
        return None;
    }
    finish(p, x, s.y, ws, 0, opts).ok()
}

/// Inequalities with `|A_i y − a_i| ≤ eps_act · (1 + |a_i|)`.
pub fn active_set<T: Scalar>(p: &Polytope<T>, y: &[T], eps_act: T) -> Vec<usize> {
    (0..p.m())
        .filter(|&i| {
            let s = dot(p.a_mat().row(i), y) - p.a_vec()[i];
            s.abs() <= scaled_tol(eps_act, p.a_vec()[i])
        })
        .collect()
}

/// Worst violation of the optimality conditions: stationarity (∞-norm),
/// primal violation `√v_all`, dual negativity, complementarity.
pub fn kkt_residual<T: Scalar>(p: &Polytope<T>, x: &[T], res: &ProjectionResult<T>) -> Result<T> {
    check_len("projection input", p.n(), x.len())?;
    check_len("projected point", p.n(), res.y.len())?;
    check_len("inequality multipliers", p.m(), res.lambda.len())?;
    check_len("equality multipliers", p.l(), res.mu.len())?;
    let atl = p.a_mat().tr_matvec(&res.lambda)?;
    let btm = p.b_mat().tr_matvec(&res.mu)?;
    let stat: Vec<T> = (0..p.n())
        .map(|k| res.y[k] - x[k] + atl[k] + btm[k])
        .collect();
    let stationarity = norm_inf(&stat);
    let primal = p.feasibility_violation(&res.y)?.v_all.sqrt();
    let dual = res
        .lambda
        .iter()
        .fold(T::zero(), |acc, &v| acc.max((-v).max(T::zero())));
    let comp = (0..p.m()).fold(T::zero(), |acc, i| {
        let s = dot(p.a_mat().row(i), &res.y) - p.a_vec()[i];
        acc.max((res.lambda[i] * s).abs())
    });
    Ok(stationarity.max(primal).max(dual).max(comp))
}

/// Exhaustive oracle: for every subset `S` of the inequalities, solves the
/// KKT system with `A_S` and `B` as equalities by minimum-norm least squares,
/// keeps candidates that are primal feasible with `λ_S ≥ −1e-12`, and
/// returns the one nearest to `x`.
pub fn project_bruteforce<T: Scalar>(p: &Polytope<T>, x: &[T]) -> Result<ProjectionResult<T>> {
    check_len("projection input", p.n(), x.len())?;
    let (n, m, l) = (p.n(), p.m(), p.l());
    if m > BRUTEFORCE_MAX_M {
        return Err(Error::Size(format!(
            "brute-force projection supports at most {BRUTEFORCE_MAX_M} inequalities, got {m}"
        )));
    }
    let feas_tol = T::lit(1e-10);
    let mut best: Option<(T, Vec<T>, Vec<T>, Vec<T>)> = None;
    for mask in 0u32..(1u32 << m) {
        let subset: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
        let q = l + subset.len();
        // [ I  N ] [y]   [x  ]
        // [ Nᵀ 0 ] [ν] = [rhs]
        let dim = n + q;
        let mut kkt = DenseMatrix::zeros(dim, dim);
        let mut rhs = vec![T::zero(); dim];
        for i in 0..n {
            kkt.set(i, i, T::one());
            rhs[i] = x[i];
        }
        for k in 0..q {
            let (row, b) = if k < l {
                (p.b_mat().row(k), p.b_vec()[k])
            } else {
                let i = subset[k - l];
                (p.a_mat().row(i), p.a_vec()[i])
            };
            for j in 0..n {
                kkt.set(j, n + k, row[j]);
                kkt.set(n + k, j, row[j]);
            }
            rhs[n + k] = b;
        }
        let sol = lstsq_min_norm(&kkt, &rhs, T::lit(1e-12))?;
        if sol.residual > T::lit(1e-9) * (T::one() + norm2(&rhs)) {
            continue;
        }
        let y = sol.x[..n].to_vec();
        let nu = &sol.x[n..];
        if nu[l..].iter().any(|&v| v < T::lit(-1e-12)) {
            continue;
        }
        let feasible = (0..m).all(|i| {
            dot(p.a_mat().row(i), &y) - p.a_vec()[i] <= scaled_tol(feas_tol, p.a_vec()[i])
        }) && (0..l).all(|k| {
            (dot(p.b_mat().row(k), &y) - p.b_vec()[k]).abs() <= scaled_tol(feas_tol, p.b_vec()[k])
        });
        if !feasible {
            continue;
        }
        let dist: T = y.iter().zip(x).map(|(&a, &b)| (a - b) * (a - b)).sum();
        if best.as_ref().is_none_or(|(d, ..)| dist < *d) {
            let mut lambda = vec![T::zero(); m];
            for (pos, &i) in subset.iter().enumerate() {
                lambda[i] = nu[l + pos];
            }
            best = Some((dist, y, lambda, nu[..l].to_vec()));
        }
    }
    let (_, y, lambda, mu) = best.ok_or_else(|| {
        Error::Infeasible("no subset of inequalities yields a feasible KKT point".into())
    })?;
    let mut res = ProjectionResult {
        active: active_set(p, &y, T::lit(DEFAULT_EPS_ACT)),
        working_set: Vec::new(),
        y,
        lambda,
        mu,
        kkt_residual: T::zero(),
        iterations: 1 << m,
    };
    res.kkt_residual = kkt_residual(p, x, &res)?;
    Ok(res)
}
