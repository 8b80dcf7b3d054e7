//! Seeded random instance generators shared by unit, integration and
//! acceptance tests.

use rand::Rng;

use crate::linalg::DenseMatrix;
use crate::polytope::Polytope;

/// Random nonempty polytope with `n ≤ max_n`, `m ≤ max_m`, `l ≤ max_l`
/// (and `l < n`). Roughly a third of the inequalities pass through a common
/// interior seed point, which produces degenerate active sets.
pub fn random_polytope<R: Rng>(
    rng: &mut R,
    max_n: usize,
    max_m: usize,
    max_l: usize,
) -> Polytope<f64> {
    loop {
        let n = rng.random_range(1..=max_n);
        let m = rng.random_range(0..=max_m);
        let l = rng.random_range(0..=max_l.min(n - 1));
        let y0: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let a: Vec<f64> = (0..m * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let a_mat = DenseMatrix::new(m, n, a).unwrap();
        let a_vec: Vec<f64> = a_mat
            .matvec(&y0)
            .unwrap()
            .into_iter()
            .map(|v| {
                if rng.random_bool(0.3) {
                    v
                } else {
                    v + rng.random_range(0.0..1.0)
                }
            })
            .collect();
        let b: Vec<f64> = (0..l * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b_mat = DenseMatrix::new(l, n, b).unwrap();
        let b_vec = b_mat.matvec(&y0).unwrap();
        if let Ok(p) = Polytope::new(a_mat, a_vec, b_mat, b_vec) {
            return p;
        }
    }
}

/// Uniform point in `[-scale, scale]^n`.
pub fn random_point<R: Rng>(rng: &mut R, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}
