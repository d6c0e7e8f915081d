//! Square SVD by one-sided Jacobi rotations.
//!
//! Exact on rank-deficient input: columns of `U` for zero singular values are
//! completed to an orthonormal basis, so `U·diag(σ)·Vᵀ` always reconstructs.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 100;

/// `(U, σ, Vᵀ)` of a square matrix with `σ` sorted descending.
pub fn svd(a: &DMatrix<f64>) -> Result<(DMatrix<f64>, Vec<f64>, DMatrix<f64>)> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::Dimension(format!(
            "svd expects a square matrix, got {}×{}",
            n,
            a.ncols()
        )));
    }
    if a.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("svd input is not finite".into()));
    }
    let mut w = a.clone();
    let mut v = DMatrix::<f64>::identity(n, n);
    let mut converged = n < 2;
    for _ in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (cp, cq) = (w.column(p), w.column(q));
                let alpha = cp.norm_squared();
                let beta = cq.norm_squared();
                let gamma = cp.dot(&cq);
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut w, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        converged = !rotated;
    }
    if !converged {
        return Err(Error::Numeric(format!(
            "svd did not converge in {MAX_SWEEPS} sweeps"
        )));
    }

    let mut order: Vec<(f64, usize)> = (0..n).map(|j| (w.column(j).norm(), j)).collect();
    order.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
    let sigma_max = order.first().map_or(0.0, |o| o.0);
    let tol = sigma_max * f64::EPSILON * n as f64;

    let mut u = DMatrix::<f64>::zeros(n, n);
    let mut vt = DMatrix::<f64>::zeros(n, n);
    let mut sigma = Vec::with_capacity(n);
    let mut filled = 0;
    for (k, &(s, j)) in order.iter().enumerate() {
        vt.row_mut(k).copy_from(&v.column(j).transpose());
        if s > tol {
            u.set_column(k, &(w.column(j) / s));
            sigma.push(s);
            filled = k + 1;
        } else {
            sigma.push(0.0);
        }
    }
    complete_basis(&mut u, filled);
    Ok((u, sigma, vt))
}

fn rotate(m: &mut DMatrix<f64>, p: usize, q: usize, c: f64, s: f64) {
    for i in 0..m.nrows() {
        let (x, y) = (m[(i, p)], m[(i, q)]);
        m[(i, p)] = c * x - s * y;
        m[(i, q)] = s * x + c * y;
    }
}

/// Fills columns `filled..n` with unit vectors orthogonal to all before them.
fn complete_basis(u: &mut DMatrix<f64>, filled: usize) {
    let n = u.nrows();
    let mut k = filled;
    for e in 0..n {
        if k == n {
            break;
        }
        let mut x = DMatrix::<f64>::zeros(n, 1);
        x[e] = 1.0;
        // Two passes of Gram-Schmidt keep the result orthogonal to rounding.
        for _ in 0..2 {
            for j in 0..k {
                let d = u.column(j).dot(&x.column(0));
                x.column_mut(0).axpy(-d, &u.column(j), 1.0);
            }
        }
        let norm = x.norm();
        if norm > 1e-8 {
            u.set_column(k, &(x.column(0) / norm));
            k += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn low_rank(n: usize, k: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = DMatrix::zeros(n, n);
        for _ in 0..k {
            let a = DMatrix::<f64>::from_fn(n, 1, |_, _| StandardNormal.sample(&mut rng));
            let b = DMatrix::<f64>::from_fn(1, n, |_, _| StandardNormal.sample(&mut rng));
            m += a * b;
        }
        m
    }

    fn check(m: &DMatrix<f64>) {
        let n = m.nrows();
        let (u, s, vt) = svd(m).unwrap();
        let rec = &u * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(s.clone())) * &vt;
        let scale = m.abs().max().max(1.0);
        assert!((rec - m).abs().max() <= 1e-10 * scale);
        let eye = DMatrix::<f64>::identity(n, n);
        assert!((u.transpose() * &u - &eye).abs().max() < 1e-10);
        assert!((&vt * vt.transpose() - &eye).abs().max() < 1e-10);
        assert!(s.windows(2).all(|w| w[0] >= w[1]));
        assert!(s.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn rank_one_twelve() {
        let m = low_rank(12, 1, 3);
        check(&m);
        let (_, s, _) = svd(&m).unwrap();
        assert!(s[1] < 1e-10 * s[0]);
    }

    #[test]
    fn zero_and_identity() {
        check(&DMatrix::zeros(5, 5));
        check(&DMatrix::identity(4, 4));
        let (_, s, _) = svd(&DMatrix::<f64>::zeros(1, 1)).unwrap();
        assert_eq!(s, vec![0.0]);
    }

    #[test]
    fn rejects_non_square_and_nan() {
        assert!(svd(&DMatrix::zeros(2, 3)).is_err());
        let mut m = DMatrix::zeros(2, 2);
        m[(0, 1)] = f64::NAN;
        assert!(svd(&m).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn reconstructs_low_rank(n in 1usize..18, k in 0usize..4, seed in any::<u64>()) {
            check(&low_rank(n, k.min(n), seed));
        }

        #[test]
        fn reconstructs_full_rank(n in 1usize..18, seed in any::<u64>()) {
            check(&low_rank(n, n, seed));
        }
    }
}
