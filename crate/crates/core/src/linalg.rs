//! Dense symmetric linear algebra used by the estimation stages.
//!
//! Everything here works on small matrices (dimension at most a few hundred)
//! and is routed through the symmetric eigendecomposition, which is both the
//! Moore–Penrose route for PSD matrices and the fallback for the power
//! iteration.

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, SlimError};
use crate::scalar::Scalar;

/// Relative eigenvalue cutoff for pseudo-inverses, as a fraction of the
/// largest eigenvalue magnitude.
pub const PINV_REL_TOL: f64 = 1e-10;

/// Eigenvalue floor used for symmetric square roots.
pub const SQRT_EIGEN_FLOOR: f64 = 1e-12;

const POWER_ITER_TOL: f64 = 1e-10;
const POWER_ITER_CAP: usize = 500;

/// Symmetric part `(m + m') / 2`.
pub fn symmetrize<T: Scalar>(m: &DMatrix<T>) -> DMatrix<T> {
    let half = T::lit(0.5);
    (m + m.transpose()) * half
}

/// Pseudo-inverse of a symmetric matrix together with its achieved rank.
#[derive(Debug, Clone)]
pub struct SymPinv<T: Scalar> {
    pub matrix: DMatrix<T>,
    pub rank: usize,
    pub max_eigenvalue: T,
    pub min_kept_eigenvalue: T,
}

/// Moore–Penrose inverse of a symmetric matrix, truncating eigenvalues whose
/// magnitude falls below `rel_tol * max |λ|`.
pub fn pinv_sym_with_tol<T: Scalar>(m: &DMatrix<T>, rel_tol: f64) -> SymPinv<T> {
    let n = m.nrows();
    assert_eq!(n, m.ncols(), "pinv_sym needs a square matrix");
    let eig = symmetrize(m).symmetric_eigen();
    let lam_max = eig
        .eigenvalues
        .iter()
        .fold(T::zero(), |acc, &v| acc.max(v.abs()));
    let cutoff = lam_max * T::lit(rel_tol);
    let mut out = DMatrix::<T>::zeros(n, n);
    let mut rank = 0;
    let mut min_kept = lam_max;
    for (k, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam_max > T::zero() && lam.abs() > cutoff {
            rank += 1;
            min_kept = min_kept.min(lam.abs());
            let v = eig.eigenvectors.column(k);
            out.ger(T::one() / lam, &v, &v, T::one());
        }
    }
    SymPinv {
        matrix: symmetrize(&out),
        rank,
        max_eigenvalue: lam_max,
        min_kept_eigenvalue: min_kept,
    }
}

pub fn pinv_sym<T: Scalar>(m: &DMatrix<T>) -> SymPinv<T> {
    pinv_sym_with_tol(m, PINV_REL_TOL)
}

/// Symmetric square root of a symmetric PSD matrix. Eigenvalues below
/// [`SQRT_EIGEN_FLOOR`] are raised to the floor.
pub fn sym_sqrt<T: Scalar>(m: &DMatrix<T>) -> DMatrix<T> {
    let n = m.nrows();
    let eig = symmetrize(m).symmetric_eigen();
    let floor = T::lit(SQRT_EIGEN_FLOOR);
    let mut out = DMatrix::<T>::zeros(n, n);
    for (k, &lam) in eig.eigenvalues.iter().enumerate() {
        let v = eig.eigenvectors.column(k);
        out.ger(lam.max(floor).sqrt(), &v, &v, T::one());
    }
    symmetrize(&out)
}

/// Largest eigenvalue of a symmetric PSD matrix, i.e. its spectral norm.
///
/// Power iteration with relative tolerance 1e-10 and a 500 step cap; falls
/// back to the full eigendecomposition when the iteration has not settled.
pub fn spectral_norm_psd<T: Scalar>(m: &DMatrix<T>) -> T {
    let n = m.nrows();
    if n == 0 {
        return T::zero();
    }
    match power_iteration(m) {
        Some(v) => v,
        None => eigen_max_abs(m),
    }
}

fn power_iteration<T: Scalar>(m: &DMatrix<T>) -> Option<T> {
    let n = m.nrows();
    // Deterministic start with a component along every axis.
    let mut v = DVector::<T>::from_fn(n, |i, _| T::one() + T::from_count(i) * T::lit(1e-3));
    v /= v.norm();
    let mut lambda = T::zero();
    let tol = T::lit(POWER_ITER_TOL);
    for _ in 0..POWER_ITER_CAP {
        let w = m * &v;
        let norm = w.norm();
        if norm == T::zero() {
            return Some(T::zero());
        }
        let next = v.dot(&w);
        v = w / norm;
        if (next - lambda).abs() <= tol * next.abs() {
            return Some(next);
        }
        lambda = next;
    }
    None
}

/// Largest absolute eigenvalue via the full symmetric eigendecomposition.
pub fn eigen_max_abs<T: Scalar>(m: &DMatrix<T>) -> T {
    symmetrize(m)
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .fold(T::zero(), |acc, &v| acc.max(v.abs()))
}

/// Solution of `m x = rhs` for symmetric positive definite `m`.
///
/// Returns the solution and the spectral condition number of `m`; errors
/// when `m` is not positive definite.
pub fn solve_spd<T: Scalar>(m: &DMatrix<T>, rhs: &DVector<T>) -> Result<(DVector<T>, T)> {
    let sym = symmetrize(m);
    let eig = sym.clone().symmetric_eigen();
    let (mut lo, mut hi) = (T::max_value().unwrap_or(T::one()), T::zero());
    for &l in eig.eigenvalues.iter() {
        lo = lo.min(l);
        hi = hi.max(l);
    }
    if !(lo > T::zero()) {
        return Err(SlimError::Inference(format!(
            "matrix is not positive definite (smallest eigenvalue {})",
            lo.as_f64()
        )));
    }
    let chol = sym
        .cholesky()
        .ok_or_else(|| SlimError::Inference("Cholesky factorisation failed".into()))?;
    Ok((chol.solve(rhs), hi / lo))
}

/// Inverse of a symmetric positive definite matrix.
pub fn inverse_spd<T: Scalar>(m: &DMatrix<T>) -> Result<DMatrix<T>> {
    let n = m.nrows();
    let chol = symmetrize(m).cholesky().ok_or_else(|| {
        SlimError::Inference("matrix is not positive definite".into())
    })?;
    Ok(symmetrize(&chol.solve(&DMatrix::identity(n, n))))
}

/// Smallest over largest singular value; 0 for an all-zero matrix.
pub fn singular_value_ratio<T: Scalar>(m: &DMatrix<T>) -> T {
    let sv = m.clone().svd(false, false).singular_values;
    let hi = sv.iter().fold(T::zero(), |a, &s| a.max(s));
    let lo = sv.iter().fold(hi, |a, &s| a.min(s));
    if hi == T::zero() {
        T::zero()
    } else {
        lo / hi
    }
}

/// Neumaier compensated summation over a fixed-shape buffer.
#[derive(Debug, Clone)]
pub struct CompensatedSum<T: Scalar> {
    sum: Vec<T>,
    carry: Vec<T>,
}

impl<T: Scalar> CompensatedSum<T> {
    pub fn zeros(len: usize) -> Self {
        Self {
            sum: vec![T::zero(); len],
            carry: vec![T::zero(); len],
        }
    }

    pub fn len(&self) -> usize {
        self.sum.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sum.is_empty()
    }

    pub fn add_at(&mut self, i: usize, x: T) {
        let s = self.sum[i];
        let t = s + x;
        if s.abs() >= x.abs() {
            self.carry[i] += (s - t) + x;
        } else {
            self.carry[i] += (x - t) + s;
        }
        self.sum[i] = t;
    }

    pub fn value(&self, i: usize) -> T {
        self.sum[i] + self.carry[i]
    }

    pub fn values(&self) -> Vec<T> {
        (0..self.len()).map(|i| self.value(i)).collect()
    }
}

/// Lower median (the `⌊(m-1)/2⌋`-th order statistic) of a non-empty slice.
pub fn lower_median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Some(v[(v.len() - 1) / 2])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn spd(n: usize, seed: u64) -> DMatrix<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::<f64>::from_fn(n, n + 2, |_, _| rng.random::<f64>() - 0.5);
        &a * a.transpose()
    }

    #[test]
    fn pinv_matches_inverse_on_full_rank() {
        let m = spd(5, 1);
        let p = pinv_sym(&m);
        assert_eq!(p.rank, 5);
        let inv = m.clone().try_inverse().unwrap();
        assert_relative_eq!(p.matrix, inv, epsilon = 1e-8, max_relative = 1e-8);
    }

    #[test]
    fn pinv_identity_on_rank_deficient() {
        let v = DVector::from_vec(vec![1.0, 2.0, -1.0]);
        let m = &v * v.transpose();
        let p = pinv_sym(&m);
        assert_eq!(p.rank, 1);
        let back = &p.matrix * &m * &p.matrix;
        assert_relative_eq!(back, p.matrix, epsilon = 1e-12);
    }

    #[test]
    fn pinv_of_zero_is_zero() {
        let p = pinv_sym(&DMatrix::<f64>::zeros(3, 3));
        assert_eq!(p.rank, 0);
        assert!(p.matrix.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn sqrt_squares_back() {
        let m = spd(4, 2);
        let r = sym_sqrt(&m);
        assert_relative_eq!(&r * &r, m, epsilon = 1e-10);
    }

    #[test]
    fn power_iteration_agrees_with_eigendecomposition() {
        for seed in 0..10 {
            let m = spd(6, seed);
            let p = spectral_norm_psd(&m);
            let e = eigen_max_abs(&m);
            assert_relative_eq!(p, e, max_relative = 1e-8);
        }
    }

    #[test]
    fn spectral_norm_of_identity_is_one() {
        assert_relative_eq!(spectral_norm_psd(&DMatrix::<f64>::identity(4, 4)), 1.0);
    }

    #[test]
    fn solve_spd_rejects_indefinite() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(solve_spd(&m, &DVector::from_vec(vec![1.0, 1.0])).is_err());
    }

    #[test]
    fn compensated_sum_beats_naive_on_cancellation() {
        let mut s = CompensatedSum::<f64>::zeros(1);
        s.add_at(0, 1e16);
        for _ in 0..10 {
            s.add_at(0, 1.0);
        }
        s.add_at(0, -1e16);
        assert_eq!(s.value(0), 10.0);
    }

    #[test]
    fn lower_median_even_length() {
        assert_eq!(lower_median(&[4.0, 1.0, 3.0, 2.0]), Some(2.0));
        assert_eq!(lower_median(&[5.0]), Some(5.0));
        assert_eq!(lower_median(&[]), None);
    }
}
