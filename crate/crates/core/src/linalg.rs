//! Dense symmetric linear algebra used by the closed-form estimators:
//! eigendecomposition, Moore-Penrose pseudoinverse of PSD matrices, and SPD
//! solves. Factorizations are delegated to nalgebra; the contracts here (rank
//! truncation, jitter, symmetry checks) are what the estimators rely on.

use nalgebra::{Cholesky, DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

/// Relative eigenvalue cutoff for rank truncation in pseudo-inverses.
pub const DEFAULT_RTOL: f64 = 1e-10;

/// Eigendecomposition A = Q diag(eigenvalues) Q^T of a symmetric matrix, with
/// eigenvalues sorted in descending order and orthonormal eigenvector columns.
#[derive(Debug, Clone)]
pub struct SymEig {
    pub eigenvalues: Array1<f64>,
    pub eigenvectors: Array2<f64>,
}

pub(crate) fn to_dmatrix(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

pub(crate) fn from_dmatrix(a: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((a.nrows(), a.ncols()), |(i, j)| a[(i, j)])
}

fn check_symmetric(a: &Array2<f64>) -> Result<()> {
    if a.nrows() != a.ncols() {
        return Err(Error::invalid("matrix is not square"));
    }
    let scale = a.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    for i in 0..a.nrows() {
        for j in (i + 1)..a.ncols() {
            if (a[[i, j]] - a[[j, i]]).abs() > 1e-10 * scale {
                return Err(Error::invalid(format!(
                    "matrix is not symmetric at ({i},{j}): {} vs {}",
                    a[[i, j]],
                    a[[j, i]]
                )));
            }
        }
    }
    Ok(())
}

/// Eigendecomposition of a symmetric matrix (symmetry checked to 1e-10
/// relative to the largest entry).
pub fn sym_eig(a: &Array2<f64>) -> Result<SymEig> {
    check_symmetric(a)?;
    let eig = SymmetricEigen::new(to_dmatrix(a));
    let n = a.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].partial_cmp(&eig.eigenvalues[i]).unwrap());
    let eigenvalues = Array1::from_iter(order.iter().map(|&i| eig.eigenvalues[i]));
    let eigenvectors =
        Array2::from_shape_fn((n, n), |(i, j)| eig.eigenvectors[(i, order[j])]);
    Ok(SymEig { eigenvalues, eigenvectors })
}

impl SymEig {
    /// Q diag(f(lambda)) Q^T.
    pub fn map_rebuild(&self, f: impl Fn(f64) -> f64) -> Array2<f64> {
        let n = self.eigenvalues.len();
        let mut scaled = self.eigenvectors.clone();
        for j in 0..n {
            let fv = f(self.eigenvalues[j]);
            scaled.column_mut(j).mapv_inplace(|v| v * fv);
        }
        scaled.dot(&self.eigenvectors.t())
    }
}

/// Moore-Penrose pseudoinverse of a symmetric PSD matrix. Eigenvalues below
/// `rtol * lambda_max` (and negative ones within tolerance) are truncated to
/// zero; the zero matrix maps to the zero matrix.
pub fn pinv(a: &Array2<f64>, rtol: f64) -> Result<Array2<f64>> {
    let eig = sym_eig(a)?;
    let lmax = eig.eigenvalues.iter().fold(0.0f64, |m, &v| m.max(v));
    if lmax <= 0.0 {
        return Ok(Array2::zeros((a.nrows(), a.ncols())));
    }
    let cut = rtol * lmax;
    Ok(eig.map_rebuild(|l| if l > cut { 1.0 / l } else { 0.0 }))
}

/// Symmetric PSD square root with the same rank truncation as `pinv`.
pub fn sqrt_psd(a: &Array2<f64>, rtol: f64) -> Result<Array2<f64>> {
    let eig = sym_eig(a)?;
    let lmax = eig.eigenvalues.iter().fold(0.0f64, |m, &v| m.max(v));
    if lmax <= 0.0 {
        return Ok(Array2::zeros((a.nrows(), a.ncols())));
    }
    let cut = rtol * lmax;
    Ok(eig.map_rebuild(|l| if l > cut { l.sqrt() } else { 0.0 }))
}

/// Pseudo-inverse square root M^(+1/2) of a symmetric PSD matrix.
pub fn pinv_sqrt(a: &Array2<f64>, rtol: f64) -> Result<Array2<f64>> {
    let eig = sym_eig(a)?;
    let lmax = eig.eigenvalues.iter().fold(0.0f64, |m, &v| m.max(v));
    if lmax <= 0.0 {
        return Ok(Array2::zeros((a.nrows(), a.ncols())));
    }
    let cut = rtol * lmax;
    Ok(eig.map_rebuild(|l| if l > cut { 1.0 / l.sqrt() } else { 0.0 }))
}

/// Solves A X = B for symmetric positive definite A via Cholesky. If the
/// factorization fails, a jitter of 1e-12 * trace(A)/n is added to the
/// diagonal once before giving up.
pub fn solve_spd(a: &Array2<f64>, b: &Array2<f64>) -> Result<Array2<f64>> {
    check_symmetric(a)?;
    if a.nrows() != b.nrows() {
        return Err(Error::invalid("solve_spd: dimension mismatch"));
    }
    let am = to_dmatrix(a);
    let bm = to_dmatrix(b);
    if let Some(ch) = Cholesky::new(am.clone()) {
        return Ok(from_dmatrix(&ch.solve(&bm)));
    }
    let n = a.nrows();
    let jitter = 1e-12 * am.trace() / n as f64;
    let mut aj = am;
    for i in 0..n {
        aj[(i, i)] += jitter;
    }
    match Cholesky::new(aj) {
        Some(ch) => Ok(from_dmatrix(&ch.solve(&bm))),
        None => Err(Error::SingularMatrix(
            "solve_spd: matrix is numerically singular even after jitter".into(),
        )),
    }
}

/// Frobenius norm.
pub fn fro_norm(a: &Array2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Forces exact symmetry: (A + A^T)/2.
pub fn symmetrize(a: &Array2<f64>) -> Array2<f64> {
    let mut out = a.clone();
    for i in 0..a.nrows() {
        for j in 0..i {
            let m = 0.5 * (a[[i, j]] + a[[j, i]]);
            out[[i, j]] = m;
            out[[j, i]] = m;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;

    fn random_sym(n: usize, seed: u64) -> Array2<f64> {
        let mut rng = crate::rng::rng_from_seed(seed);
        let raw = Array2::from_shape_fn((n, n), |_| rng.gen::<f64>() * 2.0 - 1.0);
        symmetrize(&raw)
    }

    fn random_psd(n: usize, rank: usize, seed: u64) -> Array2<f64> {
        let mut rng = crate::rng::rng_from_seed(seed);
        let b = Array2::from_shape_fn((n, rank), |_| rng.gen::<f64>() * 2.0 - 1.0);
        b.dot(&b.t())
    }

    #[test]
    fn sym_eig_identity() {
        let eig = sym_eig(&Array2::<f64>::eye(3)).unwrap();
        for &l in eig.eigenvalues.iter() {
            assert!((l - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sym_eig_diagonal() {
        let eig = sym_eig(&array![[4.0, 0.0], [0.0, 1.0]]).unwrap();
        assert!((eig.eigenvalues[0] - 4.0).abs() < 1e-12);
        assert!((eig.eigenvalues[1] - 1.0).abs() < 1e-12);
        // axis eigenvectors up to sign
        assert!((eig.eigenvectors[[0, 0]].abs() - 1.0).abs() < 1e-12);
        assert!((eig.eigenvectors[[1, 1]].abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sym_eig_reconstructs_random() {
        let a = random_sym(5, 11);
        let eig = sym_eig(&a).unwrap();
        let rebuilt = eig.map_rebuild(|l| l);
        let err = fro_norm(&(&rebuilt - &a)) / fro_norm(&a);
        assert!(err < 1e-8, "reconstruction error {err}");
        // orthonormality
        let qtq = eig.eigenvectors.t().dot(&eig.eigenvectors);
        let diff = fro_norm(&(&qtq - &Array2::<f64>::eye(5)));
        assert!(diff < 1e-10);
    }

    #[test]
    fn sym_eig_rejects_nonsymmetric() {
        let a = array![[1.0, 2.0], [0.0, 1.0]];
        assert!(sym_eig(&a).is_err());
    }

    #[test]
    fn pinv_identity_and_diag() {
        let p = pinv(&Array2::<f64>::eye(3), DEFAULT_RTOL).unwrap();
        assert!(fro_norm(&(&p - &Array2::<f64>::eye(3))) < 1e-12);

        let p = pinv(&array![[2.0, 0.0], [0.0, 0.0]], DEFAULT_RTOL).unwrap();
        let want = array![[0.5, 0.0], [0.0, 0.0]];
        assert!(fro_norm(&(&p - &want)) < 1e-12);
    }

    #[test]
    fn pinv_zero_matrix() {
        let p = pinv(&Array2::zeros((2, 2)), DEFAULT_RTOL).unwrap();
        assert_eq!(p, Array2::zeros((2, 2)));
    }

    #[test]
    fn pinv_penrose_conditions_on_rank_deficient() {
        let a = random_psd(4, 2, 3);
        let p = pinv(&a, DEFAULT_RTOL).unwrap();
        let scale = fro_norm(&a);
        // A P A = A
        assert!(fro_norm(&(&a.dot(&p).dot(&a) - &a)) < 1e-8 * scale);
        // P A P = P
        assert!(fro_norm(&(&p.dot(&a).dot(&p) - &p)) < 1e-8 * scale.max(fro_norm(&p)));
        // (A P)^T = A P, (P A)^T = P A
        let ap = a.dot(&p);
        assert!(fro_norm(&(&ap.t().to_owned() - &ap)) < 1e-8 * scale);
        let pa = p.dot(&a);
        assert!(fro_norm(&(&pa.t().to_owned() - &pa)) < 1e-8 * scale);
    }

    #[test]
    fn pinv_is_involutive_on_psd() {
        let a = random_psd(5, 5, 17);
        let back = pinv(&pinv(&a, DEFAULT_RTOL).unwrap(), DEFAULT_RTOL).unwrap();
        assert!(fro_norm(&(&back - &a)) < 1e-7 * fro_norm(&a));
    }

    #[test]
    fn solve_spd_identity_and_diag() {
        let b = array![[2.0], [8.0]];
        let x = solve_spd(&Array2::<f64>::eye(2), &b).unwrap();
        assert!(fro_norm(&(&x - &b)) < 1e-12);

        let a = array![[2.0, 0.0], [0.0, 4.0]];
        let x = solve_spd(&a, &b).unwrap();
        assert!(fro_norm(&(&x - &array![[1.0], [2.0]])) < 1e-12);
    }

    #[test]
    fn solve_spd_residual_on_random() {
        let a = &random_psd(6, 6, 5) + &(Array2::<f64>::eye(6) * 0.5);
        let mut rng = crate::rng::rng_from_seed(6);
        let b = Array2::from_shape_fn((6, 2), |_| rng.gen::<f64>());
        let x = solve_spd(&a, &b).unwrap();
        let res = fro_norm(&(&a.dot(&x) - &b)) / fro_norm(&b);
        assert!(res < 1e-8, "residual {res}");
    }

    #[test]
    fn solve_spd_errors_on_indefinite() {
        let a = array![[1.0, 0.0], [0.0, -1.0]];
        assert!(solve_spd(&a, &Array2::<f64>::eye(2)).is_err());
    }

    // K^{1/2}(cK+I)^{-1}K^{1/2} = K(cK+I)^{-1} for PSD K, c > 0. This is the
    // identity that lets the estimator avoid matrix square roots.
    #[test]
    fn sqrt_sandwich_identity() {
        for seed in 0..10u64 {
            let n = 6;
            let k = random_psd(n, 4, 100 + seed);
            let c = 0.1 + seed as f64 * 0.3;
            let ck_i = &(&k * c) + &Array2::<f64>::eye(n);
            let rhs = solve_spd(&ck_i, &k).unwrap(); // (cK+I)^{-1} K = K(cK+I)^{-1}
            let k_half = sqrt_psd(&k, DEFAULT_RTOL).unwrap();
            let lhs = k_half.dot(&solve_spd(&ck_i, &k_half).unwrap());
            let err = fro_norm(&(&lhs - &rhs)) / fro_norm(&rhs).max(1e-12);
            assert!(err < 1e-8, "seed {seed}: identity violated, err {err}");
        }
    }
}
